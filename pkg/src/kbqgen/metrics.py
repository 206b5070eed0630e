"""Corpus-level BLEU-4, ROUGE-L, METEOR-lite, answer coverage, exports.

All metrics take token lists (one candidate per reference, as in the
single-gold-question dataset) and return percentages in [0, 100]. METEOR
here is the dependency-free variant: exact matches, then one-suffix
stemming; no synonym resources, so scores are comparable only against this
module's own formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from random import Random


@dataclass
class ExampleRecord:
    candidate: str
    reference: str
    covered: bool
    matched_answer_word: str | None


@dataclass
class EvalReport:
    bleu4: float
    rouge_l: float
    meteor: float
    answer_coverage: float
    records: list


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu4(candidates, references):
    """Corpus BLEU-4: pooled modified n-gram precisions times brevity penalty.

    Higher-order precisions (n >= 2) get add-one smoothing when their
    matched count is zero; a zero unigram precision short-circuits to 0.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        return 0.0
    matched = [0] * 5
    total = [0] * 5
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            c_counts = _ngram_counts(cand, n)
            r_counts = _ngram_counts(ref, n)
            total[n] += max(len(cand) - n + 1, 0)
            matched[n] += sum(min(c, r_counts.get(g, 0)) for g, c in c_counts.items())
    if cand_len == 0 or matched[1] == 0:
        return 0.0
    log_sum = math.log(matched[1] / total[1])
    for n in range(2, 5):
        if matched[n] == 0:
            log_sum += math.log((matched[n] + 1) / (total[n] + 1))
        else:
            log_sum += math.log(matched[n] / total[n])
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_sum / 4.0)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta=1.2):
    """Mean per-example LCS F-measure."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        return 0.0
    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        lcs = _lcs_length(cand, ref)
        if lcs == 0 or not cand or not ref:
            scores.append(0.0)
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        scores.append((1 + beta**2) * r * p / (r + beta**2 * p))
    return 100.0 * sum(scores) / len(scores)


def _stem(token):
    for suffix in ("ing", "es", "ed", "s"):
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            return token[: -len(suffix)]
    return token


def _align(cand, ref):
    """Greedy unigram alignment: exact matches first, then stem matches.

    Returns matched (candidate index, reference index) pairs ordered by
    candidate position.
    """
    pairs = {}
    used_ref = set()
    for key in (lambda t: t, _stem):
        ref_keys = [key(t) for t in ref]
        for i, tok in enumerate(cand):
            if i in pairs:
                continue
            want = key(tok)
            for j, rk in enumerate(ref_keys):
                if j not in used_ref and rk == want:
                    pairs[i] = j
                    used_ref.add(j)
                    break
    return sorted(pairs.items())


def _chunks(pairs):
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidates, references):
    """Unigram F (recall-weighted 9:1) with a fragmentation penalty.

    score = F_mean * (1 - 0.5 * (chunks / matches)^3); the penalty is
    therefore at most 0.5 and vanishes for a single contiguous alignment of
    a long sentence.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        return 0.0
    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        pairs = _align(cand, ref)
        m = len(pairs)
        if m == 0 or not cand or not ref:
            scores.append(0.0)
            continue
        p = m / len(cand)
        r = m / len(ref)
        f_mean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (_chunks(pairs) / m) ** 3
        scores.append(f_mean * (1.0 - penalty))
    return 100.0 * sum(scores) / len(scores)


def answer_coverage(candidates, answer_word_sets):
    """Percentage of candidates containing at least one of their answer words.

    Pure integer counting; the only float operation is the final division.
    """
    if len(candidates) != len(answer_word_sets):
        raise ValueError("candidate/answer-set count mismatch")
    if not candidates:
        return 0.0
    covered = 0
    for cand, answers in zip(candidates, answer_word_sets):
        if set(cand) & set(answers):
            covered += 1
    return 100.0 * covered / len(candidates)


def evaluate(candidates, references, answer_word_sets):
    """Full report over aligned candidate/reference/answer-set lists."""
    records = []
    for cand, ref, answers in zip(candidates, references, answer_word_sets):
        matched = None
        for tok in cand:
            if tok in set(answers):
                matched = tok
                break
        records.append(
            ExampleRecord(
                candidate=" ".join(cand),
                reference=" ".join(ref),
                covered=matched is not None,
                matched_answer_word=matched,
            )
        )
    return EvalReport(
        bleu4=bleu4(candidates, references),
        rouge_l=rouge_l(candidates, references),
        meteor=meteor_lite(candidates, references),
        answer_coverage=answer_coverage(candidates, answer_word_sets),
        records=records,
    )


def report_lines(report):
    """Machine-readable metric<TAB>value lines."""
    return [
        f"bleu4\t{report.bleu4:.4f}",
        f"rouge_l\t{report.rouge_l:.4f}",
        f"meteor\t{report.meteor:.4f}",
        f"answer_coverage\t{report.answer_coverage:.4f}",
    ]


def report_table(report):
    """Aligned human-readable table."""
    rows = [
        ("BLEU-4", report.bleu4),
        ("ROUGE-L", report.rouge_l),
        ("METEOR-lite", report.meteor),
        ("Answer coverage", report.answer_coverage),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value:8.4f}" for name, value in rows]
    return "\n".join(lines)


def export_annotation_sample(rows, n, seed, path):
    """Seeded sample of generations for human judgment, as TSV.

    ``rows`` are (fact ids, predicate context text, generated question)
    triples; judgment columns are left empty for the annotators.
    """
    rng = Random(seed)
    sample = rows if len(rows) <= n else rng.sample(list(rows), n)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fact\tpredicate_context\tquestion\tpredicate_match(0/1)\tnaturalness(0-5)\n")
        for fact, context, question in sample:
            fh.write(f"{fact}\t{context}\t{question}\t\t\n")
    return len(sample)
