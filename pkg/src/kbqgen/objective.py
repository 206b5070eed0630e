"""Question-aware loss, answer-aware loss, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad

PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    ques_loss: float
    ans_loss: float
    total_loss: float
    argmin_pair: tuple | None  # (answer ext id, step index) picked by the min


def question_loss(step_distributions, gold_ext_ids):
    """Mean negative log-likelihood of the gold tokens under the mixture.

    Expects exactly one distribution row per gold token (teacher forcing,
    EOS step included). Probabilities are floored at 1e-12 so an
    impossible gold token yields a finite loss.
    """
    t_len = step_distributions.data.shape[0]
    if t_len != len(gold_ext_ids):
        raise ad.ContractError(
            f"{t_len} step distributions for {len(gold_ext_ids)} gold tokens"
        )
    per_step = ad.neg_log_prob(step_distributions, gold_ext_ids, floor=PROB_FLOOR)
    return ad.scale(ad.sum_all(per_step), 1.0 / t_len)


def answer_loss(step_distributions, answer_ext_ids):
    """Minimum cross entropy for emitting any answer type word at any step.

    Returns (loss tensor, (answer id, step) or None). The min is hard: the
    gradient flows only through the selected pair. An empty answer set
    legitimately yields zero loss.
    """
    if not answer_ext_ids:
        return ad.tensor([[0.0]]), None
    probs = step_distributions.data
    # min cross entropy == max probability; enumerate answer-word-major,
    # step-minor, keeping the first strict maximum for determinism
    best = None
    best_val = None
    for a in answer_ext_ids:
        col = probs[:, a]
        for t in range(col.shape[0]):
            val = float(col[t])
            if best_val is None or val > best_val:
                best_val = val
                best = (a, t)
    a_star, t_star = best
    row = ad.gather(step_distributions, [t_star])
    loss = ad.neg_log_prob(row, [a_star], floor=PROB_FLOOR)
    return loss, (a_star, t_star)


def total_loss(ques, ans, lam):
    """ques + lam * ans; lam=0 leaves the question loss bit-identical."""
    if lam < 0:
        raise ad.ContractError(f"answer-loss weight must be >= 0, got {lam}")
    return ad.add(ques, ad.scale(ans, lam))


def evaluate_losses(step_distributions, gold_ext_ids, answer_ext_ids, lam):
    """Convenience wrapper returning (total tensor, LossBreakdown)."""
    ques = question_loss(step_distributions, gold_ext_ids)
    ans, pair = answer_loss(step_distributions, answer_ext_ids)
    total = total_loss(ques, ans, lam)
    return total, LossBreakdown(
        ques_loss=ques.item(),
        ans_loss=ans.item(),
        total_loss=total.item(),
        argmin_pair=pair,
    )
