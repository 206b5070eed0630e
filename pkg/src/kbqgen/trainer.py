"""RMSProp training with decreasing learning rate, checkpoints, ablations.

All randomness (shuffling, dropout masks, TransE negatives) derives from the
config seed plus epoch/example counters, so a run is reproducible bit-for-bit
in float64 and a checkpoint resume continues the exact trajectory.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from random import Random

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import kbembed
from . import metrics
from . import objective as obj
from .model import Model, load_word_vectors

RHO = 0.9
EPSILON = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.001
    lr_decay: float = 0.97
    batch_size: int = 16
    epochs: int = 30
    lam: float = 0.2
    seed: int = 0
    d: int = 32
    heads: int = 2
    layers: int = 2
    dropout: float = 0.1
    transe: bool = False
    freeze_kb: bool = False
    transe_epochs: int = 40
    transe_margin: float = 1.0
    transe_lr: float = 0.01
    transe_neg: int = 1
    max_len: int = 40
    grad_clip: float = 5.0
    patience: int = 0
    min_freq: int = 2
    use_fusion: bool = True
    use_kb_copy: bool = True
    use_ctx_copy: bool = True
    diversified: bool = True
    question_only: bool = False
    word_vectors: str = ""
    dtype: str = "float64"
    profile: str = "desk"

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"profile must be desk or paper, got {self.profile}")
        return self

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def canonical_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


_PAPER_PROFILE = {"d": 200, "heads": 4, "layers": 5, "batch_size": 200}

_KEY_ALIASES = {"lambda": "lam"}


def parse_config(path=None, text=None, overrides=None):
    """Parse key=value lines into a TrainConfig; unknown keys are rejected.

    ``profile=paper`` fills in paper-scale dims for any key not set
    explicitly. Explicit keys and overrides always win.
    """
    if text is None:
        text = ""
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    known = {f.name: f for f in fields(TrainConfig)}
    seen = {}

    def parse_pair(raw, where):
        if "=" not in raw:
            raise ConfigError(f"{where}: expected key=value, got {raw!r}")
        key, value = raw.split("=", 1)
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        value = value.strip()
        if key not in known:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        ftype = known[key].type
        try:
            if ftype == "bool":
                if value.lower() not in ("true", "false", "on", "off", "1", "0"):
                    raise ValueError(value)
                parsed = value.lower() in ("true", "on", "1")
            elif ftype == "int":
                parsed = int(value)
            elif ftype == "float":
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(f"{where}: bad value {value!r} for {key}") from None
        seen[key] = parsed

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parse_pair(line, f"line {lineno}")
    for raw in overrides or []:
        parse_pair(raw, "override")

    if seen.get("profile") == "paper":
        for key, value in _PAPER_PROFILE.items():
            seen.setdefault(key, value)
    return TrainConfig(**seen).validate()


class RMSProp:
    """v <- rho v + (1-rho) g^2; theta <- theta - lr g / (sqrt(v) + eps)."""

    def __init__(self, params, skip_names=()):
        self.params = list(params)
        self.skip = set(skip_names)
        self.moments = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def step(self, lr, clip=0.0):
        if clip > 0.0:
            norm_sq = 0.0
            for p in self.params:
                if p.name in self.skip:
                    continue
                norm_sq += float((p.grad * p.grad).sum())
            norm = math.sqrt(norm_sq)
            if norm > clip:
                factor = clip / norm
                for p in self.params:
                    p.value.grad *= factor
        for p in self.params:
            if p.name not in self.skip:
                g = p.grad
                v = self.moments[p.name]
                v *= RHO
                v += (1.0 - RHO) * g * g
                p.value.data -= lr * g / (np.sqrt(v) + EPSILON)
            p.zero_grad()


@dataclass
class Checkpoint:
    tensors: dict  # name -> array
    moments: dict  # name -> array
    epoch: int
    config_hash: str
    config_text: str = ""  # canonical key=value lines, so checkpoints are self-contained


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list  # (epoch, train loss, valid bleu4)
    aborted: bool = False


def save_checkpoint(ckpt, path):
    cfg_lines = [l for l in ckpt.config_text.splitlines() if l]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"kbqgen-model 1\nepoch {ckpt.epoch}\nconfighash {ckpt.config_hash}\n")
        fh.write(f"config {len(cfg_lines)}\n")
        for line in cfg_lines:
            fh.write(line + "\n")
        for section, table in (("tensor", ckpt.tensors), ("moment", ckpt.moments)):
            for name, arr in table.items():
                rows, cols = arr.shape
                fh.write(f"{section} {name} {rows} {cols}\n")
                for row in arr:
                    fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_checkpoint(path):
    tensors, moments = {}, {}
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().split()
        if magic[:1] != ["kbqgen-model"]:
            raise ConfigError(f"{path}: not a model checkpoint")
        epoch = int(fh.readline().split()[1])
        config_hash = fh.readline().split()[1]
        n_cfg = int(fh.readline().split()[1])
        config_text = "".join(fh.readline() for _ in range(n_cfg))
        while True:
            header = fh.readline()
            if not header:
                break
            section, name, rows, cols = header.split()
            arr = np.empty((int(rows), int(cols)))
            for i in range(int(rows)):
                arr[i] = np.fromstring(fh.readline(), sep=" ")
            (tensors if section == "tensor" else moments)[name] = arr
    return Checkpoint(
        tensors=tensors, moments=moments, epoch=epoch,
        config_hash=config_hash, config_text=config_text,
    )


def _snapshot(model, optimizer, epoch, config):
    return Checkpoint(
        tensors={name: p.value.data.copy() for name, p in model.registry.items()},
        moments={name: v.copy() for name, v in optimizer.moments.items()},
        epoch=epoch,
        config_hash=config.hash(),
        config_text=config.canonical_text(),
    )


def _restore(model, optimizer, ckpt):
    for name, arr in ckpt.tensors.items():
        if name not in model.registry:
            raise ConfigError(f"checkpoint tensor {name!r} unknown to this model")
        model.registry[name].value.data[...] = arr
    for name, arr in ckpt.moments.items():
        optimizer.moments[name][...] = arr


def build_model(config, dataset, kb_matrix=None):
    """Model for a dataset per config; pretrains TransE when asked."""
    if kb_matrix is None and config.transe:
        triples = [
            (ex.fact.subject, ex.fact.predicate, ex.fact.object)
            for split in sorted(dataset.splits)
            for ex in dataset.splits[split]
        ]
        kb_matrix = kbembed.pretrain_transe(
            triples, dataset.kbvocab, d=config.d,
            margin=config.transe_margin, lr=config.transe_lr,
            epochs=config.transe_epochs, neg_per_pos=config.transe_neg,
            seed=config.seed,
        )
    vectors = load_word_vectors(config.word_vectors) if config.word_vectors else None
    return Model(
        dataset.vocab, dataset.kbvocab,
        d=config.d, heads=config.heads, layers=config.layers, seed=config.seed,
        max_len=config.max_len,
        kb_table=kb_matrix.table if kb_matrix is not None else None,
        word_vectors=vectors,
        use_fusion=config.use_fusion, use_kb_copy=config.use_kb_copy,
        use_ctx_copy=config.use_ctx_copy, dtype=config.np_dtype(),
    )


def example_loss(model, example, config, drop=None):
    """Total loss tensor plus breakdown for one teacher-forced example."""
    result = model.forward_example(example, drop=drop)
    ques = obj.question_loss(result.distributions, result.gold_ext_ids)
    if config.question_only:
        breakdown = obj.LossBreakdown(
            ques_loss=ques.item(), ans_loss=0.0, total_loss=ques.item(), argmin_pair=None
        )
        return ques, breakdown
    ans, pair = obj.answer_loss(result.distributions, result.answer_ext_ids)
    total = obj.total_loss(ques, ans, config.lam)
    return total, obj.LossBreakdown(
        ques_loss=ques.item(), ans_loss=ans.item(), total_loss=total.item(), argmin_pair=pair
    )


def decode_split(model, dataset, split, beam=1, max_len=32):
    """Greedy/beam decode a split; returns realized token lists and modes."""
    outputs = []
    for example in dataset.examples(split):
        if beam <= 1:
            tokens, modes = dec.greedy_decode(model, example, max_len=max_len)
        else:
            tokens, modes = dec.beam_decode(model, example, beam_width=beam, max_len=max_len)
        name = dataset.entities[dataset.kbvocab.token(example.fact.subject)].name
        realized = dec.surface_realize(tokens, name).split()
        outputs.append((realized, modes))
    return outputs


def valid_bleu(model, dataset, split="valid", max_len=32):
    examples = dataset.splits.get(split, [])
    if not examples:
        return 0.0
    decoded = decode_split(model, dataset, split, max_len=max_len)
    return metrics.bleu4(
        [tokens for tokens, _ in decoded],
        [list(ex.raw_question_words) for ex in examples],
    )


def _epoch_rng(seed, epoch):
    return Random(seed * 1_000_003 + epoch)


def train(config, dataset, kb_matrix=None, resume=None, log=None):
    """Full training run; returns best-valid and final checkpoints.

    Per epoch: seeded shuffle, gradient accumulation over each batch, one
    RMSProp step per batch at lr0 * decay^epoch, then greedy BLEU-4 on the
    validation split. A NaN loss aborts with the last finite checkpoint.
    """
    config.validate()
    model = build_model(config, dataset, kb_matrix=kb_matrix)
    optimizer = RMSProp(
        model.parameters(), skip_names=("kb_emb",) if config.freeze_kb else ()
    )
    start_epoch = 0
    if resume is not None:
        _restore(model, optimizer, resume)
        start_epoch = resume.epoch
    train_examples = dataset.examples("train")
    history = []
    last = _snapshot(model, optimizer, start_epoch, config)
    best = last
    best_bleu = -1.0
    stale = 0
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr0 * config.lr_decay**epoch
        order = list(range(len(train_examples)))
        _epoch_rng(config.seed, epoch).shuffle(order)
        epoch_loss = 0.0
        diverged = False
        for batch_start in range(0, len(order), config.batch_size):
            batch = order[batch_start : batch_start + config.batch_size]
            model.zero_grads()
            for idx in batch:
                drop = None
                if config.dropout > 0:
                    rng = np.random.default_rng([config.seed, epoch, idx])
                    drop = lambda t, r=rng: ad.dropout(t, config.dropout, r)
                total, breakdown = example_loss(model, train_examples[idx], config, drop=drop)
                if not math.isfinite(breakdown.total_loss):
                    diverged = True
                    break
                ad.backward(ad.scale(total, 1.0 / len(batch)))
                epoch_loss += breakdown.total_loss
            if diverged:
                break
            optimizer.step(lr, clip=config.grad_clip)
        if diverged:
            return TrainResult(best=best, last=last, history=history, aborted=True)
        mean_loss = epoch_loss / max(len(train_examples), 1)
        bleu = valid_bleu(model, dataset, max_len=config.max_len)
        history.append((epoch, mean_loss, bleu))
        if log is not None:
            log(epoch, mean_loss, bleu)
        last = _snapshot(model, optimizer, epoch + 1, config)
        if bleu > best_bleu:
            best_bleu = bleu
            best = last
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    return TrainResult(best=best, last=last, history=history)


def model_from_checkpoint(config, dataset, ckpt):
    model = build_model(replace(config, transe=False), dataset)
    for name, arr in ckpt.tensors.items():
        if name not in model.registry:
            raise ConfigError(f"checkpoint tensor {name!r} unknown to this model")
        model.registry[name].value.data[...] = arr
    return model


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

LAMBDA_GRID = (0.0, 0.05, 0.2, 0.5, 1.0)

COMPONENT_VARIANTS = (
    ("full", {}),
    ("no_ctx_copy", {"use_ctx_copy": False}),
    ("no_kb_copy", {"use_kb_copy": False}),
    ("no_answer_loss", {"question_only": True}),
    ("no_diversified_contexts", {"diversified": True}),  # handled via dataset reload
)


def ablate_lambda_transe(config, dataset, lambdas=LAMBDA_GRID, transe_options=(True, False),
                         split="test", log=None):
    """Grid over answer-loss weight x TransE init; BLEU-4 and coverage per cell."""
    rows = []
    for use_transe in transe_options:
        for lam in lambdas:
            run_cfg = replace(config, lam=lam, transe=use_transe)
            result = train(run_cfg, dataset)
            model = model_from_checkpoint(run_cfg, dataset, result.best)
            decoded = decode_split(model, dataset, split, max_len=config.max_len)
            examples = dataset.examples(split)
            bleu = metrics.bleu4(
                [t for t, _ in decoded], [list(ex.raw_question_words) for ex in examples]
            )
            coverage = metrics.answer_coverage(
                [t for t, _ in decoded], [set(ex.answer_type_words) for ex in examples]
            )
            rows.append({"transe": use_transe, "lambda": lam, "bleu4": bleu, "answer_coverage": coverage})
            if log is not None:
                log(rows[-1])
    return rows


def ablate_components(config, load_dataset_fn, seeds=(0, 1, 2), split="valid", log=None):
    """Single-component ablations; per-variant median valid BLEU over seeds.

    ``load_dataset_fn(diversified)`` supplies the dataset, since dropping
    diversified contexts changes the data itself, not just the model.
    """
    rows = []
    for name, flags in COMPONENT_VARIANTS:
        diversified = name != "no_diversified_contexts"
        dataset = load_dataset_fn(diversified)
        bleus = []
        for seed in seeds:
            run_cfg = replace(config, seed=seed, diversified=diversified, **{
                k: v for k, v in flags.items() if k != "diversified"
            })
            result = train(run_cfg, dataset)
            model = model_from_checkpoint(run_cfg, dataset, result.best)
            decoded = decode_split(model, dataset, split, max_len=config.max_len)
            examples = dataset.examples(split)
            bleus.append(
                metrics.bleu4(
                    [t for t, _ in decoded], [list(ex.raw_question_words) for ex in examples]
                )
            )
        rows.append({"variant": name, "bleu4_median": float(np.median(bleus)), "bleu4_runs": bleus})
        if log is not None:
            log(rows[-1])
    return rows
