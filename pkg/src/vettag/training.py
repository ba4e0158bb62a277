"""The optimization loop: seeded mini-batches, adaptive-moment updates with
bias correction, global-norm gradient clipping, per-epoch validation, and
restoration of the best-epoch parameters.

Deterministic given the config seed and single-threaded math: two runs with
the same inputs produce bit-identical histories.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Document, label_matrix
from .evaluation import weighted_f1_and_em
from .model import TaggerModel, backward_batch, decide, forward_batch, pad_batch
from .numerics import Parameter
from .objectives import (
    LossBreakdown,
    ObjectiveConfig,
    bce_grad_logits,
    bce_loss_batch,
    cluster_penalty,
    cluster_penalty_grads,
    meta_loss,
    meta_loss_grad_logits,
)
from .taxonomy import LabelSet, MetaGrouping

HISTORY_COLUMNS = (
    "epoch",
    "train_total",
    "train_bce",
    "omega_norm",
    "omega_between",
    "omega_within",
    "meta_loss",
    "val_f1_weighted",
    "val_em",
)


class DivergenceError(RuntimeError):
    """Loss became non-finite; message names the offending epoch/batch."""


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    clip_norm: float = 5.0
    max_epochs: int = 5
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.clip_norm <= 0:
            raise TrainConfigError("learning rate, batch size and clip norm must be positive")
        if self.max_epochs < 0:
            raise TrainConfigError("max_epochs must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        obj = data.pop("objective", {})
        if isinstance(obj, dict):
            obj = ObjectiveConfig(**obj)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(objective=obj, **data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


@dataclass
class EpochStats:
    epoch: int
    train_total: float
    train_bce: float
    omega_norm: float
    omega_between: float
    omega_within: float
    meta_loss: float
    val_f1_weighted: float
    val_em: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    chosen_epoch: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for e in self.epochs:
                row = [
                    str(e.epoch),
                    repr(e.train_total),
                    repr(e.train_bce),
                    repr(e.omega_norm),
                    repr(e.omega_between),
                    repr(e.omega_within),
                    repr(e.meta_loss),
                    repr(e.val_f1_weighted),
                    repr(e.val_em),
                ]
                fh.write(",".join(row) + "\n")


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients by max_norm/|g| when the global L2 norm exceeds it."""
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in params:
        p.grad *= factor
    return factor


class AdamState:
    """First/second moment accumulators with bias correction."""

    def __init__(self, params: list[Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}
        self.t = 0

    def step(self, params: list[Parameter], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in params:
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def batch_loss_and_grad(
    model: TaggerModel,
    ids: np.ndarray,
    lengths: np.ndarray,
    y: np.ndarray,
    objective: ObjectiveConfig,
    grouping: MetaGrouping | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Forward + backward over one padded batch; gradients accumulate into the
    model parameters. Returns the loss breakdown for the batch."""
    fwd = forward_batch(model, ids, lengths, train=train, rng=rng)
    probs = fwd.probabilities
    B = probs.shape[0]
    bce = float(np.mean(bce_loss_batch(probs, y)))
    breakdown = LossBreakdown(bce=bce, total=bce)

    dlogits = bce_grad_logits(probs, y) / B
    if objective.mode == "cluster":
        on, ob, ow = cluster_penalty(model.heads.value, grouping)
        breakdown.omega_norm, breakdown.omega_between, breakdown.omega_within = on, ob, ow
        breakdown.total = (
            bce + objective.gamma_norm * on + objective.gamma_between * ob + objective.gamma_within * ow
        )
        gn, gb, gw = cluster_penalty_grads(model.heads.value, grouping)
        model.heads.grad += objective.gamma_norm * gn + objective.gamma_between * gb + objective.gamma_within * gw
    elif objective.mode == "meta":
        ml = 0.0
        for r in range(B):
            ml += meta_loss(probs[r], y[r], grouping)
            dlogits[r] += objective.beta * meta_loss_grad_logits(probs[r], y[r], grouping) / B
        ml /= B
        breakdown.meta = ml
        breakdown.total = bce + objective.beta * ml

    backward_batch(model, fwd, dlogits)
    return breakdown


def validation_metrics(model: TaggerModel, docs: list[Document], labels: LabelSet, batch_size: int = 64):
    gold = label_matrix(docs, labels.m)
    decisions = np.zeros_like(gold)
    row = 0
    for start in range(0, len(docs), batch_size):
        chunk = docs[start : start + batch_size]
        ids, lengths = pad_batch([d.token_ids for d in chunk])
        fwd = forward_batch(model, ids, lengths, train=False)
        decisions[row : row + len(chunk)] = decide(fwd.probabilities)
        row += len(chunk)
    return weighted_f1_and_em(decisions, gold, labels)


def train(
    model: TaggerModel,
    train_docs: list[Document],
    val_docs: list[Document],
    config: TrainConfig,
    labels: LabelSet,
    grouping: MetaGrouping | None = None,
) -> tuple[TaggerModel, TrainHistory]:
    """Optimize the tagger in place and return it with its history.

    Mini-batches are reshuffled each epoch from the config seed; the last
    incomplete batch is kept. After every epoch the model is scored on the
    validation split (weighted F1, the early-stopping metric, plus EM); on
    exit the parameters of the best epoch are restored.
    """
    if not train_docs or not val_docs:
        raise TrainConfigError("training needs non-empty train and validation splits")
    history = TrainHistory()
    if config.max_epochs == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    params = model.params()
    adam = AdamState(params, config.beta1, config.beta2, config.adam_eps)
    y_all = label_matrix(train_docs, labels.m)
    n = len(train_docs)

    best_metric = -np.inf
    best_values: list[np.ndarray] | None = None
    best_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = {"total": 0.0, "bce": 0.0, "on": 0.0, "ob": 0.0, "ow": 0.0, "meta": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            chunk = [train_docs[i] for i in batch_idx]
            ids, lengths = pad_batch([d.token_ids for d in chunk])
            y = y_all[batch_idx]
            model.zero_grads()
            breakdown = batch_loss_and_grad(
                model, ids, lengths, y, config.objective, grouping, train=True, rng=rng
            )
            if not np.isfinite(breakdown.total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches} "
                    f"(documents {[d.id for d in chunk[:3]]}...)"
                )
            clip_gradients(params, config.clip_norm)
            adam.step(params, config.learning_rate)
            sums["total"] += breakdown.total
            sums["bce"] += breakdown.bce
            sums["on"] += breakdown.omega_norm
            sums["ob"] += breakdown.omega_between
            sums["ow"] += breakdown.omega_within
            sums["meta"] += breakdown.meta
            n_batches += 1

        val_f1, val_em = validation_metrics(model, val_docs, labels)
        stats = EpochStats(
            epoch=epoch,
            train_total=sums["total"] / n_batches,
            train_bce=sums["bce"] / n_batches,
            omega_norm=sums["on"] / n_batches,
            omega_between=sums["ob"] / n_batches,
            omega_within=sums["ow"] / n_batches,
            meta_loss=sums["meta"] / n_batches,
            val_f1_weighted=val_f1,
            val_em=val_em,
            seconds=time.perf_counter() - t0,
        )
        history.epochs.append(stats)
        if val_f1 > best_metric:
            best_metric = val_f1
            best_epoch = epoch
            best_values = [p.value.copy() for p in params]

    if best_values is not None:
        for p, v in zip(params, best_values):
            p.value[...] = v
    history.chosen_epoch = best_epoch
    return model, history
