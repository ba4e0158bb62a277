"""Abstention: deciding which documents to hand to a human coder.

Two priority schemes. The confidence baseline turns per-label probabilities
into distance-from-0.5 confidences, runs the Poisson-binomial dynamic program
for P(exactly k labels correct), and scores a document by its expected
fraction of incorrect labels. The learned scheme fits a 3-layer SELU
regressor to per-document accuracy or loss targets and ranks by the
prediction. Higher priority always means "drop first".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Parameter, selu, selu_grad
from .objectives import bce_loss_batch
from .taxonomy import LabelSet
from .evaluation import weighted_f1_and_em

FEATURE_KINDS = ("confidence", "probability", "logit", "pooled")
TARGET_KINDS = ("accuracy", "loss")

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))


class AbstentionError(ValueError):
    pass


def confidence(y_hat: np.ndarray) -> np.ndarray:
    """g(p) = p if p > 0.5 else 1 - p; the boundary maps to 0.5."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    return np.where(y_hat > 0.5, y_hat, 1.0 - y_hat)


def exact_k_distribution(g: np.ndarray) -> np.ndarray:
    """P(exactly k labels correct), k = 0..m, for independent per-label
    correctness probabilities g. Poisson-binomial recurrence, O(m^2);
    mathematically equal to the sum over size-k subsets."""
    g = np.asarray(g, dtype=np.float64)
    dist = np.zeros(g.size + 1)
    dist[0] = 1.0
    for j, gi in enumerate(g):
        dist[1 : j + 2] = dist[1 : j + 2] * (1.0 - gi) + dist[: j + 1] * gi
        dist[0] *= 1.0 - gi
    return dist


def priority_baseline(g: np.ndarray) -> float:
    """Expected fraction of incorrect labels: 1 - sum_k (k/m) P(k).

    Uses the whole exact-k distribution; by the Poisson-binomial mean
    identity this equals mean(1 - g). Higher scores are dropped first.
    """
    g = np.asarray(g, dtype=np.float64)
    m = g.size
    if m == 0:
        return 0.0
    dist = exact_k_distribution(g)
    return float(1.0 - np.arange(m + 1) @ dist / m)


def abstention_targets(predictions, gold) -> tuple[np.ndarray, np.ndarray]:
    """Per-document regression targets: label accuracy of the hard decisions,
    and the document's BCE loss."""
    if len(predictions) != len(gold):
        raise AbstentionError(f"{len(predictions)} predictions vs {len(gold)} gold rows")
    decisions = np.stack([np.asarray(p.decisions, dtype=np.float64) for p in predictions])
    probs = np.stack([np.asarray(p.probabilities, dtype=np.float64) for p in predictions])
    y = (np.asarray(gold) > 0).astype(np.float64)
    if decisions.shape != y.shape:
        raise AbstentionError(f"decision shape {decisions.shape} != gold shape {y.shape}")
    alpha_accu = np.mean(decisions == y, axis=1)
    alpha_loss = bce_loss_batch(probs, y)
    return alpha_accu, alpha_loss


def abstention_features(kind: str, predictions) -> np.ndarray:
    """Feature matrix for the learned abstainer, one row per document."""
    if kind not in FEATURE_KINDS:
        raise AbstentionError(f"unknown feature kind {kind!r}")
    if kind == "confidence":
        return np.stack([np.asarray(p.confidences, dtype=np.float64) for p in predictions])
    if kind == "probability":
        return np.stack([np.asarray(p.probabilities, dtype=np.float64) for p in predictions])
    if kind == "logit":
        return np.stack([np.asarray(p.logits, dtype=np.float64) for p in predictions])
    return np.stack([np.asarray(p.pooled, dtype=np.float64) for p in predictions])


@dataclass
class AbstainerConfig:
    feature_kind: str = "confidence"
    target_kind: str = "accuracy"
    hidden: tuple[int, int] = (64, 64)
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise AbstentionError(f"unknown feature kind {self.feature_kind!r}")
        if self.target_kind not in TARGET_KINDS:
            raise AbstentionError(f"unknown target kind {self.target_kind!r}")


@dataclass
class AbstentionModel:
    """3 affine layers with SELU between; scalar output."""

    params: list[Parameter]
    feature_kind: str
    target_kind: str
    input_dim: int

    @classmethod
    def create(cls, input_dim: int, config: AbstainerConfig, rng: np.random.Generator) -> "AbstentionModel":
        h1, h2 = config.hidden
        dims = [(h1, input_dim), (h2, h1), (1, h2)]
        params = []
        for li, (nout, nin) in enumerate(dims, start=1):
            bound = 1.0 / np.sqrt(nin)
            params.append(Parameter(f"abstain_w{li}", rng.uniform(-bound, bound, (nout, nin))))
            params.append(Parameter(f"abstain_b{li}", np.zeros(nout)))
        return cls(params=params, feature_kind=config.feature_kind, target_kind=config.target_kind, input_dim=input_dim)

    def forward(self, z: np.ndarray, want_cache: bool = False):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.input_dim:
            raise AbstentionError(f"feature dim {z.shape[1]} != model input dim {self.input_dim}")
        w1, b1, w2, b2, w3, b3 = [p.value for p in self.params]
        a1 = z @ w1.T + b1
        s1 = selu(a1)
        a2 = s1 @ w2.T + b2
        s2 = selu(a2)
        out = (s2 @ w3.T + b3).reshape(-1)
        if want_cache:
            return out, (z, a1, s1, a2, s2)
        return out

    def backward(self, dout: np.ndarray, cache) -> None:
        """Accumulate gradients for a batch; dout is d(loss)/d(output), shape (B,)."""
        z, a1, s1, a2, s2 = cache
        w1, b1, w2, b2, w3, b3 = self.params
        d3 = dout.reshape(-1, 1)
        w3.grad += d3.T @ s2
        b3.grad += d3.sum(axis=0)
        ds2 = d3 @ w3.value
        da2 = ds2 * selu_grad(a2)
        w2.grad += da2.T @ s1
        b2.grad += da2.sum(axis=0)
        ds1 = da2 @ w2.value
        da1 = ds1 * selu_grad(a1)
        w1.grad += da1.T @ z
        b1.grad += da1.sum(axis=0)


def train_abstainer(features: np.ndarray, targets: np.ndarray, config: AbstainerConfig) -> AbstentionModel:
    """Fit the regressor by minibatch MSE with adaptive-moment updates."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if features.ndim != 2 or features.shape[0] != targets.size:
        raise AbstentionError(f"feature matrix {features.shape} does not align with {targets.size} targets")
    if not np.all(np.isfinite(targets)):
        raise AbstentionError("targets must be finite")
    rng = np.random.default_rng(config.seed)
    model = AbstentionModel.create(features.shape[1], config, rng)
    n = features.shape[0]
    moments = {p.name: (np.zeros_like(p.value), np.zeros_like(p.value)) for p in model.params}
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            z, t = features[batch], targets[batch]
            for p in model.params:
                p.zero_grad()
            pred, cache = model.forward(z, want_cache=True)
            dout = 2.0 * (pred - t) / len(batch)
            model.backward(dout, cache)
            step += 1
            for p in model.params:
                m, v = moments[p.name]
                m *= 0.9
                m += 0.1 * p.grad
                v *= 0.999
                v += 0.001 * p.grad * p.grad
                mhat = m / (1.0 - 0.9**step)
                vhat = v / (1.0 - 0.999**step)
                p.value -= config.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
    return model


def learned_priority(model: AbstentionModel, z: np.ndarray) -> np.ndarray:
    """Drop-first scores: predicted loss directly, or 1 - predicted accuracy."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.input_dim:
        raise AbstentionError(
            f"feature dim {z.shape[1]} does not match the {model.feature_kind!r} features "
            f"the model was trained on (dim {model.input_dim})"
        )
    pred = model.forward(z)
    if model.target_kind == "accuracy":
        return 1.0 - pred
    return pred


@dataclass
class SweepCurve:
    scheme: str
    fractions: tuple[float, ...]
    f1_weighted: list[float] = field(default_factory=list)
    exact_match: list[float] = field(default_factory=list)
    retained: list[int] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fraction,f1_weighted,em,scheme\n")
            for f, f1, em in zip(self.fractions, self.f1_weighted, self.exact_match):
                fh.write(f"{f!r},{f1!r},{em!r},{self.scheme}\n")


def sweep(
    priorities: np.ndarray,
    decisions: np.ndarray,
    gold: np.ndarray,
    labels: LabelSet,
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
    scheme: str = "baseline",
) -> SweepCurve:
    """Retained-set weighted F1 and EM after dropping the floor(f*N) highest
    priorities at each fraction (ties broken by document index)."""
    priorities = np.asarray(priorities, dtype=np.float64)
    n = priorities.size
    if len(decisions) != n or len(gold) != n:
        raise AbstentionError("priorities, decisions, and gold must align")
    order = np.argsort(-priorities, kind="stable")  # drop-first order; stable = index tie-break
    curve = SweepCurve(scheme=scheme, fractions=tuple(fractions))
    for f in fractions:
        k = int(np.floor(f * n))
        keep = np.sort(order[k:])
        f1w, em = weighted_f1_and_em(decisions[keep], gold[keep], labels)
        curve.f1_weighted.append(f1w)
        curve.exact_match.append(em)
        curve.retained.append(int(keep.size))
    return curve
