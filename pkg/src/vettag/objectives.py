"""Training losses: per-label binary cross entropy, the cluster penalty on
head vectors, the noisy-OR meta-label loss, and their weighted combination.

Probabilities are clamped to [1e-7, 1 - 1e-7] before any logarithm; gradients
are exact for the clamped function (zero in the flat region), which is what
the finite-difference checks certify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import MetaGrouping

PROB_CLAMP = 1e-7

MODES = ("baseline", "cluster", "meta")


class ObjectiveConfigError(ValueError):
    """Mode/parameter inconsistency in the objective configuration."""


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which loss terms are active and how strongly they are weighted."""

    mode: str = "baseline"
    gamma_norm: float = 0.0
    gamma_between: float = 0.0
    gamma_within: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ObjectiveConfigError(f"unknown mode {self.mode!r}")
        gammas = (self.gamma_norm, self.gamma_between, self.gamma_within)
        if any(g < 0 for g in gammas) or self.beta < 0:
            raise ObjectiveConfigError("penalty weights must be >= 0")
        if self.mode == "baseline" and (any(g != 0 for g in gammas) or self.beta != 0):
            raise ObjectiveConfigError("baseline mode requires all penalty weights to be 0")
        if self.mode == "cluster" and self.beta != 0:
            raise ObjectiveConfigError("cluster mode requires beta = 0")
        if self.mode == "meta" and any(g != 0 for g in gammas):
            raise ObjectiveConfigError("meta mode requires the gamma weights to be 0")

    @classmethod
    def for_mode(cls, mode: str, gamma_norm=1e-4, gamma_between=1e-3, gamma_within=1e-3, beta=1e-3):
        """Config with the published best weights for the chosen mode."""
        if mode == "baseline":
            return cls("baseline")
        if mode == "cluster":
            return cls("cluster", gamma_norm=gamma_norm, gamma_between=gamma_between, gamma_within=gamma_within)
        if mode == "meta":
            return cls("meta", beta=beta)
        raise ObjectiveConfigError(f"unknown mode {mode!r}")


@dataclass
class LossBreakdown:
    bce: float
    omega_norm: float = 0.0
    omega_between: float = 0.0
    omega_within: float = 0.0
    meta: float = 0.0
    total: float = 0.0


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Binary cross entropy averaged across labels for one document."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != label shape {y.shape}")
    p = _clamp(y_hat)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_loss_batch(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-document BCE for a batch (rows are documents)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != label shape {y.shape}")
    p = _clamp(y_hat)
    return -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p), axis=-1)


def bce_grad_logits(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(BCE)/d(logits). Exactly (y_hat - y)/m where the clamp is inactive, 0 inside it."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = y_hat.shape[-1]
    active = (y_hat > PROB_CLAMP) & (y_hat < 1.0 - PROB_CLAMP)
    return np.where(active, (y_hat - y) / m, 0.0)


def cluster_penalty(heads: np.ndarray, grouping: MetaGrouping) -> tuple[float, float, float]:
    """(omega_norm, omega_between, omega_within) over the penalized head vectors.

    `heads` holds one row per label; only rows named by the grouping are
    penalized (the spurious head never is). The task mean is taken over the
    penalized rows.
    """
    ids = sorted(grouping.label_to_cluster)
    theta = heads[ids]
    omega_norm = float(np.sum(theta * theta))
    theta_bar = theta.mean(axis=0)
    omega_between = 0.0
    omega_within = 0.0
    for members in grouping.members:
        tk = heads[members]
        tk_bar = tk.mean(axis=0)
        diff = tk_bar - theta_bar
        omega_between += float(diff @ diff)
        dev = tk - tk_bar
        omega_within += float(np.sum(dev * dev))
    return omega_norm, omega_between, omega_within


def cluster_penalty_grads(heads: np.ndarray, grouping: MetaGrouping) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of the three penalty terms w.r.t. every head row."""
    ids = sorted(grouping.label_to_cluster)
    mprime = len(ids)
    theta_bar = heads[ids].mean(axis=0)

    g_norm = np.zeros_like(heads)
    g_norm[ids] = 2.0 * heads[ids]

    g_between = np.zeros_like(heads)
    g_within = np.zeros_like(heads)
    # d/d theta_i of sum_k ||tbar_k - tbar||^2: the cluster term through tbar_k
    # plus the shared term through tbar (cluster sizes are unequal, so the
    # deviations do not cancel).
    sum_dev = np.zeros(heads.shape[1])
    cluster_devs = []
    for members in grouping.members:
        tk_bar = heads[members].mean(axis=0)
        dev = tk_bar - theta_bar
        cluster_devs.append(dev)
        sum_dev += dev
    for members, dev in zip(grouping.members, cluster_devs):
        nk = len(members)
        g_between[members] += 2.0 * dev / nk
        tk = heads[members]
        g_within[members] += 2.0 * (tk - tk.mean(axis=0))
    g_between[ids] -= 2.0 * sum_dev / mprime
    return g_norm, g_between, g_within


def meta_probabilities(y_hat: np.ndarray, grouping: MetaGrouping) -> np.ndarray:
    """Noisy-OR probability of each meta label: 1 - prod(1 - y_hat_i) over members."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.ndim != 1:
        raise ValueError("meta_probabilities expects one document's probability vector")
    out = np.empty(grouping.k)
    for k, members in enumerate(grouping.members):
        out[k] = 1.0 - np.prod(1.0 - y_hat[members])
    return out


def meta_true_labels(y: np.ndarray, grouping: MetaGrouping) -> np.ndarray:
    """A meta label is present when any member label is tagged."""
    y = np.asarray(y)
    return np.array([float(np.any(y[members] > 0)) for members in grouping.members])


def meta_loss(y_hat: np.ndarray, y: np.ndarray, grouping: MetaGrouping) -> float:
    """BCE between noisy-OR meta probabilities and OR-composed meta truths."""
    p = _clamp(meta_probabilities(y_hat, grouping))
    t = meta_true_labels(y, grouping)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def meta_loss_grad_logits(y_hat: np.ndarray, y: np.ndarray, grouping: MetaGrouping) -> np.ndarray:
    """d(meta loss)/d(logits) for one document, chained through the noisy-OR."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    grad_p = np.zeros_like(y_hat)
    t = meta_true_labels(y, grouping)
    K = grouping.k
    for k, members in enumerate(grouping.members):
        one_minus = 1.0 - y_hat[members]
        pk_raw = 1.0 - np.prod(one_minus)
        pk = min(max(pk_raw, PROB_CLAMP), 1.0 - PROB_CLAMP)
        if pk_raw <= PROB_CLAMP or pk_raw >= 1.0 - PROB_CLAMP:
            continue  # clamp active: the loss is flat here
        dl_dpk = -(t[k] / pk - (1.0 - t[k]) / (1.0 - pk)) / K
        # d pk / d y_hat_i = prod_{j != i} (1 - y_hat_j)
        prod_all = np.prod(one_minus)
        with np.errstate(divide="ignore", invalid="ignore"):
            partial = np.where(one_minus > 0, prod_all / one_minus, 0.0)
        # recompute exactly where a member sits at 1 (division above is unusable)
        for pos, i in enumerate(members):
            if one_minus[pos] == 0.0:
                others = np.delete(one_minus, pos)
                partial[pos] = np.prod(others)
        grad_p[members] += dl_dpk * partial
    return grad_p * y_hat * (1.0 - y_hat)


def total_objective(
    config: ObjectiveConfig,
    y_hat: np.ndarray,
    y: np.ndarray,
    heads: np.ndarray,
    grouping: MetaGrouping | None,
) -> LossBreakdown:
    """Combine the active loss terms for one document (or a batch mean).

    `y_hat`/`y` may be 1-d (one document) or 2-d (batch); batch losses are
    plain means over documents. The raw omega/meta values are reported and
    the configured weights only enter the total.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bce = float(np.mean(bce_loss_batch(y_hat, y)))
    breakdown = LossBreakdown(bce=bce, total=bce)
    if config.mode == "cluster":
        if grouping is None:
            raise ObjectiveConfigError("cluster mode requires a meta grouping")
        on, ob, ow = cluster_penalty(heads, grouping)
        breakdown.omega_norm, breakdown.omega_between, breakdown.omega_within = on, ob, ow
        breakdown.total = bce + config.gamma_norm * on + config.gamma_between * ob + config.gamma_within * ow
    elif config.mode == "meta":
        if grouping is None:
            raise ObjectiveConfigError("meta mode requires a meta grouping")
        rows = np.atleast_2d(y_hat)
        trows = np.atleast_2d(y)
        ml = float(np.mean([meta_loss(r, t, grouping) for r, t in zip(rows, trows)]))
        breakdown.meta = ml
        breakdown.total = bce + config.beta * ml
    return breakdown
