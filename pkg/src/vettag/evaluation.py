"""Metrics reported by the tagger: per-label precision/recall/F1/accuracy,
weighted and unweighted macro aggregates, exact match, calibration
diagnostics, and the subtype-count regression.

Decisions and gold labels are dense 0/1 matrices with one row per document
and one column per label.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import stats

from .taxonomy import LabelSet


class MetricsError(ValueError):
    pass


class SingularDesignError(ValueError):
    """Regression design matrix is rank deficient."""


@dataclass
class LabelMetrics:
    label_id: int
    code: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    support: int
    subtypes: int
    zero_division: bool


@dataclass
class AggregateMetrics:
    precision_unweighted: float
    precision_weighted: float
    recall_unweighted: float
    recall_weighted: float
    f1_unweighted: float
    f1_weighted: float
    exact_match: float


@dataclass
class CalibrationReport:
    bins: int
    counts: np.ndarray
    mean_predicted: np.ndarray
    positive_frequency: np.ndarray
    ece: float
    total: int


@dataclass
class SubtypeRegression:
    names: tuple[str, ...]
    coefficients: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    n_used: int


def _as01(a) -> np.ndarray:
    return (np.asarray(a) > 0).astype(np.int64)


def per_label_metrics(
    decisions: np.ndarray,
    gold: np.ndarray,
    labels: LabelSet,
    subtype_counts: np.ndarray | None = None,
) -> list[LabelMetrics]:
    """Confusion-matrix metrics per label; zero-division cells are 0 with a flag."""
    d = _as01(decisions)
    g = _as01(gold)
    if d.shape != g.shape:
        raise MetricsError(f"decision shape {d.shape} != gold shape {g.shape}")
    if d.shape[1] != labels.m:
        raise MetricsError(f"matrices have {d.shape[1]} labels, taxonomy has {labels.m}")
    if subtype_counts is None:
        subtype_counts = np.zeros(labels.m, dtype=np.int64)
    n = d.shape[0]
    out = []
    for i, rec in enumerate(labels.records):
        tp = int(np.sum((d[:, i] == 1) & (g[:, i] == 1)))
        fp = int(np.sum((d[:, i] == 1) & (g[:, i] == 0)))
        fn = int(np.sum((d[:, i] == 0) & (g[:, i] == 1)))
        tn = n - tp - fp - fn
        flagged = False
        if tp + fp > 0:
            precision = tp / (tp + fp)
        else:
            precision, flagged = 0.0, True
        if tp + fn > 0:
            recall = tp / (tp + fn)
        else:
            recall, flagged = 0.0, True
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        accuracy = (tp + tn) / n if n else 0.0
        out.append(
            LabelMetrics(
                label_id=i,
                code=rec.code,
                tp=tp,
                fp=fp,
                fn=fn,
                tn=tn,
                precision=precision,
                recall=recall,
                f1=f1,
                accuracy=accuracy,
                support=tp + fn,
                subtypes=int(subtype_counts[i]),
                zero_division=flagged,
            )
        )
    return out


def aggregate(metrics: list[LabelMetrics], decisions: np.ndarray, gold: np.ndarray) -> AggregateMetrics:
    """Unweighted macro = plain mean over labels; weighted uses per-label support."""
    d = _as01(decisions)
    g = _as01(gold)
    prec = np.array([m.precision for m in metrics])
    rec = np.array([m.recall for m in metrics])
    f1 = np.array([m.f1 for m in metrics])
    sup = np.array([m.support for m in metrics], dtype=np.float64)
    total_sup = sup.sum()

    def wavg(v: np.ndarray) -> float:
        return float(v @ sup / total_sup) if total_sup > 0 else 0.0

    em = float(np.mean(np.all(d == g, axis=1))) if d.shape[0] else 0.0
    return AggregateMetrics(
        precision_unweighted=float(prec.mean()),
        precision_weighted=wavg(prec),
        recall_unweighted=float(rec.mean()),
        recall_weighted=wavg(rec),
        f1_unweighted=float(f1.mean()),
        f1_weighted=wavg(f1),
        exact_match=em,
    )


def weighted_f1_and_em(decisions: np.ndarray, gold: np.ndarray, labels: LabelSet) -> tuple[float, float]:
    """Convenience pair used by validation scoring and abstention sweeps."""
    metrics = per_label_metrics(decisions, gold, labels)
    agg = aggregate(metrics, decisions, gold)
    return agg.f1_weighted, agg.exact_match


def calibration_report(probabilities: np.ndarray, gold: np.ndarray, bins: int = 10) -> CalibrationReport:
    """Equal-width right-inclusive bins over [0,1]; ECE is the count-weighted mean gap.

    Every (document, label) prediction is one instance; the gap compares mean
    predicted probability to the empirical frequency of the positive label.
    """
    if bins < 1:
        raise MetricsError("bins must be >= 1")
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = _as01(gold).reshape(-1)
    if p.shape != y.shape:
        raise MetricsError(f"probability count {p.shape} != gold count {y.shape}")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise MetricsError("probabilities must lie in [0, 1]")
    # right-inclusive bin index; the tiny slack keeps exact boundaries like 0.1
    # in their closed bin despite binary rounding
    idx = np.ceil(p * bins - 1e-12).astype(np.int64) - 1
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    mean_pred = np.zeros(bins)
    pos_freq = np.zeros(bins)
    np.add.at(mean_pred, idx, p)
    np.add.at(pos_freq, idx, y.astype(np.float64))
    nonzero = counts > 0
    mean_pred[nonzero] /= counts[nonzero]
    pos_freq[nonzero] /= counts[nonzero]
    total = int(p.size)
    ece = float(np.sum(counts[nonzero] / total * np.abs(pos_freq[nonzero] - mean_pred[nonzero]))) if total else 0.0
    return CalibrationReport(
        bins=bins, counts=counts, mean_predicted=mean_pred, positive_frequency=pos_freq, ece=ece, total=total
    )


def subtype_regression(
    f1: np.ndarray, train_support: np.ndarray, subtype_counts: np.ndarray
) -> SubtypeRegression:
    """OLS of per-label F1 on (intercept, log N, subtype count) with classical t-tests."""
    f1 = np.asarray(f1, dtype=np.float64)
    n_train = np.asarray(train_support, dtype=np.float64)
    subs = np.asarray(subtype_counts, dtype=np.float64)
    keep = n_train > 0
    if int(keep.sum()) < 4:
        raise MetricsError("need at least 4 labels with positive support")
    y = f1[keep]
    X = np.column_stack([np.ones(keep.sum()), np.log(n_train[keep]), subs[keep]])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError("design matrix is rank deficient")
    XtX = X.T @ X
    beta = np.linalg.solve(XtX, X.T @ y)
    resid = y - X @ beta
    dof = X.shape[0] - X.shape[1]
    if dof <= 0:
        raise SingularDesignError("not enough rows for t statistics")
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(XtX)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.inf * np.sign(beta))
    p = 2.0 * stats.t.sf(np.abs(t), dof)
    return SubtypeRegression(
        names=("intercept", "log_n", "subtypes"),
        coefficients=beta,
        t_stats=t,
        p_values=p,
        n_used=int(keep.sum()),
    )


def write_label_report_csv(metrics: list[LabelMetrics], path) -> None:
    """Per-label CSV mirroring the headline report columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "n", "precision", "recall", "f1", "accuracy", "subtypes"])
        for m in metrics:
            w.writerow([m.code, m.support, repr(m.precision), repr(m.recall), repr(m.f1), repr(m.accuracy), m.subtypes])


def write_aggregate_json(agg: AggregateMetrics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(agg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_scatter_csv(metrics: list[LabelMetrics], train_support: np.ndarray, path) -> None:
    """`label,log_n,f1` rows for labels with training examples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "log_n", "f1"])
        for m in metrics:
            n = float(train_support[m.label_id])
            if n > 0:
                w.writerow([m.code, repr(math.log(n)), repr(m.f1)])
