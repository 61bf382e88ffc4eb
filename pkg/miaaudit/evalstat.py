"""Evaluation mathematics: ROC/AUC, PR/AP, accuracy/F1, BCE, exact tests."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats

from .models import BinomialResult


class MetricError(ValueError):
    """Raised when a metric is undefined for the given scores or labels."""


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr, strict=True))


@dataclass(frozen=True)
class PrCurve:
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    average_precision: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall, self.precision, strict=True))


Scores = Sequence[float] | np.ndarray
Labels = Sequence[int] | np.ndarray


def _as_arrays(scores: Scores, labels: Labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"Scores {s.shape} and labels {y.shape} differ in shape")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("Labels must be 0 or 1")
    return s, y


def _cumulative_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """True/false positive counts at each distinct score, highest score first."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    return tps, fps


def roc_auc(scores: Scores, labels: Labels) -> RocCurve:
    """Tie-grouped ROC sweep and its trapezoidal area."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes")
    tps, fps = _cumulative_counts(s, y)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return RocCurve(
        fpr=tuple(fpr.tolist()),
        tpr=tuple(tpr.tolist()),
        auc=float(np.trapezoid(tpr, fpr)),
    )


def pr_ap(scores: Scores, labels: Labels) -> PrCurve:
    """Precision-recall over descending-score prefixes; step-wise average precision."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("Average precision needs at least one positive")
    tps, fps = _cumulative_counts(s, y)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PrCurve(
        recall=tuple(recall.tolist()),
        precision=tuple(precision.tolist()),
        average_precision=ap,
    )


def accuracy_f1(decisions: Labels, labels: Labels) -> tuple[float, float]:
    d, y = _as_arrays(decisions, labels)
    if y.size == 0:
        raise MetricError("Accuracy of an empty set is undefined")
    d = d.astype(np.int64)
    tp = int(np.sum((d == 1) & (y == 1)))
    tn = int(np.sum((d == 0) & (y == 0)))
    fp = int(np.sum((d == 1) & (y == 0)))
    fn = int(np.sum((d == 0) & (y == 1)))
    denominator = 2 * tp + fp + fn
    return (tp + tn) / y.size, (2 * tp / denominator if denominator else 0.0)


def mean_bce(probabilities: Scores, labels: Scores) -> float:
    """Mean of -(y ln p + (1 - y) ln(1 - p))."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise MetricError(f"Probabilities {p.shape} and labels {y.shape} mismatch")
    if not ((p > 0.0) & (p < 1.0)).all():
        raise MetricError("Probabilities must lie strictly inside (0, 1)")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def upper_tail(k: int, n: int, p0: Fraction = Fraction(1, 2)) -> Fraction:
    """Exact P(X >= k) for X ~ Binomial(n, p0)."""
    return sum(
        (math.comb(n, i) * p0**i * (1 - p0) ** (n - i) for i in range(k, n + 1)),
        Fraction(0),
    )


def lower_tail(k: int, n: int, p0: Fraction = Fraction(1, 2)) -> Fraction:
    """Exact P(X <= k) for X ~ Binomial(n, p0)."""
    return sum(
        (math.comb(n, i) * p0**i * (1 - p0) ** (n - i) for i in range(0, k + 1)),
        Fraction(0),
    )


def binomial_test(
    k: int, n: int, p0: Fraction | float = Fraction(1, 2)
) -> BinomialResult:
    """Exact binomial test of k successes in n trials.

    Tail sums use exact rational arithmetic; conversion to float happens
    once, at the end.
    """
    if n < 0 or k < 0 or k > n:
        raise MetricError(f"Need 0 <= k <= n, got k={k}, n={n}")
    p0 = Fraction(p0)
    upper = upper_tail(k, n, p0)
    lower = lower_tail(k, n, p0)
    two_sided = min(Fraction(1), 2 * min(upper, lower))
    return BinomialResult(
        successes=k,
        trials=n,
        one_sided_p=float(upper),
        two_sided_p=float(two_sided),
        one_minus_two_sided_p=float(1 - two_sided),
    )


def hit_rate_test(
    hits: int, total: int, reference_hits: int, reference_total: int
) -> float:
    """Two-sided Fisher exact p that two groups share one member-call rate."""
    if not (0 <= hits <= total and 0 <= reference_hits <= reference_total):
        raise MetricError(
            f"Need hits within totals, got {hits}/{total} and "
            f"{reference_hits}/{reference_total}"
        )
    if total == 0 or reference_total == 0:
        raise MetricError("Hit-rate comparison needs two non-empty groups")
    table = [[hits, total - hits], [reference_hits, reference_total - reference_hits]]
    return float(stats.fisher_exact(table).pvalue)


def null_auc_band(
    n_pos: int, n_neg: int, z: float = 1.959963984540054
) -> tuple[float, float]:
    """Approximate 95% band of the AUC of a random scorer (Mann-Whitney variance)."""
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC band needs both classes")
    sigma = math.sqrt((n_pos + n_neg + 1) / (12 * n_pos * n_neg))
    return 0.5 - z * sigma, 0.5 + z * sigma
