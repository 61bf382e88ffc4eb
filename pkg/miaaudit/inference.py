"""Recording-level membership inference.

A recording's frame probabilities are reduced to five statistics (mean,
variance, skewness, excess kurtosis, mean binary entropy). A linear SVM on
the standardized statistics yields a margin, which a monotone sigmoid maps
to a probability; a validation-tuned threshold turns that into a decision.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt
from scipy.optimize import minimize
from scipy.special import entr, expit

from . import nnet

logger = logging.getLogger(__name__)

# second central moment below which skewness and kurtosis are reported as 0
DEGENERATE_VARIANCE = 1e-12


class InferenceError(Exception):
    """Raised when recording-level inference gets unusable input."""


class SvmConfig(BaseModel):
    """Linear SVM training settings."""

    regularization: NonNegativeFloat = 0.01
    epochs: PositiveInt = 500
    learning_rate: PositiveFloat = 0.1
    """
    Initial subgradient step, decayed as 1 / sqrt(t)
    """

    batch_size: PositiveInt | None = None
    """
    None: full-batch subgradient steps; otherwise seeded shuffled mini-batches
    """

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


@dataclass(frozen=True)
class RecordingSummary:
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    entropy: float
    recording_id: str = ""
    y_instance: int | None = None
    y_person: int | None = None

    def statistics(self) -> np.ndarray:
        return np.array(
            [
                self.mean,
                self.variance,
                self.skewness,
                self.excess_kurtosis,
                self.entropy,
            ]
        )


@dataclass(frozen=True)
class MarginSquashing:
    """p = sigmoid(slope * margin / margin_scale + intercept), slope > 0."""

    slope: float
    intercept: float
    margin_scale: float

    def __call__(self, margins: np.ndarray) -> np.ndarray:
        z = np.asarray(margins) / self.margin_scale
        return expit(self.slope * z + self.intercept)


@dataclass(frozen=True, eq=False)
class LinearSVM:
    weight: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    squashing: MarginSquashing
    threshold: float | None = None

    def margin(self, statistics: np.ndarray) -> np.ndarray:
        z = (np.asarray(statistics) - self.feature_mean) / self.feature_scale
        return z @ self.weight + self.bias

    def probability(self, statistics: np.ndarray) -> np.ndarray:
        return self.squashing(self.margin(statistics))

    def with_threshold(self, threshold: float) -> "LinearSVM":
        if not 0.0 <= threshold <= 1.0:
            raise InferenceError(f"Threshold {threshold} outside [0, 1]")
        return replace(self, threshold=threshold)


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    accuracy: float


@dataclass(frozen=True)
class MembershipDecision:
    member: bool
    probability: float


def summarize_recording(
    probabilities: Sequence[float] | np.ndarray,
    recording_id: str = "",
    y_instance: int | None = None,
    y_person: int | None = None,
) -> RecordingSummary:
    """Population moments and mean binary entropy (nats) of frame probabilities."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise InferenceError("Cannot summarize a recording without frames")
    if not ((p > 0.0) & (p < 1.0)).all():
        raise InferenceError("Frame probabilities must lie strictly inside (0, 1)")

    mean = float(p.mean())
    deviation = p - mean
    m2 = float(np.mean(deviation**2))
    if m2 < DEGENERATE_VARIANCE:
        skewness = kurtosis = 0.0
    else:
        skewness = float(np.mean(deviation**3)) / m2**1.5
        kurtosis = float(np.mean(deviation**4)) / m2**2 - 3.0
    return RecordingSummary(
        mean=mean,
        variance=m2,
        skewness=skewness,
        excess_kurtosis=kurtosis,
        entropy=float(np.mean(entr(p) + entr(1.0 - p))),
        recording_id=recording_id,
        y_instance=y_instance,
        y_person=y_person,
    )


def _check_labels(labels: np.ndarray, n: int) -> None:
    if labels.size != n or n == 0:
        raise InferenceError(f"Expected {n} labels, got {labels.size}")
    if len(np.unique(labels)) < 2:
        raise InferenceError("Training data contains a single class")


def fit_margin_squashing(margins: np.ndarray, labels: np.ndarray) -> MarginSquashing:
    """Fit a monotone sigmoid on margins (Platt targets, positive slope).

    Margins are divided by their spread first, so a positive rescaling of
    the margins yields the same probabilities.
    """
    margins = np.asarray(margins, dtype=np.float64)
    labels = np.asarray(labels)
    spread = float(margins.std())
    margin_scale = spread if spread > 1e-12 else 1.0
    z = margins / margin_scale

    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    targets = np.where(labels == 1, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        f = params[0] * z + params[1]
        residual = expit(f) - targets
        loss = float(np.sum(np.logaddexp(0.0, f) - targets * f))
        return loss, np.array([residual @ z, residual.sum()])

    result = minimize(
        objective,
        x0=np.array([1.0, np.log((n_neg + 1) / (n_pos + 1))]),
        jac=True,
        method="L-BFGS-B",
        bounds=[(1e-6, None), (None, None)],
        options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 1000},
    )
    slope, intercept = result.x
    return MarginSquashing(
        slope=float(slope), intercept=float(intercept), margin_scale=margin_scale
    )


def train_svm(
    summaries: Sequence[RecordingSummary],
    labels: Sequence[int],
    regularization: float = 0.01,
    epochs: int = 500,
    seed: int = 0,
    learning_rate: float = 0.1,
    batch_size: int | None = None,
) -> LinearSVM:
    """L2-regularized hinge loss by deterministic subgradient descent."""
    y = np.asarray(labels, dtype=np.int64)
    _check_labels(y, len(summaries))

    x = np.array([summary.statistics() for summary in summaries])
    feature_mean = x.mean(axis=0)
    feature_scale = x.std(axis=0)
    feature_scale = np.where(feature_scale > 1e-12, feature_scale, 1.0)
    z = (x - feature_mean) / feature_scale
    sign = 2.0 * y - 1.0

    rng = nnet.make_rng(seed)
    weight = np.zeros(z.shape[1])
    bias = 0.0
    for t in range(1, epochs + 1):
        step = learning_rate / np.sqrt(t)
        batches = (
            [np.arange(y.size)]
            if batch_size is None
            else nnet.iterate_minibatches(y.size, batch_size, rng)
        )
        for batch in batches:
            margins = sign[batch] * (z[batch] @ weight + bias)
            active = batch[margins < 1.0]
            grad_w = regularization * weight - (sign[active] @ z[active]) / batch.size
            grad_b = -sign[active].sum() / batch.size
            weight = weight - step * grad_w
            bias = bias - step * grad_b

    margins = z @ weight + bias
    svm = LinearSVM(
        weight=weight,
        bias=float(bias),
        feature_mean=feature_mean,
        feature_scale=feature_scale,
        squashing=fit_margin_squashing(margins, y),
    )
    accuracy = float(np.mean((margins >= 0) == (y == 1)))
    logger.info(
        f"Trained linear SVM on {y.size} recordings: train accuracy {accuracy:.3f}"
    )
    return svm


def best_threshold(
    probabilities: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray
) -> ThresholdChoice:
    """Accuracy-maximizing threshold over 0, 1 and midpoints of sorted probabilities.

    Ties go to the larger threshold.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0 or p.size != y.size:
        raise InferenceError(
            "Threshold tuning needs a nonempty, labeled validation set"
        )
    distinct = np.unique(p)
    candidates = [0.0, *((distinct[:-1] + distinct[1:]) / 2).tolist(), 1.0]
    best = ThresholdChoice(threshold=0.0, accuracy=-1.0)
    for candidate in candidates:
        accuracy = float(np.mean((p >= candidate) == (y == 1)))
        if accuracy >= best.accuracy:
            best = ThresholdChoice(threshold=candidate, accuracy=accuracy)
    return best


def tune_threshold(
    svm: LinearSVM, summaries: Sequence[RecordingSummary], labels: Sequence[int]
) -> float:
    """Validation-tuned decision threshold on the SVM probability scale."""
    if not summaries:
        raise InferenceError("Threshold tuning needs a nonempty validation set")
    statistics = np.array([summary.statistics() for summary in summaries])
    choice = best_threshold(svm.probability(statistics), labels)
    logger.info(
        f"Tuned threshold {choice.threshold:.4f} "
        f"(validation accuracy {choice.accuracy:.3f})"
    )
    return choice.threshold


def infer_membership(svm: LinearSVM, summary: RecordingSummary) -> MembershipDecision:
    """Member iff probability >= threshold."""
    if svm.threshold is None:
        raise InferenceError("SVM has no tuned threshold")
    probability = float(svm.probability(summary.statistics()))
    return MembershipDecision(
        member=probability >= svm.threshold, probability=probability
    )
