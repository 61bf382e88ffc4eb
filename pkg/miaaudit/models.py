"""Report, artifact and wire models."""

import json
from enum import StrEnum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field


class AttackSet(StrEnum):
    TRAIN = "attack_train"
    VALID = "attack_valid"
    TEST = "attack_test"

    @property
    def short(self) -> str:
        return self.value.removeprefix("attack_")


class LabelMode(StrEnum):
    INSTANCE = "instance"
    PERSON = "person"


class SplitCounts(BaseModel):
    """Recording and frame counts for one attack set."""

    recordings: int
    recordings_instance: int
    """Recordings with y_instance = 1"""

    recordings_person: int
    """Recordings with y_person = 1"""

    frames: int
    frames_instance: int
    frames_person: int

    model_config = ConfigDict(use_attribute_docstrings=True)


class RecordingEntry(BaseModel):
    recording_id: str
    participant_id: str
    n_frames: int
    in_target_train: bool
    attack_set: AttackSet
    y_instance: int
    y_person: int


class CohortSidecar(BaseModel):
    """JSON sidecar written next to the per-frame CSV."""

    seed: int
    recordings: list[RecordingEntry]
    distribution: dict[AttackSet, SplitCounts]


class BinomialResult(BaseModel):
    """Exact binomial test against chance (p0 = 1/2 unless stated)."""

    successes: int
    trials: int
    one_sided_p: float
    """P(X >= k)"""

    two_sided_p: float
    """min(1, 2 * min(P(X >= k), P(X <= k)))"""

    one_minus_two_sided_p: float

    model_config = ConfigDict(use_attribute_docstrings=True)


class MultiRecordingBlock(BaseModel):
    """Recordings not trained on whose person has another recording that was.

    `person_hits` counts those the person model called members; the
    instance count is kept only for completeness.

    `binomial` tests the hit count against a coin flip. A tuned threshold
    moves the overall member-call rate away from 1/2, so `reference_p`
    compares the population against the set's recordings of people who
    never trained the target, scored by the same model and threshold.
    """

    total: int
    person_hits: int | None = None
    instance_hits: int | None = None
    binomial: BinomialResult | None = None
    reference_total: int = 0
    """Recordings in the set whose person has no trained recording"""

    reference_hits: int | None = None
    reference_p: float | None = None
    """Two-sided Fisher exact p, population hit rate against reference hit rate"""

    population_auc: float | None = None
    """AUC with the population as positives and the reference as negatives"""

    model_config = ConfigDict(use_attribute_docstrings=True)


class EvalReport(BaseModel):
    """Recording-level evaluation of one label mode on one attack set."""

    label_mode: LabelMode
    attack_set: AttackSet
    roc_points: list[tuple[float, float]]
    """(fpr, tpr) pairs from (0, 0) to (1, 1)"""

    auc: float | None
    pr_points: list[tuple[float, float]]
    """(recall, precision) pairs"""

    average_precision: float | None
    accuracy: float
    f1: float
    mean_bce: float
    """Mean BCE of the recording-level membership probabilities"""

    frame_bce: float | None = None
    """Mean BCE of the frame classifier on this set's frames"""

    binomial: BinomialResult | None = None
    multi_recording: MultiRecordingBlock

    model_config = ConfigDict(use_attribute_docstrings=True)


class EpochRecord(BaseModel):
    epoch: int
    train_bce: float
    valid_bce: float


class FeatureTableRow(BaseModel):
    feature_config: str
    best_valid_bce: float
    best_epoch: int


class AuditReport(BaseModel):
    """Everything one label mode of `miaaudit run` produced."""

    label_mode: LabelMode
    feature_config: str
    threshold: float
    target_epochs: int
    target_train_mse: float
    target_heldout_mse: float | None
    attack_history: list[EpochRecord]
    attack_best_epoch: int
    evaluations: dict[AttackSet, EvalReport]
    distribution: dict[AttackSet, SplitCounts]
    feature_table: list[FeatureTableRow] = Field(default_factory=list)
    bce_baseline: float
    """Chance-level frame BCE, ln 2"""

    config: dict
    """Echo of the experiment config (seeds and dial settings included)"""

    model_config = ConfigDict(use_attribute_docstrings=True)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2) + "\n"

    @classmethod
    def from_json_file(cls, path: Path | str) -> "AuditReport":
        """Load a report written by `miaaudit run`."""
        return cls.model_validate(json.loads(Path(path).read_text()))


class SweepRow(BaseModel):
    dial_value: str
    generalization_gap: float | None
    """Held-out minus train MSE of the target"""

    instance_auc: float | None
    person_auc: float | None
    person_hit_rate: float | None
    """Person-model hit rate on the test multi-recording population"""

    binomial_p: float | None
    """Two-sided exact binomial p of that hit count"""

    model_config = ConfigDict(use_attribute_docstrings=True)


class EvaluatePayload(BaseModel):
    """Request body for POST /v1/evaluate."""

    scores: list[float]
    labels: list[int]
    threshold: float = 0.5

    model_config = ConfigDict(use_attribute_docstrings=True)


class EvaluateResult(BaseModel):
    auc: float
    average_precision: float
    accuracy: float
    f1: float


class SignificancePayload(BaseModel):
    """Request body for POST /v1/significance."""

    successes: int = Field(ge=0)
    trials: int = Field(ge=0)
