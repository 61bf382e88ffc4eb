"""Synthetic participant / recording / frame cohort and attack splits.

Every participant carries a latent identity (per-branch vectors and a face
position offset). Frames of one participant share that identity; their
noise and gaze are drawn independently per frame, and the gaze label does
not depend on identity.
"""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Annotated, Self

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    model_validator,
)

from .models import AttackSet, CohortSidecar, RecordingEntry, SplitCounts
from .nnet import make_rng

logger = logging.getLogger(__name__)

FRAMES_FILE = "frames.csv"
SIDECAR_FILE = "cohort.json"

BRANCHES = ("left_eye", "right_eye", "face", "face_grid")

# half-width of the face box on the unit frame
_FACE_BOX = 0.25

Fraction01 = Annotated[float, Field(gt=0.0, lt=1.0)]


class CohortError(Exception):
    """Raised when a cohort cannot be generated, marked or split as requested."""


class CohortConfig(BaseModel):
    """Synthetic cohort parameters."""

    n_participants: PositiveInt = 48

    recordings_per_participant: dict[PositiveInt, PositiveFloat] = Field(
        default_factory=lambda: {1: 0.75, 2: 0.25}
    )
    """
    Distribution of recording counts per participant (count -> weight)
    """

    frames_per_recording: tuple[PositiveInt, PositiveInt] = (30, 50)
    """
    Inclusive range the per-recording frame count is drawn from uniformly
    """

    eye_dim: PositiveInt = 16
    face_dim: PositiveInt = 24
    face_grid_size: PositiveInt = 5
    """
    Face grid is a binary face_grid_size x face_grid_size map
    """

    identity_signal_strength: Annotated[float, Field(ge=0.0, le=1.0)] = 1.0
    """
    Scale of the participant identity component in every branch
    """

    noise_scale: NonNegativeFloat = 0.5
    label_noise: NonNegativeFloat = 0.05
    """
    Standard deviation of per-frame noise added to the gaze label
    """

    target_train_fraction: Fraction01 = 0.5

    forced_pairs: NonNegativeInt | None = None
    """
    Multi-recording participants forced to one recording in and one out of
    the target training set (None: all of them)
    """

    exact_count: bool = True
    """
    Mark exactly round(fraction * n) of the free recordings instead of
    independent coin flips
    """

    split_ratios: tuple[NonNegativeFloat, NonNegativeFloat, NonNegativeFloat] = (
        0.4,
        0.28,
        0.32,
    )
    """
    Attack train / valid / test ratios
    """

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)

    @model_validator(mode="after")
    def check_ranges(self) -> Self:
        low, high = self.frames_per_recording
        if low > high:
            raise ValueError(f"frames_per_recording range {low}..{high} is empty")
        total = sum(self.split_ratios)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split_ratios must sum to 1, got {total}")
        return self

    @property
    def grid_dim(self) -> int:
        return self.face_grid_size**2


@dataclass(frozen=True, eq=False)
class Frame:
    left_eye: np.ndarray
    right_eye: np.ndarray
    face: np.ndarray
    face_grid: np.ndarray
    gaze_label: np.ndarray
    """Screen coordinates, arbitrary units"""

    participant_id: str
    recording_id: str
    frame_index: int


@dataclass(frozen=True, eq=False)
class Recording:
    recording_id: str
    participant_id: str
    frames: tuple[Frame, ...]
    in_target_train: bool = False

    def __post_init__(self) -> None:
        if not self.frames:
            raise CohortError(f"Recording {self.recording_id} has no frames")
        for frame in self.frames:
            if (frame.recording_id, frame.participant_id) != (
                self.recording_id,
                self.participant_id,
            ):
                raise CohortError(
                    f"Frame {frame.frame_index} does not belong to {self.recording_id}"
                )


@dataclass(frozen=True)
class CohortSplit:
    assignment: dict[str, AttackSet]
    y_instance: dict[str, int]
    y_person: dict[str, int]

    def recording_ids(self, attack_set: AttackSet) -> list[str]:
        return [rid for rid, s in self.assignment.items() if s is attack_set]

    def multi_recording_population(self, attack_set: AttackSet) -> list[str]:
        """Recordings outside target training whose person has one inside."""
        return [
            rid
            for rid in self.recording_ids(attack_set)
            if self.y_person[rid] == 1 and self.y_instance[rid] == 0
        ]

    def labels(self, label_mode: str) -> dict[str, int]:
        return self.y_instance if label_mode == "instance" else self.y_person


def _gaze_ground_truth(direction: np.ndarray) -> np.ndarray:
    x, y = direction
    return np.array([x + 0.25 * y**2, y + 0.25 * np.sin(np.pi * x)])


def _face_grid(center: np.ndarray, size: int) -> np.ndarray:
    cells = (np.arange(size) + 0.5) / size
    inside_x = np.abs(cells - center[0]) <= _FACE_BOX
    inside_y = np.abs(cells - center[1]) <= _FACE_BOX
    return np.outer(inside_y, inside_x).astype(np.float64).ravel()


def generate_cohort(config: CohortConfig, seed: int) -> list[Recording]:
    """Draw a cohort; fully determined by (config, seed)."""
    if min(config.eye_dim, config.face_dim, config.face_grid_size) <= 0:
        raise CohortError("Feature dimensions must be positive")
    if config.n_participants <= 0 or not config.recordings_per_participant:
        raise CohortError(
            "Cohort needs participants and a recording-count distribution"
        )

    rng = make_rng(seed)
    strength = config.identity_signal_strength
    noise = config.noise_scale

    # cohort-wide gaze rendering into each branch
    gaze_left = rng.normal(size=(config.eye_dim, 2))
    gaze_right = gaze_left + 0.1 * rng.normal(size=(config.eye_dim, 2))
    gaze_face = 0.3 * rng.normal(size=(config.face_dim, 2))

    counts = np.array(sorted(config.recordings_per_participant))
    weights = np.array([config.recordings_per_participant[c] for c in counts])
    low, high = config.frames_per_recording

    recordings: list[Recording] = []
    for p in range(config.n_participants):
        participant_id = f"P{p:04d}"
        id_left = rng.normal(size=config.eye_dim)
        id_right = id_left + 0.3 * rng.normal(size=config.eye_dim)
        id_face = rng.normal(size=config.face_dim)
        id_offset = rng.normal(size=2)

        n_recordings = int(rng.choice(counts, p=weights / weights.sum()))
        for r in range(n_recordings):
            recording_id = f"{participant_id}-R{r + 1}"
            frames = []
            for index in range(int(rng.integers(low, high + 1))):
                direction = rng.uniform(-1.0, 1.0, size=2)
                jitter = config.label_noise * rng.normal(size=2)
                label = _gaze_ground_truth(direction) + jitter
                center = (
                    0.5
                    + 0.15 * strength * id_offset
                    + 0.1 * noise * rng.normal(size=2)
                )
                frames.append(
                    Frame(
                        left_eye=gaze_left @ direction
                        + strength * id_left
                        + noise * rng.normal(size=config.eye_dim),
                        right_eye=gaze_right @ direction
                        + strength * id_right
                        + noise * rng.normal(size=config.eye_dim),
                        face=gaze_face @ direction
                        + strength * id_face
                        + noise * rng.normal(size=config.face_dim),
                        face_grid=_face_grid(center, config.face_grid_size),
                        gaze_label=label,
                        participant_id=participant_id,
                        recording_id=recording_id,
                        frame_index=index,
                    )
                )
            recordings.append(
                Recording(
                    recording_id=recording_id,
                    participant_id=participant_id,
                    frames=tuple(frames),
                )
            )

    n_frames = sum(len(r.frames) for r in recordings)
    logger.info(
        f"Generated cohort: {config.n_participants} participants, "
        f"{len(recordings)} recordings, {n_frames} frames (seed {seed})"
    )
    return recordings


def _by_participant(recordings: Sequence[Recording]) -> dict[str, list[Recording]]:
    groups: dict[str, list[Recording]] = {}
    for recording in recordings:
        groups.setdefault(recording.participant_id, []).append(recording)
    return groups


def assign_target_train(
    recordings: Sequence[Recording],
    fraction: float,
    seed: int,
    forced_pairs: int | None = None,
    exact_count: bool = True,
) -> list[Recording]:
    """Return the recordings with `in_target_train` marked.

    The first `forced_pairs` multi-recording participants (in seeded random
    order, all of them when None) get exactly one recording in and one out;
    the remaining recordings are marked with probability `fraction`, or in
    exact-count mode exactly round(fraction * n) of them.
    """
    if len(recordings) < 2:
        raise CohortError("Need at least 2 recordings to mark a target training set")
    if not 0.0 < fraction < 1.0:
        raise CohortError(f"Fraction must lie in (0, 1), got {fraction}")

    rng = make_rng(seed)
    groups = _by_participant(recordings)
    multi = [pid for pid, recs in groups.items() if len(recs) >= 2]
    n_forced = len(multi) if forced_pairs is None else min(forced_pairs, len(multi))
    forced = {multi[i] for i in rng.permutation(len(multi))[:n_forced]}

    marks: dict[str, bool] = {}
    pool: list[Recording] = []
    for pid, recs in groups.items():
        if pid in forced:
            i_in, i_out = rng.choice(len(recs), size=2, replace=False)
            marks[recs[i_in].recording_id] = True
            marks[recs[i_out].recording_id] = False
            pool.extend(r for k, r in enumerate(recs) if k not in (i_in, i_out))
        else:
            pool.extend(recs)

    if exact_count:
        n_marked = int(np.floor(fraction * len(pool) + 0.5))
        chosen = set(rng.choice(len(pool), size=n_marked, replace=False).tolist())
        for k, recording in enumerate(pool):
            marks[recording.recording_id] = k in chosen
    else:
        for recording, draw in zip(pool, rng.random(len(pool)), strict=True):
            marks[recording.recording_id] = bool(draw < fraction)

    marked = [replace(r, in_target_train=marks[r.recording_id]) for r in recordings]
    logger.info(
        f"Marked {sum(r.in_target_train for r in marked)}/{len(marked)} recordings "
        f"for target training ({n_forced} forced pairs)"
    )
    return marked


def label_instance(recording: Recording) -> int:
    return int(recording.in_target_train)


def label_person(recording: Recording, siblings: Sequence[Recording]) -> int:
    """1 if any recording of the person (itself included) was trained on."""
    return int(
        recording.in_target_train
        or any(
            s.in_target_train
            for s in siblings
            if s.participant_id == recording.participant_id
        )
    )


def _allocate_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items to the given ratios."""
    raw = np.asarray(ratios) * n
    counts = np.floor(raw).astype(int)
    remainders = raw - counts
    for k in np.argsort(-remainders, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split_for_attack(
    recordings: Sequence[Recording],
    ratios: Sequence[float],
    seed: int,
) -> CohortSplit:
    """Assign every recording to attack_train / attack_valid / attack_test.

    In-training recordings of multi-recording participants always go to
    attack_train. Single-recording participants and the remaining
    recordings of multi-recording participants are split by `ratios`, each
    pool separately so both populations reach every set.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise CohortError(
            f"Ratios must be three non-negative values summing to 1: {ratios}"
        )

    rng = make_rng(seed)
    groups = _by_participant(recordings)
    sets = list(AttackSet)

    assignment: dict[str, AttackSet] = {}
    singles: list[Recording] = []
    multi_rest: list[Recording] = []
    for recs in groups.values():
        if len(recs) == 1:
            singles.extend(recs)
            continue
        for recording in recs:
            if recording.in_target_train:
                assignment[recording.recording_id] = AttackSet.TRAIN
            else:
                multi_rest.append(recording)

    for pool in (singles, multi_rest):
        counts = _allocate_counts(len(pool), ratios)
        order = rng.permutation(len(pool))
        targets = [s for s, c in zip(sets, counts, strict=True) for _ in range(c)]
        for k, attack_set in zip(order, targets, strict=True):
            assignment[pool[k].recording_id] = attack_set

    for attack_set in sets:
        if attack_set not in assignment.values():
            raise CohortError(
                f"Too few recordings ({len(recordings)}) to populate {attack_set}"
            )

    # keep cohort order
    ordered = {r.recording_id: assignment[r.recording_id] for r in recordings}
    y_instance = {r.recording_id: label_instance(r) for r in recordings}
    y_person = {
        r.recording_id: label_person(r, groups[r.participant_id]) for r in recordings
    }
    return CohortSplit(assignment=ordered, y_instance=y_instance, y_person=y_person)


def data_distribution(
    recordings: Sequence[Recording], split: CohortSplit
) -> dict[AttackSet, SplitCounts]:
    """Per-set recording and frame counts, total and per label."""
    n_frames = {r.recording_id: len(r.frames) for r in recordings}
    table = {}
    for attack_set in AttackSet:
        ids = split.recording_ids(attack_set)
        table[attack_set] = SplitCounts(
            recordings=len(ids),
            recordings_instance=sum(split.y_instance[i] for i in ids),
            recordings_person=sum(split.y_person[i] for i in ids),
            frames=sum(n_frames[i] for i in ids),
            frames_instance=sum(n_frames[i] * split.y_instance[i] for i in ids),
            frames_person=sum(n_frames[i] * split.y_person[i] for i in ids),
        )
    return table


# ---------------------------------------------------------------------------
# Serialization


def _feature_columns(frame: Frame) -> list[str]:
    return [
        f"{branch}_{k}"
        for branch in BRANCHES
        for k in range(getattr(frame, branch).size)
    ]


def write_cohort(
    recordings: Sequence[Recording],
    split: CohortSplit,
    directory: Path | str,
    seed: int,
) -> None:
    """Write frames.csv and the cohort.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    first = recordings[0].frames[0]
    header = [
        "participant_id",
        "recording_id",
        "frame_index",
        "gaze_x",
        "gaze_y",
        *_feature_columns(first),
    ]
    with open(directory / FRAMES_FILE, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for recording in recordings:
            for frame in recording.frames:
                values = np.concatenate(
                    [frame.gaze_label, *(getattr(frame, b) for b in BRANCHES)]
                )
                writer.writerow(
                    [
                        frame.participant_id,
                        frame.recording_id,
                        frame.frame_index,
                        *(f"{v:.17g}" for v in values),
                    ]
                )

    sidecar = CohortSidecar(
        seed=seed,
        recordings=[
            RecordingEntry(
                recording_id=r.recording_id,
                participant_id=r.participant_id,
                n_frames=len(r.frames),
                in_target_train=r.in_target_train,
                attack_set=split.assignment[r.recording_id],
                y_instance=split.y_instance[r.recording_id],
                y_person=split.y_person[r.recording_id],
            )
            for r in recordings
        ],
        distribution=data_distribution(recordings, split),
    )
    (directory / SIDECAR_FILE).write_text(sidecar.model_dump_json(indent=2) + "\n")
    logger.info(f"Wrote cohort to {directory}")


def read_cohort(directory: Path | str) -> tuple[list[Recording], CohortSplit]:
    """Load a cohort written by `write_cohort`."""
    directory = Path(directory)
    sidecar = CohortSidecar.model_validate_json((directory / SIDECAR_FILE).read_text())

    with open(directory / FRAMES_FILE, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        widths = {
            branch: sum(1 for column in header if column.rsplit("_", 1)[0] == branch)
            for branch in BRANCHES
        }
        frames: dict[str, list[Frame]] = {}
        for row in reader:
            values = np.array([float(v) for v in row[3:]], dtype=np.float64)
            parts = {}
            offset = 2
            for branch in BRANCHES:
                parts[branch] = values[offset : offset + widths[branch]]
                offset += widths[branch]
            frames.setdefault(row[1], []).append(
                Frame(
                    gaze_label=values[:2],
                    participant_id=row[0],
                    recording_id=row[1],
                    frame_index=int(row[2]),
                    **parts,
                )
            )

    recordings = [
        Recording(
            recording_id=entry.recording_id,
            participant_id=entry.participant_id,
            frames=tuple(frames[entry.recording_id]),
            in_target_train=entry.in_target_train,
        )
        for entry in sidecar.recordings
    ]
    split = CohortSplit(
        assignment={e.recording_id: e.attack_set for e in sidecar.recordings},
        y_instance={e.recording_id: e.y_instance for e in sidecar.recordings},
        y_person={e.recording_id: e.y_person for e in sidecar.recordings},
    )
    return recordings, split
