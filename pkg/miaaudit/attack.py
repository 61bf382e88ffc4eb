"""Frame-level membership classifier.

Each parameter type collected by the probe gets its own one-hidden-layer
encoder into a fixed-size code; the codes are concatenated in config order
and fed to a three-hidden-layer classifier with a sigmoid head. Encoders
and classifier are trained jointly with binary cross-entropy.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import StrEnum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt

from . import nnet
from .evalstat import mean_bce
from .models import EpochRecord
from .nnet import Activation, DenseNet, LossKind, NumericalError
from .target import WhiteBoxTrace

logger = logging.getLogger(__name__)

ATTACK_HEADER = "MIAAUDIT-ATTACK v1"
CLASSIFIER_SECTION = "classifier"

# keeps probabilities strictly inside (0, 1)
_PROBABILITY_EPS = 1e-12


class AttackError(Exception):
    """Raised when attack features or training data are unusable."""


class AttackDivergedError(NumericalError):
    """Raised when attack training produces non-finite values."""

    def __init__(self, epoch: int, detail: str):
        super().__init__(f"Attack training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


class ParameterType(StrEnum):
    FINAL_OUTPUT = "final_output"
    PENULTIMATE_OUTPUT = "penultimate_output"
    GRAD_L = "grad_L"
    GRAD_L1 = "grad_L-1"
    GRAD_L2 = "grad_L-2"
    GRAD_EYES = "grad_eyes"
    GRAD_FACE = "grad_face"
    GRAD_FACE_GRID = "grad_face_grid"
    LOSS = "loss"
    LABEL = "label"


class FeatureConfig(StrEnum):
    TWO_OUTPUTS = "TWO_OUTPUTS"
    PLUS_2GRAD = "PLUS_2GRAD"
    PLUS_5GRAD = "PLUS_5GRAD"
    PLUS_2GRAD_LOSS_LABEL = "PLUS_2GRAD_LOSS_LABEL"
    PLUS_3GRAD_LOSS_LABEL = "PLUS_3GRAD_LOSS_LABEL"

    @property
    def parameter_types(self) -> tuple[ParameterType, ...]:
        return _CONFIG_GROUPS[self]


_OUTPUTS = (ParameterType.FINAL_OUTPUT, ParameterType.PENULTIMATE_OUTPUT)
# the "+2 grad" configs take the two gradients before the last one
_TWO_GRADS = (ParameterType.GRAD_L1, ParameterType.GRAD_L2)
_CONFIG_GROUPS = {
    FeatureConfig.TWO_OUTPUTS: _OUTPUTS,
    FeatureConfig.PLUS_2GRAD: (*_OUTPUTS, *_TWO_GRADS),
    FeatureConfig.PLUS_5GRAD: (
        *_OUTPUTS,
        *_TWO_GRADS,
        ParameterType.GRAD_EYES,
        ParameterType.GRAD_FACE,
        ParameterType.GRAD_FACE_GRID,
    ),
    FeatureConfig.PLUS_2GRAD_LOSS_LABEL: (
        *_OUTPUTS,
        *_TWO_GRADS,
        ParameterType.LOSS,
        ParameterType.LABEL,
    ),
    FeatureConfig.PLUS_3GRAD_LOSS_LABEL: (
        *_OUTPUTS,
        ParameterType.GRAD_L,
        *_TWO_GRADS,
        ParameterType.LOSS,
        ParameterType.LABEL,
    ),
}


class AttackHyperparams(BaseModel):
    """Frame classifier sizes and training settings."""

    encoder_hidden: PositiveInt = 128
    code_dim: PositiveInt = 64
    """
    Encoder output dimension, identical for every parameter type
    """

    classifier_hidden: list[PositiveInt] = Field(
        default_factory=lambda: [256, 128, 64], min_length=3, max_length=3
    )
    epochs: int = Field(default=30, ge=0)
    learning_rate: PositiveFloat = 0.05
    batch_size: PositiveInt = 64
    balance_classes: bool = True
    """
    Weight BCE examples by inverse class frequency
    """

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


Features = list[tuple[ParameterType, np.ndarray]]
FeatureMatrix = dict[ParameterType, np.ndarray]


@dataclass(frozen=True, eq=False)
class AttackModel:
    feature_config: FeatureConfig
    encoders: dict[ParameterType, DenseNet]
    classifier: DenseNet
    scales: dict[ParameterType, np.ndarray]
    """Per-coordinate training-set standard deviation each group is divided by"""

    seed: int

    def __post_init__(self) -> None:
        groups = self.feature_config.parameter_types
        if tuple(self.encoders) != groups or tuple(self.scales) != groups:
            raise AttackError(f"Encoders do not match {self.feature_config} groups")
        code_total = sum(encoder.out_dim for encoder in self.encoders.values())
        if self.classifier.in_dim != code_total:
            raise AttackError(
                f"Classifier input {self.classifier.in_dim} does not match "
                f"concatenated codes {code_total}"
            )


@dataclass(frozen=True, eq=False)
class AttackGradients:
    encoders: dict[ParameterType, nnet.LayerGradients]
    classifier: nnet.LayerGradients

    @property
    def loss(self) -> float:
        return self.classifier.loss


@dataclass(frozen=True)
class AttackHistory:
    records: tuple[EpochRecord, ...]
    best_epoch: int

    @property
    def best_valid_bce(self) -> float:
        return self.records[self.best_epoch].valid_bce


def _extract(trace: WhiteBoxTrace, parameter_type: ParameterType) -> np.ndarray:
    match parameter_type:
        case ParameterType.FINAL_OUTPUT:
            return trace.final_output
        case ParameterType.PENULTIMATE_OUTPUT:
            return trace.penultimate_output
        case ParameterType.GRAD_L | ParameterType.GRAD_L1 | ParameterType.GRAD_L2:
            grads = trace.grads_last3
            index = (ParameterType.GRAD_L, ParameterType.GRAD_L1, ParameterType.GRAD_L2)
            return grads[index.index(parameter_type)]
        case (
            ParameterType.GRAD_EYES
            | ParameterType.GRAD_FACE
            | ParameterType.GRAD_FACE_GRID
        ):
            grads = trace.grads_branch_last
            index = (
                ParameterType.GRAD_EYES,
                ParameterType.GRAD_FACE,
                ParameterType.GRAD_FACE_GRID,
            )
            return grads[index.index(parameter_type)]
        case ParameterType.LOSS:
            return np.array([trace.loss])
        case ParameterType.LABEL:
            return trace.label


def assemble_features(trace: WhiteBoxTrace, config: FeatureConfig) -> Features:
    """Ordered (parameter type, vector) groups for one frame."""
    features = []
    for parameter_type in config.parameter_types:
        vector = _extract(trace, parameter_type)
        features.append((parameter_type, np.asarray(vector, dtype=np.float64)))
    return features


def stack_features(
    traces: Sequence[WhiteBoxTrace], config: FeatureConfig
) -> FeatureMatrix:
    """One (n_frames, dim) matrix per parameter type."""
    rows = [assemble_features(trace, config) for trace in traces]
    return {
        parameter_type: np.array([row[k][1] for row in rows])
        for k, parameter_type in enumerate(config.parameter_types)
    }


def _coordinate_scale(matrix: np.ndarray) -> np.ndarray:
    scale = matrix.std(axis=0)
    return np.where(scale > 1e-12, scale, 1.0)


def build_attack(
    config: FeatureConfig,
    input_dims: dict[ParameterType, int],
    hyperparams: AttackHyperparams,
    seed: int,
    scales: dict[ParameterType, np.ndarray] | None = None,
) -> AttackModel:
    """Fresh encoders and classifier; the sigmoid head starts at exactly 0.5."""
    groups = config.parameter_types
    seeds = np.random.SeedSequence(seed).generate_state(len(groups) + 1)
    encoders = {
        parameter_type: nnet.init(
            [
                input_dims[parameter_type],
                hyperparams.encoder_hidden,
                hyperparams.code_dim,
            ],
            [Activation.RELU, Activation.RELU],
            int(encoder_seed),
        )
        for parameter_type, encoder_seed in zip(groups, seeds[:-1], strict=True)
    }
    hidden = hyperparams.classifier_hidden
    classifier = nnet.init(
        [hyperparams.code_dim * len(groups), *hidden, 1],
        [Activation.RELU] * len(hidden) + [Activation.SIGMOID],
        int(seeds[-1]),
        zero_last=True,
    )
    if scales is None:
        scales = {p: np.ones(input_dims[p]) for p in groups}
    return AttackModel(
        feature_config=config,
        encoders=encoders,
        classifier=classifier,
        scales=scales,
        seed=seed,
    )


def _encode(
    model: AttackModel, features: FeatureMatrix
) -> tuple[dict[ParameterType, nnet.ActivationTrace], np.ndarray]:
    traces = {
        parameter_type: nnet.forward(
            encoder, features[parameter_type] / model.scales[parameter_type]
        )
        for parameter_type, encoder in model.encoders.items()
    }
    codes = np.concatenate([trace.output for trace in traces.values()], axis=-1)
    return traces, codes


def predict_batch(model: AttackModel, features: FeatureMatrix) -> np.ndarray:
    _, codes = _encode(model, features)
    probabilities = nnet.forward(model.classifier, codes).output[..., 0]
    return np.clip(probabilities, _PROBABILITY_EPS, 1.0 - _PROBABILITY_EPS)


def attack_forward(model: AttackModel, features: Features) -> float:
    """Membership probability of one frame."""
    groups = model.feature_config.parameter_types
    if tuple(parameter_type for parameter_type, _ in features) != groups:
        raise AttackError(
            f"Expected {len(groups)} groups {groups} for {model.feature_config}, "
            f"got {len(features)}"
        )
    return float(predict_batch(model, dict(features)))


def attack_gradients(
    model: AttackModel,
    features: FeatureMatrix,
    labels: np.ndarray,
    sample_weight: np.ndarray | None = None,
) -> AttackGradients:
    """End-to-end BCE gradients, classifier input gradient split across encoders."""
    traces, codes = _encode(model, features)
    classifier = nnet.backward(
        model.classifier,
        codes,
        np.asarray(labels, dtype=np.float64)[..., None],
        LossKind.BCE,
        sample_weight,
    )
    encoders = {}
    offset = 0
    for parameter_type, encoder in model.encoders.items():
        upstream = classifier.input_grad[..., offset : offset + encoder.out_dim]
        encoders[parameter_type] = nnet.backpropagate(
            encoder, traces[parameter_type], upstream, classifier.loss
        )
        offset += encoder.out_dim
    return AttackGradients(encoders=encoders, classifier=classifier)


def _sgd(
    model: AttackModel, grads: AttackGradients, learning_rate: float
) -> AttackModel:
    return replace(
        model,
        encoders={
            p: nnet.sgd_step(encoder, grads.encoders[p], learning_rate)
            for p, encoder in model.encoders.items()
        },
        classifier=nnet.sgd_step(model.classifier, grads.classifier, learning_rate),
    )


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency example weights, mean weight 1."""
    labels = np.asarray(labels)
    n_positive = int(labels.sum())
    n_negative = labels.size - n_positive
    return np.where(
        labels == 1, labels.size / (2 * n_positive), labels.size / (2 * n_negative)
    )


def train_attack(
    train_traces: Sequence[WhiteBoxTrace],
    train_labels: Sequence[int],
    valid_traces: Sequence[WhiteBoxTrace],
    valid_labels: Sequence[int],
    config: FeatureConfig,
    hyperparams: AttackHyperparams,
    seed: int,
) -> tuple[AttackModel, AttackHistory]:
    """Train jointly by BCE, return the epoch with the lowest validation BCE.

    Epoch 0 of the history is the untrained model.
    """
    y_train = np.asarray(train_labels, dtype=np.float64)
    y_valid = np.asarray(valid_labels, dtype=np.float64)
    if len(np.unique(y_train)) < 2:
        raise AttackError("Attack training frames contain a single class")
    if y_valid.size == 0:
        raise AttackError("Attack validation set is empty")
    if y_train.size != len(train_traces) or y_valid.size != len(valid_traces):
        raise AttackError("Labels and traces differ in length")

    x_train = stack_features(train_traces, config)
    x_valid = stack_features(valid_traces, config)
    model = build_attack(
        config,
        {p: m.shape[1] for p, m in x_train.items()},
        hyperparams,
        seed,
        scales={p: _coordinate_scale(m) for p, m in x_train.items()},
    )
    weights = class_weights(y_train) if hyperparams.balance_classes else None

    def record(epoch: int, current: AttackModel) -> EpochRecord:
        return EpochRecord(
            epoch=epoch,
            train_bce=mean_bce(predict_batch(current, x_train), y_train),
            valid_bce=mean_bce(predict_batch(current, x_valid), y_valid),
        )

    rng = nnet.make_rng(seed)
    records = [record(0, model)]
    best, best_epoch = model, 0
    for epoch in range(1, hyperparams.epochs + 1):
        try:
            batches = nnet.iterate_minibatches(
                y_train.size, hyperparams.batch_size, rng
            )
            for batch in batches:
                grads = attack_gradients(
                    model,
                    {p: m[batch] for p, m in x_train.items()},
                    y_train[batch],
                    None if weights is None else weights[batch],
                )
                model = _sgd(model, grads, hyperparams.learning_rate)
        except NumericalError as e:
            raise AttackDivergedError(epoch, str(e)) from e
        records.append(record(epoch, model))
        logger.debug(
            f"Attack epoch {epoch}: train BCE {records[-1].train_bce:.4f}, "
            f"valid BCE {records[-1].valid_bce:.4f}"
        )
        if records[-1].valid_bce < records[best_epoch].valid_bce:
            best, best_epoch = model, epoch

    history = AttackHistory(records=tuple(records), best_epoch=best_epoch)
    logger.info(
        f"Trained {config} attack: best epoch {best_epoch}, "
        f"valid BCE {history.best_valid_bce:.4f} (untrained {records[0].valid_bce:.4f})"
    )
    return best, history


def predict_frames(model: AttackModel, traces: Sequence[WhiteBoxTrace]) -> list[float]:
    """Membership probability of every frame of a recording, in frame order."""
    if not traces:
        return []
    return predict_batch(model, stack_features(traces, model.feature_config)).tolist()


# ---------------------------------------------------------------------------
# Checkpoints


def _format_vector(values: np.ndarray) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def dumps_attack(model: AttackModel) -> str:
    groups = model.feature_config.parameter_types
    lines = [
        f"{ATTACK_HEADER} config={model.feature_config} seed={model.seed}",
        "sections=" + ",".join([*groups, CLASSIFIER_SECTION]),
        *(f"scale {p} {_format_vector(model.scales[p])}" for p in groups),
    ]
    sections = [nnet.dumps(model.encoders[p]) for p in groups]
    sections.append(nnet.dumps(model.classifier))
    return "\n".join(lines) + "\n" + "".join(sections)


def loads_attack(text: str) -> AttackModel:
    manifest, sections = nnet.split_sections(text)
    try:
        header = dict(item.split("=", 1) for item in manifest[0].split()[2:])
        if not manifest[0].startswith(ATTACK_HEADER):
            raise ValueError(manifest[0])
        config = FeatureConfig(header["config"])
        scales = {}
        for line in manifest[2:]:
            tag, name, *values = line.split()
            if tag == "scale":
                scales[ParameterType(name)] = np.array([float(v) for v in values])
        seed = int(header["seed"])
    except (IndexError, KeyError, ValueError) as e:
        raise nnet.CheckpointError(f"Malformed '{ATTACK_HEADER}' manifest: {e}") from e

    groups = config.parameter_types
    if len(sections) != len(groups) + 1:
        raise nnet.CheckpointError(
            f"{config} needs {len(groups) + 1} sections, found {len(sections)}"
        )
    return AttackModel(
        feature_config=config,
        encoders={p: nnet.loads(s) for p, s in zip(groups, sections, strict=False)},
        classifier=nnet.loads(sections[-1]),
        scales=scales,
        seed=seed,
    )


def save_attack(model: AttackModel, path: Path | str) -> None:
    Path(path).write_text(dumps_attack(model))


def load_attack(path: Path | str) -> AttackModel:
    return loads_attack(Path(path).read_text())
