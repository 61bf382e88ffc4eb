"""Stand-in eye-tracking target model and its white-box probe.

Three dense branches (both eyes, face, face grid) feed a dense combiner
that regresses 2-D gaze. The model is trained with MSE by mini-batch SGD;
`probe` collects the outputs, gradients and loss the attack consumes.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeInt, PositiveFloat, PositiveInt

from . import nnet
from .cohort import Frame, Recording
from .nnet import Activation, DenseNet, LossKind, NumericalError

logger = logging.getLogger(__name__)

BRANCH_NETS = ("eyes", "face", "face_grid")
SECTIONS = (*BRANCH_NETS, "combiner")
TARGET_HEADER = "MIAAUDIT-TARGET v1"
MIN_COMBINER_DEPTH = 3


class TargetError(Exception):
    """Raised when a target model cannot be built or trained as requested."""


class TargetDivergedError(NumericalError):
    """Raised when target training produces non-finite values."""

    def __init__(self, epoch: int, detail: str):
        super().__init__(f"Target training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


class TargetArchitecture(BaseModel):
    """Layer widths per section, input dimension first."""

    eyes: list[PositiveInt] = [32, 16, 8]
    """
    Shared branch over the concatenated left and right eye features
    """

    face: list[PositiveInt] = [24, 16, 8]
    face_grid: list[PositiveInt] = [25, 16, 8]
    combiner: list[PositiveInt] = [24, 32, 16, 8, 2]

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


class TargetConfig(BaseModel):
    """Target architecture and the training dial."""

    architecture: TargetArchitecture = TargetArchitecture()
    epochs: NonNegativeInt = 200
    """
    Memorization dial: many epochs on a small cohort overfit
    """

    learning_rate: PositiveFloat = 0.05
    batch_size: PositiveInt = 32

    model_config = ConfigDict(extra="forbid", use_attribute_docstrings=True)


@dataclass(frozen=True)
class TrainingLog:
    epochs: int
    train_mse: tuple[float, ...]
    """Training-set MSE before training (index 0) and after every epoch"""

    heldout_mse: float | None = None

    @property
    def final_train_mse(self) -> float:
        return self.train_mse[-1]


@dataclass(frozen=True, eq=False)
class TargetModel:
    eyes: DenseNet
    face: DenseNet
    face_grid: DenseNet
    combiner: DenseNet
    training_log: TrainingLog | None = None

    def __post_init__(self) -> None:
        branch_out = sum(getattr(self, name).out_dim for name in BRANCH_NETS)
        if self.combiner.in_dim != branch_out:
            raise TargetError(
                f"Combiner input {self.combiner.in_dim} does not match "
                f"branch outputs {branch_out}"
            )
        if self.combiner.out_dim != 2:
            raise TargetError(
                f"Combiner must output 2-D gaze, not {self.combiner.out_dim}"
            )
        if self.combiner.depth < MIN_COMBINER_DEPTH:
            raise TargetError(
                f"Combiner depth {self.combiner.depth} < {MIN_COMBINER_DEPTH}"
            )

    def nets(self) -> dict[str, DenseNet]:
        return {name: getattr(self, name) for name in SECTIONS}

    def with_nets(self, nets: dict[str, DenseNet]) -> Self:
        return replace(self, **nets)


@dataclass(frozen=True, eq=False)
class WhiteBoxTrace:
    final_output: np.ndarray
    penultimate_output: np.ndarray
    grads_last3: tuple[np.ndarray, np.ndarray, np.ndarray]
    """Flattened weight gradients of the last three combiner layers, last first"""

    grads_branch_last: tuple[np.ndarray, np.ndarray, np.ndarray]
    """Flattened last-layer weight gradient of the eyes, face and face-grid branches"""

    loss: float
    label: np.ndarray


def build_target(architecture: TargetArchitecture, seed: int) -> TargetModel:
    """Initialize every section from seeds derived from `seed`."""
    seeds = np.random.SeedSequence(seed).generate_state(len(SECTIONS))
    nets = {}
    for name, section_seed in zip(SECTIONS, seeds, strict=True):
        dims = getattr(architecture, name)
        activations = [Activation.RELU] * (len(dims) - 1)
        if name == "combiner":
            activations[-1] = Activation.IDENTITY
        try:
            nets[name] = nnet.init(dims, activations, int(section_seed))
        except nnet.DimensionError as e:
            raise TargetError(f"Invalid {name} architecture: {e}") from e
    return TargetModel(**nets)


def frame_inputs(frames: Sequence[Frame]) -> dict[str, np.ndarray]:
    """Stack frames into per-section input matrices plus gaze labels."""
    return {
        "eyes": np.array([np.concatenate([f.left_eye, f.right_eye]) for f in frames]),
        "face": np.array([f.face for f in frames]),
        "face_grid": np.array([f.face_grid for f in frames]),
        "label": np.array([f.gaze_label for f in frames]),
    }


def _forward(
    model: TargetModel, inputs: dict[str, np.ndarray]
) -> tuple[dict[str, nnet.ActivationTrace], np.ndarray]:
    traces = {
        name: nnet.forward(getattr(model, name), inputs[name]) for name in BRANCH_NETS
    }
    joined = np.concatenate([traces[name].output for name in BRANCH_NETS], axis=-1)
    return traces, joined


def predict(model: TargetModel, frames: Sequence[Frame]) -> np.ndarray:
    """Gaze estimates, one row per frame."""
    _, joined = _forward(model, frame_inputs(frames))
    return nnet.forward(model.combiner, joined).output


def mse(model: TargetModel, frames: Sequence[Frame]) -> float:
    inputs = frame_inputs(frames)
    return float(np.mean((predict(model, frames) - inputs["label"]) ** 2))


def composite_gradients(
    model: TargetModel, inputs: dict[str, np.ndarray]
) -> dict[str, nnet.LayerGradients]:
    """MSE gradients for every section, combiner input gradient routed to branches."""
    traces, joined = _forward(model, inputs)
    combiner = nnet.backward(model.combiner, joined, inputs["label"], LossKind.MSE)
    grads = {"combiner": combiner}
    offset = 0
    for name in BRANCH_NETS:
        width = getattr(model, name).out_dim
        upstream = combiner.input_grad[..., offset : offset + width]
        grads[name] = nnet.backpropagate(
            getattr(model, name), traces[name], upstream, combiner.loss
        )
        offset += width
    return grads


def train_target(
    model: TargetModel,
    recordings: Sequence[Recording],
    epochs: int,
    learning_rate: float,
    seed: int,
    batch_size: int = 32,
    heldout: Sequence[Recording] = (),
) -> TargetModel:
    """Fit the model on the recordings marked `in_target_train`."""
    frames = [f for r in recordings if r.in_target_train for f in r.frames]
    if not frames:
        raise TargetError("No recordings marked for target training")

    data = frame_inputs(frames)
    rng = nnet.make_rng(seed)
    history = [mse(model, frames)]
    for epoch in range(1, epochs + 1):
        for batch in nnet.iterate_minibatches(len(frames), batch_size, rng):
            try:
                batch_inputs = {k: v[batch] for k, v in data.items()}
                grads = composite_gradients(model, batch_inputs)
                model = model.with_nets(
                    {
                        name: nnet.sgd_step(net, grads[name], learning_rate)
                        for name, net in model.nets().items()
                    }
                )
            except NumericalError as e:
                raise TargetDivergedError(epoch, str(e)) from e
        history.append(mse(model, frames))
        if not np.isfinite(history[-1]):
            raise TargetDivergedError(epoch, "non-finite training MSE")
        logger.debug(f"Target epoch {epoch}: train MSE {history[-1]:.6f}")

    heldout_frames = [f for r in heldout for f in r.frames]
    log = TrainingLog(
        epochs=epochs,
        train_mse=tuple(history),
        heldout_mse=mse(model, heldout_frames) if heldout_frames else None,
    )
    logger.info(
        f"Trained target for {epochs} epochs on {len(frames)} frames: "
        f"train MSE {log.final_train_mse:.5f}, held-out MSE {log.heldout_mse}"
    )
    return replace(model, training_log=log)


def probe(model: TargetModel, frame: Frame) -> WhiteBoxTrace:
    """Forward + backward on one frame against its gaze label; model untouched."""
    inputs = {k: v[0] for k, v in frame_inputs([frame]).items()}
    _, joined = _forward(model, inputs)
    combiner_trace = nnet.forward(model.combiner, joined)
    grads = composite_gradients(model, inputs)

    combiner_w = grads["combiner"].weights
    return WhiteBoxTrace(
        final_output=combiner_trace.output,
        penultimate_output=combiner_trace.outputs[-2],
        grads_last3=(
            combiner_w[-1].ravel(),
            combiner_w[-2].ravel(),
            combiner_w[-3].ravel(),
        ),
        grads_branch_last=(
            grads["eyes"].weights[-1].ravel(),
            grads["face"].weights[-1].ravel(),
            grads["face_grid"].weights[-1].ravel(),
        ),
        loss=grads["combiner"].loss,
        label=inputs["label"].copy(),
    )


def probe_recording(model: TargetModel, recording: Recording) -> list[WhiteBoxTrace]:
    return [probe(model, frame) for frame in recording.frames]


# ---------------------------------------------------------------------------
# Checkpoints


def dumps_target(model: TargetModel) -> str:
    manifest = f"{TARGET_HEADER} sections={','.join(SECTIONS)}\n"
    return manifest + "".join(nnet.dumps(getattr(model, name)) for name in SECTIONS)


def loads_target(text: str) -> TargetModel:
    manifest, sections = nnet.split_sections(text)
    if not manifest or not manifest[0].startswith(TARGET_HEADER):
        raise nnet.CheckpointError(f"Missing '{TARGET_HEADER}' manifest")
    roles = manifest[0].removeprefix(TARGET_HEADER).strip().removeprefix("sections=")
    names = roles.split(",")
    if tuple(names) != SECTIONS or len(sections) != len(SECTIONS):
        raise nnet.CheckpointError(f"Expected sections {SECTIONS}, got {names}")
    nets = {
        name: nnet.loads(section)
        for name, section in zip(names, sections, strict=True)
    }
    return TargetModel(**nets)


def save_target(model: TargetModel, path: Path | str) -> None:
    Path(path).write_text(dumps_target(model))


def load_target(path: Path | str) -> TargetModel:
    return loads_target(Path(path).read_text())
