"""Dense network substrate with exact backpropagation.

Networks are immutable values: `sgd_step` returns a new network and never
touches its argument. All arithmetic is float64. Inputs may be a single
vector of shape (in,) or a batch of shape (n, in); batched losses are the
(weighted) mean of the per-example losses.
"""

from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
from scipy.special import expit

CHECKPOINT_HEADER = "MIAAUDIT-CKPT v1"


class DimensionError(ValueError):
    """Raised when an input, target or gradient does not match the network shape."""


class NumericalError(Exception):
    """Raised when a non-finite value appears during a computation."""


class CheckpointError(Exception):
    """Raised when checkpoint text cannot be parsed."""


class Activation(StrEnum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class LossKind(StrEnum):
    MSE = "mse"
    BCE = "bce"


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PRNG used for every random draw in the package (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    """Weight matrix of shape (out, in)"""

    bias: np.ndarray
    """Bias vector of shape (out,)"""

    activation: Activation

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])


@dataclass(frozen=True, eq=False)
class DenseNet:
    layers: tuple[Layer, ...]
    seed: int | None = None
    """Seed used at initialization, None for networks loaded from a checkpoint"""

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("Network needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise DimensionError(f"Layer {k}: bias does not match weight shape")
            if k and layer.in_dim != self.layers[k - 1].out_dim:
                raise DimensionError(
                    f"Layer {k}: input dimension {layer.in_dim} does not chain "
                    f"to previous output {self.layers[k - 1].out_dim}"
                )
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                raise NumericalError(f"Layer {k}: non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def spec(self) -> str:
        """Layer spec as written on the second checkpoint line."""
        return ",".join(
            f"{layer.in_dim}:{layer.out_dim}:{layer.activation}"
            for layer in self.layers
        )

    def identical_to(self, other: "DenseNet") -> bool:
        """Bitwise parameter equality (seed ignored)."""
        return self.spec() == other.spec() and all(
            np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers, strict=True)
        )


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    inputs: np.ndarray
    pre: tuple[np.ndarray, ...]
    """Per-layer pre-activation values"""

    outputs: tuple[np.ndarray, ...]
    """Per-layer post-activation values, network output last"""

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass(frozen=True, eq=False)
class LayerGradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    loss: float
    input_grad: np.ndarray
    """Gradient of the loss with respect to the network input"""


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    match activation:
        case Activation.RELU:
            return np.maximum(z, 0.0)
        case Activation.SIGMOID:
            return expit(z)
        case Activation.IDENTITY:
            return z


def _derivative(a: np.ndarray, activation: Activation) -> np.ndarray:
    """Activation derivative expressed through the post-activation value."""
    match activation:
        case Activation.RELU:
            return (a > 0.0).astype(np.float64)
        case Activation.SIGMOID:
            return a * (1.0 - a)
        case Activation.IDENTITY:
            return np.ones_like(a)


def init(
    dims: Sequence[int],
    activations: Sequence[Activation | str],
    seed: int,
    zero_last: bool = False,
) -> DenseNet:
    """Glorot-uniform weights, zero biases.

    `dims` lists the input dimension followed by every layer's output
    dimension. With `zero_last` the final weight matrix starts at zero, so a
    sigmoid head initially emits exactly 0.5.
    """
    if len(dims) < 2:
        raise DimensionError("Architecture needs an input and at least one layer")
    if len(activations) != len(dims) - 1:
        raise DimensionError(
            f"{len(dims) - 1} layers but {len(activations)} activations given"
        )
    if any(d <= 0 for d in dims):
        raise DimensionError(f"Zero-size layer in architecture {list(dims)}")

    rng = make_rng(seed)
    layers = []
    for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:], strict=True)):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weight = rng.uniform(-limit, limit, size=(n_out, n_in))
        if zero_last and k == len(dims) - 2:
            weight = np.zeros((n_out, n_in))
        layers.append(
            Layer(
                weight=weight,
                bias=np.zeros(n_out),
                activation=Activation(activations[k]),
            )
        )
    return DenseNet(layers=tuple(layers), seed=seed)


def forward(net: DenseNet, inputs: np.ndarray | Sequence[float]) -> ActivationTrace:
    """Run the network and keep every layer's pre- and post-activation."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.in_dim:
        raise DimensionError(
            f"Input of shape {x.shape} rejected, network expects dimension {net.in_dim}"
        )
    pre: list[np.ndarray] = []
    post: list[np.ndarray] = []
    a = x
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
    return ActivationTrace(inputs=x, pre=tuple(pre), outputs=tuple(post))


def _check_trace(trace: ActivationTrace) -> None:
    for k, a in enumerate(trace.outputs):
        if not np.isfinite(a).all():
            raise NumericalError(f"Non-finite activation in layer {k}")


def example_losses(
    trace: ActivationTrace, target: np.ndarray, loss_kind: LossKind
) -> np.ndarray:
    """Per-example loss, averaged over output coordinates."""
    if loss_kind is LossKind.MSE:
        return np.mean((trace.output - target) ** 2, axis=-1)
    z = trace.pre[-1]
    return np.mean(np.logaddexp(0.0, z) - target * z, axis=-1)


def backpropagate(
    net: DenseNet,
    trace: ActivationTrace,
    output_grad: np.ndarray,
    loss: float = 0.0,
) -> LayerGradients:
    """Chain an upstream gradient dL/d(output) back through every layer."""
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != trace.output.shape:
        raise DimensionError(
            f"Output gradient of shape {output_grad.shape} does not match "
            f"output shape {trace.output.shape}"
        )
    delta = output_grad * _derivative(trace.output, net.layers[-1].activation)
    return _backpropagate_delta(net, trace, delta, loss)


def _backpropagate_delta(
    net: DenseNet, trace: ActivationTrace, delta: np.ndarray, loss: float
) -> LayerGradients:
    single = trace.inputs.ndim == 1
    delta = np.atleast_2d(delta)
    weight_grads: list[np.ndarray] = []
    bias_grads: list[np.ndarray] = []
    upstream = delta
    for k in reversed(range(net.depth)):
        a_prev = np.atleast_2d(trace.outputs[k - 1] if k else trace.inputs)
        g_w = delta.T @ a_prev
        g_b = delta.sum(axis=0)
        if not (np.isfinite(g_w).all() and np.isfinite(g_b).all()):
            raise NumericalError(f"Non-finite gradient in layer {k}")
        weight_grads.append(g_w)
        bias_grads.append(g_b)
        upstream = delta @ net.layers[k].weight
        if k:
            delta = upstream * _derivative(
                np.atleast_2d(trace.outputs[k - 1]), net.layers[k - 1].activation
            )
    return LayerGradients(
        weights=tuple(reversed(weight_grads)),
        biases=tuple(reversed(bias_grads)),
        loss=loss,
        input_grad=upstream[0] if single else upstream,
    )


def backward(
    net: DenseNet,
    inputs: np.ndarray | Sequence[float],
    target: np.ndarray | Sequence[float],
    loss_kind: LossKind | str,
    sample_weight: np.ndarray | None = None,
) -> LayerGradients:
    """Exact gradients of the scalar loss with respect to every parameter.

    For a batch the loss is the mean of the per-example losses, weighted by
    `sample_weight` when given (weights are normalized to sum to one).
    """
    loss_kind = LossKind(loss_kind)
    trace = forward(net, inputs)
    _check_trace(trace)

    target = np.asarray(target, dtype=np.float64)
    if target.shape != trace.output.shape:
        raise DimensionError(
            f"Target of shape {target.shape} does not match output {trace.output.shape}"
        )
    if loss_kind is LossKind.BCE:
        if net.layers[-1].activation is not Activation.SIGMOID:
            raise ValueError("BCE loss requires a sigmoid output layer")
        if not np.isin(target, (0.0, 1.0)).all():
            raise ValueError("BCE targets must be 0 or 1")

    output = np.atleast_2d(trace.output)
    target_2d = np.atleast_2d(target)
    n, m = output.shape
    if sample_weight is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(sample_weight, dtype=np.float64)
        if weights.shape != (n,):
            raise DimensionError(f"Expected {n} sample weights, got {weights.shape}")
        weights = weights / weights.sum()

    loss = float(weights @ np.atleast_1d(example_losses(trace, target, loss_kind)))
    if not np.isfinite(loss):
        raise NumericalError(f"Non-finite loss in layer {net.depth - 1}")

    if loss_kind is LossKind.BCE:
        # sigmoid and cross-entropy fold into a single difference
        delta = weights[:, None] * (output - target_2d) / m
    else:
        delta = (
            weights[:, None]
            * 2.0
            * (output - target_2d)
            / m
            * _derivative(output, net.layers[-1].activation)
        )
    return _backpropagate_delta(net, trace, delta, loss)


def sgd_step(net: DenseNet, grads: LayerGradients, learning_rate: float) -> DenseNet:
    """Return a new network with w <- w - lr * g for every parameter."""
    if learning_rate <= 0:
        raise ValueError(f"Learning rate must be positive, got {learning_rate}")
    if len(grads.weights) != net.depth or len(grads.biases) != net.depth:
        raise DimensionError(
            f"Gradients cover {len(grads.weights)} layers, network has {net.depth}"
        )
    layers = []
    for k, (layer, g_w, g_b) in enumerate(
        zip(net.layers, grads.weights, grads.biases, strict=True)
    ):
        if g_w.shape != layer.weight.shape or g_b.shape != layer.bias.shape:
            raise DimensionError(f"Layer {k}: gradient shape mismatch")
        layers.append(
            Layer(
                weight=layer.weight - learning_rate * g_w,
                bias=layer.bias - learning_rate * g_b,
                activation=layer.activation,
            )
        )
    return DenseNet(layers=tuple(layers), seed=net.seed)


def iterate_minibatches(
    n: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Shuffled index batches covering range(n) once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Checkpoints


def _format_row(values: np.ndarray) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def dumps(net: DenseNet) -> str:
    """Serialize to MIAAUDIT-CKPT v1 text (17 significant digits, exact round-trip)."""
    lines = [CHECKPOINT_HEADER, net.spec()]
    for layer in net.layers:
        lines.extend(_format_row(row) for row in layer.weight)
        lines.append(_format_row(layer.bias))
    return "\n".join(lines) + "\n"


def _parse_row(line: str, expected: int, where: str) -> np.ndarray:
    try:
        row = np.array([float(token) for token in line.split()], dtype=np.float64)
    except ValueError as e:
        raise CheckpointError(f"{where}: {e}") from e
    if row.shape != (expected,):
        raise CheckpointError(f"{where}: expected {expected} values, got {row.size}")
    return row


def loads(text: str) -> DenseNet:
    """Parse MIAAUDIT-CKPT v1 text."""
    lines = text.splitlines()
    if len(lines) < 2 or lines[0].strip() != CHECKPOINT_HEADER:
        raise CheckpointError(f"Missing '{CHECKPOINT_HEADER}' header")

    specs = []
    try:
        for item in lines[1].split(","):
            n_in, n_out, activation = item.split(":")
            specs.append((int(n_in), int(n_out), Activation(activation)))
    except ValueError as e:
        raise CheckpointError(f"Malformed layer spec '{lines[1]}': {e}") from e

    body = iter(enumerate(lines[2:], start=3))
    layers = []
    try:
        for n_in, n_out, activation in specs:
            rows = []
            for _ in range(n_out):
                lineno, line = next(body)
                rows.append(_parse_row(line, n_in, f"line {lineno}"))
            lineno, line = next(body)
            bias = _parse_row(line, n_out, f"line {lineno}")
            layers.append(
                Layer(weight=np.vstack(rows), bias=bias, activation=activation)
            )
    except StopIteration as e:
        raise CheckpointError("Checkpoint truncated") from e
    if any(line.strip() for _, line in body):
        raise CheckpointError("Trailing data after last layer")
    try:
        return DenseNet(layers=tuple(layers))
    except (DimensionError, NumericalError) as e:
        raise CheckpointError(str(e)) from e


def split_sections(text: str) -> tuple[list[str], list[str]]:
    """Split a multi-network file into manifest lines and CKPT section texts."""
    manifest: list[str] = []
    sections: list[list[str]] = []
    for line in text.splitlines():
        if line.strip() == CHECKPOINT_HEADER:
            sections.append([line])
        elif sections:
            sections[-1].append(line)
        else:
            manifest.append(line)
    return manifest, ["\n".join(section) + "\n" for section in sections]


def save_checkpoint(net: DenseNet, path: Path | str) -> None:
    Path(path).write_text(dumps(net))


def load_checkpoint(path: Path | str) -> DenseNet:
    return loads(Path(path).read_text())
