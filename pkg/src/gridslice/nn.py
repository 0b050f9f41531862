"""Dense feed-forward networks with hand-written reverse-mode gradients.

The networks here are deliberately small: a chain of affine layers, each
followed by ``relu``, ``tanh`` or no activation. They back the Q-network,
actor and critic of the scheduler. Everything runs in float64.

Checkpoint format (little-endian, version 1)::

    magic        4 bytes   b"GSNN"
    version      uint32
    n_layers     uint32
    per layer    uint32 in_dim, uint32 out_dim, uint32 activation code
    per layer    float64[out_dim * in_dim] weights (row-major), float64[out_dim] bias

Activation codes: 0 = linear, 1 = relu, 2 = tanh.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh")
CHECKPOINT_MAGIC = b"GSNN"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or gradient dimensions do not match the network layout."""


class TapeError(RuntimeError):
    """Backward pass requested without a matching recorded forward pass."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step was attempted with NaN or infinite gradients."""


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not agree"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """A chain of dense layers.

    Inputs may be a single vector ``(in,)`` or a batch ``(batch, in)``;
    outputs keep the same leading shape.
    """

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ShapeError(
                    f"layer {k} outputs {layers[k].out_dim} values but layer {k + 1} "
                    f"expects {layers[k + 1].in_dim}"
                )
        self.layers = list(layers)
        # all parameters live in one contiguous buffer; layer arrays are views into it
        self.flat = np.concatenate([a.ravel() for l in self.layers for a in (l.weight, l.bias)])
        offset = 0
        for layer in self.layers:
            n = layer.weight.size
            layer.weight = self.flat[offset:offset + n].reshape(layer.weight.shape)
            offset += n
            layer.bias = self.flat[offset:offset + layer.bias.size]
            offset += layer.bias.size

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "linear",
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases. ``sizes`` = [in, h1, ..., out]."""
        if len(sizes) < 2:
            raise ShapeError("sizes must list at least input and output dimensions")
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in layout order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def load_from(self, other: "DenseNet") -> None:
        """Copy parameters from a network of identical layout (target-network sync)."""
        for mine, theirs in zip(self.parameters(), other.parameters()):
            if mine.shape != theirs.shape:
                raise ShapeError("cannot copy between networks of different layout")
        if len(self.layers) != len(other.layers):
            raise ShapeError("cannot copy between networks of different layout")
        self.flat[...] = other.flat

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    def forward(self, x, tape: "GradientTape | None" = None) -> np.ndarray:
        return forward(self, x, tape)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


@dataclass
class GradientTape:
    """Activations recorded during one forward pass plus gradient buffers."""

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    grads: list[np.ndarray] = field(default_factory=list)
    batched: bool = False
    net_id: int | None = None

    @property
    def recorded(self) -> bool:
        return bool(self.inputs)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def forward(net: DenseNet, x, tape: GradientTape | None = None) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    batched = a.ndim == 2
    if a.ndim not in (1, 2) or a.shape[-1] != net.in_dim:
        raise ShapeError(f"expected input of length {net.in_dim}, got shape {a.shape}")
    if tape is not None:
        tape.inputs.clear()
        tape.outputs.clear()
        tape.grads.clear()
        tape.batched = batched
        tape.net_id = id(net)
    for layer in net.layers:
        if tape is not None:
            tape.inputs.append(a)
        a = _activate(a @ layer.weight.T + layer.bias, layer.activation)
        if tape is not None:
            tape.outputs.append(a)
    return a


def backward(net: DenseNet, tape: GradientTape, output_gradient) -> GradientTape:
    """Fill ``tape.grads`` with dLoss/dParam given dLoss/dOutput.

    For batched inputs the gradients are summed over the batch; scale
    ``output_gradient`` accordingly when the loss is a mean.
    """
    if not tape.recorded or tape.net_id != id(net):
        raise TapeError("backward called without a forward pass recorded for this network")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != tape.outputs[-1].shape:
        raise ShapeError(
            f"output gradient shape {g.shape} does not match output {tape.outputs[-1].shape}"
        )
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        out = tape.outputs[k]
        if layer.activation == "relu":
            g = g * (out > 0.0)
        elif layer.activation == "tanh":
            g = g * (1.0 - out * out)
        inp = tape.inputs[k]
        if tape.batched:
            grads[2 * k] = g.T @ inp
            grads[2 * k + 1] = g.sum(axis=0)
        else:
            grads[2 * k] = np.outer(g, inp)
            grads[2 * k + 1] = g.copy()
        if k > 0:
            g = g @ layer.weight
    tape.grads = grads
    return tape


def input_gradient(net: DenseNet, tape: GradientTape, output_gradient) -> np.ndarray:
    """dLoss/dInput for the recorded forward pass (parameters untouched)."""
    if not tape.recorded or tape.net_id != id(net):
        raise TapeError("input_gradient called without a recorded forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        out = tape.outputs[k]
        if layer.activation == "relu":
            g = g * (out > 0.0)
        elif layer.activation == "tanh":
            g = g * (1.0 - out * out)
        g = g @ layer.weight
    return g


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    _m: np.ndarray | None = field(default=None, repr=False, compare=False)
    _v: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")


def optimize_step(
    net: DenseNet, grads: GradientTape | Sequence[np.ndarray], opt: OptimizerState
) -> tuple[DenseNet, OptimizerState]:
    """Apply one SGD or Adam update in place; returns the same objects."""
    g_list = grads.grads if isinstance(grads, GradientTape) else list(grads)
    params = net.parameters()
    if len(g_list) != len(params) or any(g is None for g in g_list):
        raise ShapeError("gradients are not aligned with the network parameters")
    for p, g in zip(params, g_list):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    flat_g = np.concatenate([g.ravel() for g in g_list])
    if not np.isfinite(flat_g).all():
        bad = [i for i, g in enumerate(g_list) if not np.isfinite(g).all()]
        raise NonFiniteGradientError(f"non-finite gradient in parameter arrays {bad}")

    opt.step_count += 1
    lr = opt.learning_rate
    flat = net.flat
    if opt.kind == "sgd":
        flat -= lr * flat_g
        return net, opt

    if opt._m is None or opt._m.size != flat.size:
        if opt.first_moment:
            opt._m = np.concatenate([x.ravel() for x in opt.first_moment])
            opt._v = np.concatenate([x.ravel() for x in opt.second_moment])
        else:
            opt._m = np.zeros_like(flat)
            opt._v = np.zeros_like(flat)
        opt.first_moment = _views_like(opt._m, params)
        opt.second_moment = _views_like(opt._v, params)
    t = opt.step_count
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    m, v = opt._m, opt._v
    m *= opt.beta1
    m += (1.0 - opt.beta1) * flat_g
    v *= opt.beta2
    v += (1.0 - opt.beta2) * (flat_g * flat_g)
    flat -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return net, opt


def _views_like(buffer: np.ndarray, params: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, offset = [], 0
    for p in params:
        out.append(buffer[offset:offset + p.size].reshape(p.shape))
        offset += p.size
    return out


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def analytic_gradients(net: DenseNet, x, loss_fn: LossFn) -> list[np.ndarray]:
    tape = GradientTape()
    out = forward(net, x, tape)
    _, dout = loss_fn(out)
    return [g.copy() for g in backward(net, tape, dout).grads]


def numeric_gradients(net: DenseNet, x, loss_fn: LossFn, eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn(net(x))`` w.r.t. every parameter."""
    result = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(forward(net, x))[0]
            flat[i] = orig - eps
            down = loss_fn(forward(net, x))[0]
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        result.append(g)
    return result


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def finite_difference_check(net: DenseNet, x, loss_fn: LossFn, eps: float = 1e-5) -> float:
    """Max over parameters of |analytic - numeric| / max(1, |numeric|).

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    return max_relative_error(
        analytic_gradients(net, x, loss_fn), numeric_gradients(net, x, loss_fn, eps)
    )


_ACT_CODES = {"linear": 0, "relu": 1, "tanh": 2}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}


def dumps_checkpoint(net: DenseNet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<III", layer.in_dim, layer.out_dim, _ACT_CODES[layer.activation]))
    for layer in net.layers:
        parts.append(layer.weight.astype("<f8").tobytes(order="C"))
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(data: bytes) -> DenseNet:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<III", data, offset))
        offset += 12
    layers = []
    for in_dim, out_dim, code in dims:
        n_w = in_dim * out_dim
        w = np.frombuffer(data, "<f8", n_w, offset).reshape(out_dim, in_dim).astype(np.float64)
        offset += 8 * n_w
        b = np.frombuffer(data, "<f8", out_dim, offset).astype(np.float64)
        offset += 8 * out_dim
        layers.append(DenseLayer(w, b, _CODE_ACTS[code]))
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return DenseNet(layers)


def save_checkpoint(net: DenseNet, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(net))


def load_checkpoint(path: str | Path) -> DenseNet:
    return loads_checkpoint(Path(path).read_bytes())
