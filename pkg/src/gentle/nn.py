"""Dense multilayer perceptrons with exact analytic backpropagation.

All math is 64-bit. A network is a flat list of layers, each holding a
weight matrix of shape (in_dim, out_dim), a bias vector, and an
activation tag. Forward and backward passes are plain matrix products,
so gradients can be checked against central finite differences to tight
tolerances (see `gradient_check`).

Parameter snapshots serialize to a flat little-endian binary file:
magic "GNTL", version, layer count, then per-layer dims + row-major
float64 weights and biases.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import Rng

ACTIVATIONS = ("identity", "relu", "tanh")

SNAPSHOT_MAGIC = b"GNTL"
SNAPSHOT_VERSION = 1
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
_ACT_NAME = {i: name for name, i in _ACT_CODE.items()}


@dataclass
class Layer:
    w: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ConfigError(
                f"layer shape mismatch: w{self.w.shape} vs b{self.b.shape}"
            )


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[1]

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers])


def mlp_init(
    dims: Sequence[int],
    rng: Rng,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
) -> Mlp:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)) per layer."""
    if len(dims) < 2:
        raise ConfigError("need at least an input and an output dimension")
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, (fan_in, fan_out))
        b = np.zeros(fan_out)
        act = output_activation if k == len(dims) - 2 else hidden_activation
        layers.append(Layer(w, b, act))
    return Mlp(layers)


def _layer_forward(h: np.ndarray, layer: Layer) -> np.ndarray:
    # One temporary per layer: the matmul output is updated in place.
    z = h @ layer.w
    z += layer.b
    if layer.activation == "relu":
        np.maximum(z, 0.0, out=z)
    elif layer.activation == "tanh":
        np.tanh(z, out=z)
    return z


def mlp_forward_batch(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward over a batch, x shape (B, in_dim) -> (B, out_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ConfigError(f"input shape {x.shape} incompatible with in_dim {mlp.in_dim}")
    h = x
    for layer in mlp.layers:
        h = _layer_forward(h, layer)
    return h


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigError("mlp_forward takes a 1-D input; use mlp_forward_batch")
    return mlp_forward_batch(mlp, x[None, :])[0]


def mlp_forward_cached(mlp: Mlp, x: np.ndarray):
    """Forward pass that keeps per-layer inputs/outputs for backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ConfigError(f"input shape {x.shape} incompatible with in_dim {mlp.in_dim}")
    inputs, outputs = [], []
    h = x
    for layer in mlp.layers:
        inputs.append(h)
        h = _layer_forward(h, layer)
        outputs.append(h)
    return h, (inputs, outputs)


def mlp_backward(mlp: Mlp, cache, grad_out: np.ndarray):
    """Backprop a gradient w.r.t. the outputs.

    Returns (grads, grad_in): `grads` is a list of (dw, db) matching the
    layers, `grad_in` the gradient w.r.t. the batch inputs. Activation
    derivatives are recovered from the cached outputs (relu' from the
    sign of the output, tanh' = 1 - out^2).
    """
    inputs, outputs = cache
    grads: list = [None] * len(mlp.layers)
    g = np.asarray(grad_out, dtype=np.float64)
    owned = False  # whether g is a private temporary we may overwrite
    for k in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[k]
        out = outputs[k]
        if layer.activation == "relu":
            if owned:
                dz = np.multiply(g, out > 0.0, out=g)
            else:
                dz = g * (out > 0.0)
        elif layer.activation == "tanh":
            damp = 1.0 - out * out
            dz = np.multiply(g, damp, out=damp)
        else:
            dz = g
        grads[k] = (inputs[k].T @ dz, dz.sum(axis=0))
        g = dz @ layer.w.T
        owned = True
    return grads, g


def mlp_gradient(mlp: Mlp, x: np.ndarray, loss_fn: Callable):
    """Exact analytic gradient of a scalar batch loss w.r.t. all parameters.

    `loss_fn` maps the batch outputs (B, out_dim) to a pair
    (loss value, gradient of the loss w.r.t. the outputs).
    """
    y, cache = mlp_forward_cached(mlp, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    loss, grad_y = loss_fn(y)
    grads, _ = mlp_backward(mlp, cache, grad_y)
    return loss, grads


def zero_grads_like(mlp: Mlp):
    return [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in mlp.layers]


def scale_grads(grads, factor: float):
    return [(dw * factor, db * factor) for dw, db in grads]


def add_grads(a, b):
    return [(dwa + dwb, dba + dbb) for (dwa, dba), (dwb, dbb) in zip(a, b)]


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(mlp: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in mlp.layers]
    state.v = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in mlp.layers]
    return state


def adam_step(state: AdamState, mlp: Mlp, grads) -> tuple:
    """Bias-corrected Adam update, applied to the parameters in place."""
    if len(grads) != len(mlp.layers):
        raise ConfigError("gradient/parameter layer count mismatch")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for k, layer in enumerate(mlp.layers):
        for which, param, grad in (("w", layer.w, grads[k][0]), ("b", layer.b, grads[k][1])):
            if param.shape != grad.shape:
                raise ConfigError(f"gradient shape {grad.shape} != param shape {param.shape}")
            idx = 0 if which == "w" else 1
            m = state.m[k][idx]
            v = state.v[k][idx]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            param -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        assert np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b)), \
            "non-finite parameters after Adam step"
    return state, mlp


# ---------------------------------------------------------------------------
# Flattening and gradient checking

def flatten_params(mlp: Mlp) -> np.ndarray:
    return np.concatenate([np.concatenate([l.w.ravel(), l.b]) for l in mlp.layers])


def set_flat_params(mlp: Mlp, flat: np.ndarray) -> None:
    offset = 0
    for layer in mlp.layers:
        n = layer.w.size
        layer.w[...] = flat[offset:offset + n].reshape(layer.w.shape)
        offset += n
        n = layer.b.size
        layer.b[...] = flat[offset:offset + n]
        offset += n
    if offset != flat.size:
        raise ConfigError("flat parameter vector has the wrong length")


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, O(h^2) accurate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradient_check(mlp: Mlp, x: np.ndarray, loss_fn: Callable, h: float = 1e-5) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    _, grads = mlp_gradient(mlp, x, loss_fn)
    analytic = flatten_grads(grads)

    base = flatten_params(mlp)
    probe = mlp.copy()

    def scalar(flat):
        set_flat_params(probe, flat)
        y = mlp_forward_batch(probe, np.atleast_2d(x))
        loss, _ = loss_fn(y)
        return loss

    numeric = finite_difference_gradient(scalar, base, h=h)
    return max_relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# Snapshot IO

def save_mlp(path, mlp: Mlp) -> None:
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<I", SNAPSHOT_VERSION))
        f.write(struct.pack("<I", len(mlp.layers)))
        for layer in mlp.layers:
            f.write(struct.pack("<III", layer.w.shape[0], layer.w.shape[1],
                                _ACT_CODE[layer.activation]))
            f.write(np.ascontiguousarray(layer.w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def load_mlp(path) -> Mlp:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != SNAPSHOT_VERSION:
            raise DataFormatError(f"{path}: unsupported snapshot version {version}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        layers = []
        for _ in range(n_layers):
            in_dim, out_dim, act_code = struct.unpack("<III", f.read(12))
            if act_code not in _ACT_NAME:
                raise DataFormatError(f"{path}: unknown activation code {act_code}")
            w_bytes = f.read(8 * in_dim * out_dim)
            b_bytes = f.read(8 * out_dim)
            if len(w_bytes) != 8 * in_dim * out_dim or len(b_bytes) != 8 * out_dim:
                raise DataFormatError(f"{path}: truncated snapshot")
            w = np.frombuffer(w_bytes, dtype="<f8").reshape(in_dim, out_dim).copy()
            b = np.frombuffer(b_bytes, dtype="<f8").copy()
            layers.append(Layer(w, b, _ACT_NAME[act_code]))
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after snapshot")
    return Mlp(layers)


def assert_finite(mlp: Mlp) -> None:
    for k, layer in enumerate(mlp.layers):
        if not (np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b))):
            raise ConfigError(f"layer {k} contains non-finite parameters")
