"""GELU multi-layer perceptron with hand-written reverse-mode gradients.

Samples are columns: ``forward`` maps an ``(input_dim, batch)`` array to an
``(output_dim, batch)`` array. The network has ``depth`` hidden layers
``z <- gelu(W z + b)`` followed by a linear output layer ``W_out z`` with no
bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ShapeError, StaleCacheError
from .linalg import read_matrix_csv, write_matrix_csv

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# gelu'' = pdf(x) (2 - x^2) vanishes at x = sqrt(2), where gelu' peaks
GELU_PRIME_MAX = 0.5 * (1.0 + math.erf(1.0)) + math.sqrt(2.0) * math.exp(-1.0) / math.sqrt(2.0 * math.pi)


def gelu(x):
    """``x/2 * (1 + erf(x/sqrt(2)))``, the exact (non-tanh) form."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_prime(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class MlpShape:
    input_dim: int
    width: int
    depth: int
    output_dim: int

    def __post_init__(self):
        for name in ("input_dim", "width", "depth", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def layer_dims(self):
        """(fan_out, fan_in) of every weight matrix, output layer last."""
        dims = [(self.width, self.input_dim)]
        dims += [(self.width, self.width)] * (self.depth - 1)
        dims.append((self.output_dim, self.width))
        return dims


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights and biases of the hidden layers plus the bias-free output layer.

    Instances are treated as immutable; optimizers build new ones through
    :meth:`from_arrays`. Gradients use the same container.
    """

    shape: MlpShape
    weights: tuple
    biases: tuple
    w_out: np.ndarray

    def arrays(self) -> list:
        """Parameters in canonical order: W1, b1, ..., WD, bD, W_out."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.w_out)
        return out

    @classmethod
    def from_arrays(cls, shape: MlpShape, arrays) -> "MlpParams":
        arrays = list(arrays)
        if len(arrays) != 2 * shape.depth + 1:
            raise ShapeError(f"expected {2 * shape.depth + 1} arrays, got {len(arrays)}")
        weights = tuple(arrays[0 : 2 * shape.depth : 2])
        biases = tuple(arrays[1 : 2 * shape.depth : 2])
        return cls(shape, weights, biases, arrays[-1])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, shape: MlpShape, vector) -> "MlpParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != param_count(shape):
            raise ShapeError(f"flat vector has {vector.size} entries, shape needs {param_count(shape)}")
        arrays, pos = [], 0
        for i, (fan_out, fan_in) in enumerate(shape.layer_dims()):
            arrays.append(vector[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in))
            pos += fan_out * fan_in
            if i < shape.depth:
                arrays.append(vector[pos : pos + fan_out].copy())
                pos += fan_out
        if pos != vector.size:
            raise ShapeError(f"flat vector has {vector.size} entries, shape needs {pos}")
        return cls.from_arrays(shape, arrays)

    def zeros_like(self) -> "MlpParams":
        return MlpParams.from_arrays(self.shape, [np.zeros_like(a) for a in self.arrays()])


def param_count(shape: MlpShape) -> int:
    """``M w + w + (D-1)(w^2 + w) + w * out``; the output layer has no bias."""
    m, w, d, out = shape.input_dim, shape.width, shape.depth, shape.output_dim
    return m * w + w + (d - 1) * (w * w + w) + w * out


def glorot_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def init(shape: MlpShape, rng) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    arrays = []
    for i, (fan_out, fan_in) in enumerate(shape.layer_dims()):
        bound = glorot_bound(fan_in, fan_out)
        arrays.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        if i < shape.depth:
            arrays.append(np.zeros(fan_out))
    return MlpParams.from_arrays(shape, arrays)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    params: MlpParams
    inputs: tuple  # input of every hidden layer, then the last hidden activation
    pre: tuple  # pre-activations of every hidden layer


def forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != params.shape.input_dim:
        raise ShapeError(f"input must have shape ({params.shape.input_dim}, batch), got {x.shape}")
    inputs, pre = [x], []
    z = x
    for w, b in zip(params.weights, params.biases):
        a = w @ z + b[:, None]
        pre.append(a)
        z = gelu(a)
        inputs.append(z)
    return params.w_out @ z, ForwardCache(params, tuple(inputs), tuple(pre))


def predict(params: MlpParams, x) -> np.ndarray:
    return forward(params, x)[0]


def backward(params: MlpParams, cache: ForwardCache, d_out) -> MlpParams:
    """Gradient of ``<d_out, forward(params, x)>`` with respect to every parameter."""
    if cache.params is not params:
        raise StaleCacheError("cache was produced by a different parameter set")
    d_out = np.asarray(d_out, dtype=np.float64)
    batch = cache.inputs[0].shape[1]
    if d_out.shape != (params.shape.output_dim, batch):
        raise ShapeError(f"d_out must have shape {(params.shape.output_dim, batch)}, got {d_out.shape}")

    g_out = d_out @ cache.inputs[-1].T
    dz = params.w_out.T @ d_out
    g_w, g_b = [], []
    for layer in range(params.shape.depth - 1, -1, -1):
        da = dz * gelu_prime(cache.pre[layer])
        g_w.append(da @ cache.inputs[layer].T)
        g_b.append(da.sum(axis=1))
        if layer:
            dz = params.weights[layer].T @ da
    g_w.reverse()
    g_b.reverse()
    return MlpParams(params.shape, tuple(g_w), tuple(g_b), g_out)


def save_checkpoint(path, params: MlpParams, seed=None) -> None:
    """JSON header next to a flat one-column CSV of the parameters."""
    path = Path(path)
    header = {"shape": params.shape.__dict__, "seed": seed, "count": param_count(params.shape)}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_matrix_csv(path.with_suffix(".csv"), params.flat()[:, None])


def load_checkpoint(path) -> MlpParams:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    shape = MlpShape(**header["shape"])
    return MlpParams.from_flat(shape, read_matrix_csv(path.with_suffix(".csv"))[:, 0])
