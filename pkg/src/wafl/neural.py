"""Two-layer fully connected MNIST classifier trained with Adam.

All trainable tensors live in one contiguous float64 vector so that
exchange, aggregation and distance computations work on a single array.
The tensors are views into that vector, in the order
fc1.weight (row-major), fc1.bias, fc2.weight (row-major), fc2.bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import FormatError

N_INPUT = 784
N_HIDDEN = 128
N_CLASSES = 10

LAYOUT = "fc1w,fc1b,fc2w,fc2b"
TENSOR_SHAPES = {
    "fc1.weight": (N_HIDDEN, N_INPUT),
    "fc1.bias": (N_HIDDEN,),
    "fc2.weight": (N_CLASSES, N_HIDDEN),
    "fc2.bias": (N_CLASSES,),
}


def _build_slices():
    slices, start = {}, 0
    for name, shape in TENSOR_SHAPES.items():
        size = int(np.prod(shape))
        slices[name] = slice(start, start + size)
        start += size
    return slices, start


TENSOR_SLICES, N_PARAMS = _build_slices()  # N_PARAMS == 101_770


class MlpParams:
    """Trainable parameters of the classifier backed by one flat vector."""

    __slots__ = ("vector",)

    def __init__(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (N_PARAMS,):
            raise ValueError(f"expected a vector of {N_PARAMS} values, got shape {vector.shape}")
        self.vector = vector

    def tensor(self, name):
        return self.vector[TENSOR_SLICES[name]].reshape(TENSOR_SHAPES[name])

    @property
    def fc1_weight(self):
        return self.tensor("fc1.weight")

    @property
    def fc1_bias(self):
        return self.tensor("fc1.bias")

    @property
    def fc2_weight(self):
        return self.tensor("fc2.weight")

    @property
    def fc2_bias(self):
        return self.tensor("fc2.bias")

    def copy(self):
        return MlpParams(self.vector.copy())

    @classmethod
    def zeros(cls):
        return cls(np.zeros(N_PARAMS))

    @classmethod
    def from_tensors(cls, fc1_weight, fc1_bias, fc2_weight, fc2_bias):
        parts = [fc1_weight, fc1_bias, fc2_weight, fc2_bias]
        for (name, shape), part in zip(TENSOR_SHAPES.items(), parts):
            if np.shape(part) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(part)}")
        return cls(np.concatenate([np.ravel(p).astype(np.float64) for p in parts]))

    def __eq__(self, other):
        return isinstance(other, MlpParams) and np.array_equal(self.vector, other.vector)

    def __repr__(self):
        return f"MlpParams(norm={np.linalg.norm(self.vector):.6g})"


def flatten(params: MlpParams) -> np.ndarray:
    """Copy of the parameter vector in the documented layout."""
    return params.vector.copy()


def unflatten(vector) -> MlpParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != N_PARAMS:
        raise ValueError(f"expected {N_PARAMS} values, got {vector.size}")
    return MlpParams(vector.copy())


def init_params(rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    vec = np.empty(N_PARAMS)
    for name, shape in TENSOR_SHAPES.items():
        fan_in = N_INPUT if name.startswith("fc1") else N_HIDDEN
        bound = 1.0 / np.sqrt(fan_in)
        sl = TENSOR_SLICES[name]
        vec[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return MlpParams(vec)


def forward(params: MlpParams, pixels) -> np.ndarray:
    """Logits for one sample of 784 pixels or a batch of shape (B, 784)."""
    x = np.asarray(pixels, dtype=np.float64)
    hidden = np.maximum(x @ params.fc1_weight.T + params.fc1_bias, 0.0)
    return hidden @ params.fc2_weight.T + params.fc2_bias


def predict(params: MlpParams, pixels) -> np.ndarray:
    # np.argmax returns the lowest index on ties
    return np.argmax(forward(params, pixels), axis=-1)


def _check_batch(pixels, labels):
    x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("batch must contain at least one sample")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    return x, y


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean softmax cross-entropy of a (B, C) logit array."""
    logp = _log_softmax(np.atleast_2d(logits))
    return float(-logp[np.arange(logp.shape[0]), labels].mean())


def loss(params: MlpParams, pixels, labels) -> float:
    """Mean cross-entropy over the batch."""
    x, y = _check_batch(pixels, labels)
    return cross_entropy(forward(params, x), y)


def gradient(params: MlpParams, pixels, labels):
    """Backpropagated gradient of :func:`loss`.

    Returns ``(loss_value, grad)`` where ``grad`` is an :class:`MlpParams`.
    """
    x, y = _check_batch(pixels, labels)
    n = x.shape[0]
    pre = x @ params.fc1_weight.T
    pre += params.fc1_bias
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.fc2_weight.T
    logits += params.fc2_bias

    logp = _log_softmax(logits)
    rows = np.arange(n)
    value = float(-logp[rows, y].mean())

    d_logits = np.exp(logp)
    d_logits[rows, y] -= 1.0
    d_logits /= n

    grad = MlpParams(np.empty(N_PARAMS))
    np.matmul(d_logits.T, hidden, out=grad.fc2_weight)
    d_logits.sum(axis=0, out=grad.fc2_bias)
    d_hidden = d_logits @ params.fc2_weight
    d_hidden[pre <= 0.0] = 0.0
    np.matmul(d_hidden.T, x, out=grad.fc1_weight)
    d_hidden.sum(axis=0, out=grad.fc1_bias)
    return value, grad


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.001
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(N_PARAMS))
    v: np.ndarray = field(default_factory=lambda: np.zeros(N_PARAMS))
    t: int = 0

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t)


@numba.njit(error_model="numpy", cache=True)
def _adam_kernel(theta, m, v, g, beta1, beta2, eps, step, inv_sqrt_bc2):
    for i in range(theta.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        theta[i] -= step * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)


def adam_update_(theta, state: AdamState, grad, hyper: TrainHyper):
    """In-place bias-corrected Adam step on ``theta`` and ``state``."""
    state.t += 1
    bc1 = 1.0 - hyper.beta1 ** state.t
    bc2 = 1.0 - hyper.beta2 ** state.t
    _adam_kernel(theta, state.m, state.v, np.ascontiguousarray(grad, dtype=np.float64),
                 hyper.beta1, hyper.beta2, hyper.eps,
                 hyper.learning_rate / bc1, 1.0 / np.sqrt(bc2))


def adam_step(params: MlpParams, grad: MlpParams, state: AdamState, hyper: TrainHyper):
    """One Adam update; returns new ``(params, state)`` and leaves the inputs untouched."""
    g = grad.vector if isinstance(grad, MlpParams) else np.asarray(grad, dtype=np.float64)
    if g.shape != params.vector.shape or state.m.shape != params.vector.shape:
        raise ValueError("parameter, gradient and optimizer shapes differ")
    new_params, new_state = params.copy(), state.copy()
    adam_update_(new_params.vector, new_state, g, hyper)
    return new_params, new_state


def train_one_epoch(params: MlpParams, state: AdamState, pixels, labels,
                    hyper: TrainHyper, rng: np.random.Generator) -> float:
    """One shuffled pass over a node's local data, updating ``params`` and ``state`` in place.

    The data is consumed in mini-batches of ``hyper.batch_size`` (the last
    one may be smaller) with one Adam step per batch. Returns the mean of
    the mini-batch losses.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty partition")
    order = rng.permutation(n)
    total = 0.0
    steps = 0
    for start in range(0, n, hyper.batch_size):
        idx = order[start:start + hyper.batch_size]
        value, grad = gradient(params, pixels[idx], labels[idx])
        adam_update_(params.vector, state, grad.vector, hyper)
        total += value
        steps += 1
    return total / steps


def save_snapshot(path, params: MlpParams, *, epoch: int, node_id: int):
    """Write a JSON header line followed by the raw little-endian float64 vector."""
    header = {"layout": LAYOUT, "epoch": int(epoch), "node_id": int(node_id), "length": N_PARAMS}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.vector.astype("<f8").tobytes())


def load_snapshot(path):
    """Inverse of :func:`save_snapshot`; returns ``(header, params)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise FormatError("missing snapshot header", offset=0)
    try:
        header = json.loads(raw[:end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad snapshot header: {exc}", offset=0) from exc
    if header.get("layout") != LAYOUT:
        raise FormatError(f"unsupported layout {header.get('layout')!r}", offset=0)
    body = raw[end + 1:]
    if len(body) != 8 * N_PARAMS:
        raise FormatError(f"expected {8 * N_PARAMS} payload bytes, found {len(body)}", offset=end + 1)
    return header, MlpParams(np.frombuffer(body, dtype="<f8").astype(np.float64))
