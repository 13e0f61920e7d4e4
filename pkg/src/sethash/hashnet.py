"""Fully connected hashing head: ReLU hidden layers, sigmoid output, 0.5 threshold."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import Dictionary, dictionary_from_buffer, dictionary_to_bytes
from .errors import (
    BadMagic,
    CorruptPayload,
    DimensionMismatch,
    InvalidParameter,
    IoFailure,
    NonFiniteValue,
    TapeMismatch,
    UnsupportedVersion,
)

SHSH_MAGIC = b"SHSH"
SHSH_VERSION = 1



@dataclass(eq=False)
class HashNet:
    """``weights[i]`` has shape ``(out_i, in_i)``; ``biases[i]`` has shape ``(out_i,)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise InvalidParameter("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidParameter(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidParameter(f"layer {i}: input width {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteValue(f"layer {i} has non-finite parameters")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def code_bits(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        """Parameters in update order ``W1, b1, W2, b2, ...`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype) -> "HashNet":
        return HashNet([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def copy(self) -> "HashNet":
        return self.astype(self.weights[0].dtype)

    def __eq__(self, other):
        if not isinstance(other, HashNet):
            return NotImplemented
        return self.dims == other.dims and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        )

    __hash__ = None


@dataclass
class ForwardTape:
    dims: tuple[int, ...]
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def init(layer_dims, seed: int = 0, dtype=np.float32) -> HashNet:
    """Fan-in scaled uniform init: He bounds for ReLU layers, Glorot for the sigmoid layer."""
    dims = [int(v) for v in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise InvalidParameter(f"layer_dims needs an input width and >= 1 layer, got {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    last = len(dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out)) if i == last else np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return HashNet(weights, biases)


def sigmoid(z):
    """Logistic function clipped to stay strictly inside (0, 1) in ``z``'s precision."""
    z = np.asarray(z)
    if z.dtype not in (np.float32, np.float64):
        z = z.astype(np.float64)
    out = np.empty_like(z)
    # split by sign so exp never overflows
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    info = np.finfo(z.dtype)
    return np.clip(out, info.smallest_subnormal, 1.0 - info.epsneg)


def _compute_dtype(x, net):
    dt = np.result_type(x.dtype, net.weights[0].dtype)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


def forward(net: HashNet, f) -> tuple[np.ndarray, ForwardTape]:
    """Real-valued codes for one feature vector ``(in,)`` or a batch ``(n, in)``.

    Computation runs in float32 only when both the input and the network
    are float32; anything else is promoted to float64.
    """
    x = np.asarray(f)
    x = x.astype(_compute_dtype(x, net), copy=False)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise DimensionMismatch(f"input of shape {np.shape(f)} does not match width {net.input_dim}")
    tape = ForwardTape(dims=net.dims, squeeze=squeeze)
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        tape.inputs.append(h)
        z = h @ w.T.astype(x.dtype, copy=False) + b.astype(x.dtype, copy=False)
        tape.preacts.append(z)
        h = sigmoid(z) if i == net.num_layers - 1 else np.maximum(z, 0)
        tape.outputs.append(h)
    return (h[0] if squeeze else h), tape


def backward(net: HashNet, tape: ForwardTape, grad_h, input_grad: bool = True):
    """Reverse-mode gradients ``(dW, db, d_input)`` for a loss with gradient ``grad_h``.

    With ``input_grad=False`` the gradient w.r.t. the network input is
    skipped and ``None`` is returned in its place.
    """
    if tape.dims != net.dims or len(tape.outputs) != net.num_layers:
        raise TapeMismatch("tape was recorded on a network with different layer dims")
    dtype = tape.outputs[-1].dtype
    g = np.asarray(grad_h, dtype=dtype)
    if tape.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise DimensionMismatch(f"grad_h shape {np.shape(grad_h)} does not match output {tape.outputs[-1].shape}")
    dws: list[np.ndarray] = [None] * net.num_layers
    dbs: list[np.ndarray] = [None] * net.num_layers
    for i in reversed(range(net.num_layers)):
        h = tape.outputs[i]
        if i == net.num_layers - 1:
            dz = g * h * (1 - h)
        else:
            # ReLU subgradient at 0 is 0
            dz = g * (tape.preacts[i] > 0)
        dws[i] = dz.T @ tape.inputs[i]
        dbs[i] = dz.sum(axis=0)
        if i or input_grad:
            g = dz @ net.weights[i].astype(dtype, copy=False)
        else:
            g = None
    if g is not None and tape.squeeze:
        g = g[0]
    return dws, dbs, g


def binarize(h) -> np.ndarray:
    """Bits set where ``h > 0.5`` strictly; works row-wise on batches."""
    return np.asarray(h) > 0.5


# ---------------------------------------------------------------------------
# SHSH model file


def model_to_bytes(net: HashNet, dictionary: Dictionary) -> bytes:
    dims = net.dims
    parts = [
        struct.pack("<4sI", SHSH_MAGIC, SHSH_VERSION),
        dictionary_to_bytes(dictionary),
        struct.pack("<I", net.num_layers),
        struct.pack(f"<{len(dims)}I", *dims),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(raw: bytes) -> tuple[HashNet, Dictionary]:
    if len(raw) < 4 or raw[:4] != SHSH_MAGIC:
        raise BadMagic("not an SHSH model file")
    if len(raw) < 8:
        raise CorruptPayload("truncated model header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != SHSH_VERSION:
        raise UnsupportedVersion(f"SHSH version {version} is not supported")
    dictionary, off = dictionary_from_buffer(raw, 8)
    if len(raw) < off + 4:
        raise CorruptPayload("truncated layer count")
    (m,) = struct.unpack_from("<I", raw, off)
    off += 4
    if m < 1 or len(raw) < off + 4 * (m + 1):
        raise CorruptPayload("truncated or invalid layer dims")
    dims = struct.unpack_from(f"<{m + 1}I", raw, off)
    off += 4 * (m + 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        need = 4 * (fan_out * fan_in + fan_out)
        if fan_in < 1 or fan_out < 1 or len(raw) < off + need:
            raise CorruptPayload("truncated layer parameters")
        w = np.frombuffer(raw, dtype="<f4", count=fan_out * fan_in, offset=off).reshape(fan_out, fan_in)
        off += 4 * fan_out * fan_in
        b = np.frombuffer(raw, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    if off != len(raw):
        raise CorruptPayload(f"{len(raw) - off} trailing bytes after model payload")
    try:
        return HashNet(weights, biases), dictionary
    except NonFiniteValue as exc:
        raise CorruptPayload(str(exc)) from exc


def save_model(net: HashNet, dictionary: Dictionary, path: str | Path) -> None:
    try:
        Path(path).write_bytes(model_to_bytes(net, dictionary))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path: str | Path) -> tuple[HashNet, Dictionary]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return model_from_bytes(raw)
