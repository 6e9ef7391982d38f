"""Small dense numerical core: parameter containers, MLPs, softmax, optimizers.

Everything is float64. Parameters live in a single flat array per
``ParamVector`` with named, shaped block views on top of it, so element-wise
algebra and optimizer steps are one vectorized operation each.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MAGIC = b"FMX1"


class StructureError(ValueError):
    """Shapes or layouts that do not line up."""


@dataclass(frozen=True)
class Layout:
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.shapes):
            raise StructureError("names and shapes differ in length")
        if len(set(self.names)) != len(self.names):
            raise StructureError("duplicate block names")
        sizes = tuple(math.prod(s) for s in self.shapes)
        offsets = (0, *itertools.accumulate(sizes))
        # derived, not part of equality; set once since the dataclass is frozen
        object.__setattr__(self, "_sizes", sizes)
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(
            self, "index", {n: (offsets[i], offsets[i + 1], self.shapes[i]) for i, n in enumerate(self.names)}
        )

    @property
    def sizes(self) -> tuple[int, ...]:
        return self._sizes

    @property
    def offsets(self) -> tuple[int, ...]:
        return self._offsets

    @property
    def size(self) -> int:
        return self._offsets[-1]


class ParamVector:
    """Ordered named blocks of float64 values backed by one flat array."""

    __slots__ = ("layout", "flat", "_index")

    def __init__(self, layout: Layout, flat: np.ndarray | None = None):
        self.layout = layout
        if flat is None:
            flat = np.zeros(layout.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != layout.size:
            raise StructureError(
                f"flat array of size {flat.size} does not match layout size {layout.size}"
            )
        self.flat = flat
        self._index = layout.index

    @classmethod
    def from_blocks(cls, blocks: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        blocks = [(name, np.asarray(v, dtype=np.float64)) for name, v in blocks]
        layout = Layout(tuple(n for n, _ in blocks), tuple(tuple(v.shape) for _, v in blocks))
        flat = np.concatenate([v.ravel() for _, v in blocks]) if blocks else np.zeros(0)
        return cls(layout, flat)

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self._index[name]
        return self.flat[lo:hi].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def names(self) -> tuple[str, ...]:
        return self.layout.names

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        return [(n, self[n]) for n in self.layout.names]

    def __len__(self) -> int:
        return self.flat.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.flat.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout, np.zeros_like(self.flat))

    def _check(self, other: "ParamVector") -> None:
        if other.layout != self.layout:
            raise StructureError("ParamVector layouts are not aligned")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.layout, self.flat + other.flat)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.layout, self.flat - other.flat)

    def __mul__(self, c: float) -> "ParamVector":
        return ParamVector(self.layout, self.flat * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(self.layout, -self.flat)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    __hash__ = None

    def __repr__(self) -> str:
        parts = ", ".join(f"{n}{list(s)}" for n, s in zip(self.layout.names, self.layout.shapes))
        return f"ParamVector({parts})"

    def select(self, names: Sequence[str]) -> "ParamVector":
        return ParamVector.from_blocks([(n, self[n]) for n in names])

    def to_bytes(self) -> bytes:
        return serialize(self)


def serialize(pv: ParamVector) -> bytes:
    """Encode as FMX1: magic, block count, then per block name/dims/values (LE)."""
    out = [MAGIC, struct.pack("<I", len(pv.layout.names))]
    for name, shape in zip(pv.layout.names, pv.layout.shapes):
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        out.append(np.ascontiguousarray(pv[name], dtype="<f8").tobytes())
    return b"".join(out)


def deserialize(data: bytes) -> ParamVector:
    if data[:4] != MAGIC:
        raise StructureError("not an FMX1 payload")
    try:
        return _deserialize(data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, StructureError):
            raise
        raise StructureError(f"truncated or corrupt FMX1 payload: {exc}") from None


def _deserialize(data: bytes) -> ParamVector:
    pos = 4
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blocks = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
        blocks.append((name, values.reshape(shape)))
    if pos != len(data):
        raise StructureError("trailing bytes after FMX1 payload")
    return ParamVector.from_blocks(blocks)


# ---------------------------------------------------------------- MLP


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise StructureError(f"invalid layer widths {widths}")
        if self.activation != "relu":
            raise StructureError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def penultimate_dim(self) -> int:
        return self.layer_widths[-2]

    def layout(self) -> Layout:
        names, shapes = [], []
        for l in range(self.n_layers):
            names += [f"W{l}", f"b{l}"]
            shapes += [(self.layer_widths[l], self.layer_widths[l + 1]), (self.layer_widths[l + 1],)]
        return Layout(tuple(names), tuple(shapes))

    def weight_names(self) -> list[str]:
        return [f"W{l}" for l in range(self.n_layers)]

    def bias_names(self) -> list[str]:
        return [f"b{l}" for l in range(self.n_layers)]

    def output_bias(self) -> str:
        return f"b{self.n_layers - 1}"


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    pv = ParamVector(spec.layout())
    for l in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[l], spec.layer_widths[l + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        pv[f"W{l}"][...] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return pv


@dataclass
class ForwardCache:
    """Activations of one forward pass: ``acts[0]`` is the input, ``acts[-1]`` the logits."""

    spec: MlpSpec
    acts: list
    params_ref: np.ndarray = field(repr=False)


def _check_params(spec: MlpSpec, params: ParamVector) -> None:
    if params.layout != spec.layout():
        raise StructureError("parameter layout does not match MLP spec")


def forward_batch(spec: MlpSpec, params: ParamVector, X: np.ndarray):
    """Batched forward pass. Returns (logits (n, C), cache, penultimate (n, H))."""
    _check_params(spec, params)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_in:
        raise StructureError(f"input of shape {X.shape} does not match input width {spec.n_in}")
    acts = kernels.mlp_forward(
        [params[n] for n in spec.weight_names()], [params[n] for n in spec.bias_names()], X
    )
    cache = ForwardCache(spec, acts, params.flat)
    return acts[-1], cache, acts[-2]


def backward_batch(
    spec: MlpSpec,
    params: ParamVector,
    cache: ForwardCache,
    grad_logits: np.ndarray,
    grad_penultimate: np.ndarray | None = None,
) -> ParamVector:
    """Gradient of ``sum(grad_logits * logits)`` (plus the optional penultimate term)."""
    if cache.spec != spec or cache.params_ref is not params.flat:
        raise StructureError("forward cache does not belong to these parameters")
    G = np.asarray(grad_logits, dtype=np.float64)
    if G.shape != cache.acts[-1].shape:
        raise StructureError(f"grad_logits shape {G.shape} != logits shape {cache.acts[-1].shape}")
    if spec.n_layers == 1:
        grad_penultimate = None
    dW, db = kernels.mlp_backward(
        [params[n] for n in spec.weight_names()], cache.acts, G, grad_penultimate
    )
    out = ParamVector(params.layout)
    for l in range(spec.n_layers):
        out[f"W{l}"][...] = dW[l]
        out[f"b{l}"][...] = db[l]
    return out


def forward(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    """Single-example forward: (logits (C,), cache, penultimate (H,))."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise StructureError("forward expects a single input vector")
    logits, cache, pen = forward_batch(spec, params, x[None, :])
    return logits[0], cache, pen[0]


def backward(spec: MlpSpec, params: ParamVector, cache: ForwardCache, grad_logits) -> ParamVector:
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    return backward_batch(spec, params, cache, g)


# ---------------------------------------------------------------- softmax


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    shifted = v - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(terms, axis=axis)


# ---------------------------------------------------------------- optimizers


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """Minimization step ``params - lr * grad``; pass ``-lr`` for ascent."""
    params._check(grad)
    return ParamVector(params.layout, params.flat - lr * grad.flat)


@dataclass
class AdamState:
    m: ParamVector
    v: ParamVector
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, like: ParamVector, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(like.zeros_like(), like.zeros_like(), 0, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector, lr: float):
    """One bias-corrected Adam step; returns (new_params, new_state)."""
    params._check(grad)
    params._check(state.m)
    g = grad.flat
    t = state.t + 1
    m = state.beta1 * state.m.flat + (1.0 - state.beta1) * g
    v = state.beta2 * state.v.flat + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        ParamVector(params.layout, m),
        ParamVector(params.layout, v),
        t,
        state.beta1,
        state.beta2,
        state.eps,
    )
    return ParamVector(params.layout, new), new_state
