"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive in execution order; each recorded node
keeps its forward value and a closure mapping the output adjoint to parent
adjoints. Parents always precede children, so a reverse sweep over the node
list is a valid topological order. Tapes are cheap and are rebuilt for every
training step.

Broadcasting is deliberately narrow: operands of binary ops must share a
shape, with two explicit exceptions (:func:`scale` by a Python scalar and
:func:`add_bias` along the last axis).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self) -> None:
        self._ops: list[str] = []
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Vjp | None] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._values)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Value] = (),
               vjp: Vjp | None = None) -> Value:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{op} produced non-finite values (node {len(self)})")
        idx = []
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"{op}: operand belongs to a different tape")
            idx.append(p.index)
        self._ops.append(op)
        self._values.append(value)
        self._parents.append(tuple(idx))
        self._vjps.append(vjp)
        return Value(self, len(self._values) - 1, value.shape)

    def constant(self, array) -> Value:
        return self.record("constant", np.array(array, dtype=np.float64))

    def param(self, name: str, array) -> Value:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        v = self.record("param", np.array(array, dtype=np.float64))
        self.params[name] = v.index
        return v

    def op(self, index: int) -> str:
        return self._ops[index]

    def parents(self, index: int) -> tuple[int, ...]:
        return self._parents[index]

    def backward(self, root: Value) -> dict[str, np.ndarray]:
        """Return d(root)/d(param) for every registered parameter.

        Adjoints live in a fresh buffer on each call, so repeated calls give
        identical results.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        adj: list[np.ndarray | None] = [None] * len(self._values)
        adj[root.index] = np.ones_like(self._values[root.index])
        for i in range(root.index, -1, -1):
            g = adj[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self._parents[i], vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return {name: (adj[i] if adj[i] is not None else np.zeros_like(self._values[i]))
                for name, i in self.params.items()}


class Value:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index", "shape")
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int, shape: tuple[int, ...]) -> None:
        self.tape = tape
        self.index = index
        self.shape = tuple(shape)

    @property
    def data(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def __repr__(self) -> str:
        return f"Value(op={self.tape.op(self.index)!r}, shape={self.shape})"

    def _lift(self, other) -> Value:
        if isinstance(other, Value):
            return other
        return self.tape.constant(np.broadcast_to(np.asarray(other, dtype=np.float64), self.shape))

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        if np.ndim(other) == 0:
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _same_shape(op: str, a: Value, b: Value) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Value, b: Value) -> Value:
    """Matrix product; rank-3 operands are treated as equal-size batches."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return a.tape.record("matmul", A @ B, (a, b), lambda g: (g @ _swap(B), _swap(A) @ g))


def add(a: Value, b: Value) -> Value:
    _same_shape("add", a, b)
    return a.tape.record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    _same_shape("sub", a, b)
    return a.tape.record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Value, b: Value) -> Value:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return a.tape.record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Value, c: float) -> Value:
    return a.tape.record("scale", a.data * c, (a,), lambda g: (g * c,))


def negate(a: Value) -> Value:
    return a.tape.record("negate", -a.data, (a,), lambda g: (-g,))


def exp(a: Value) -> Value:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def add_bias(x: Value, b: Value) -> Value:
    """``x + b`` with ``b`` broadcast along every axis but the last."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return x.tape.record("add_bias", x.data + b.data, (x, b),
                         lambda g: (g, g.sum(axis=lead)))


def _check_axis(op: str, x: Value, axis: int | None) -> None:
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")


def reduce_sum(x: Value, axis: int | None = None) -> Value:
    _check_axis("sum", x, axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record("sum", np.sum(x.data, axis=axis), (x,), vjp)


def reduce_mean(x: Value, axis: int | None = None) -> Value:
    _check_axis("mean", x, axis)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return x.tape.record("mean", np.mean(x.data, axis=axis), (x,), vjp)


def gelu(x: Value) -> Value:
    """GeLU, tanh approximation."""
    X = x.data
    t = np.tanh(_GELU_C * (X + _GELU_A * X ** 3))
    out = 0.5 * X * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * X * X)
        return (g * d,)

    return x.tape.record("gelu", out, (x,), vjp)


def layer_norm(x: Value, gain: Value, bias: Value) -> Value:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    X, G = x.data, gain.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gh = g * G
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return x.tape.record("layer_norm", xhat * G + bias.data, (x, gain, bias), vjp)


def _check_mask(op: str, x: Value, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 0 or mask.shape != x.shape[-mask.ndim:]:
        raise ShapeError(f"{op}: mask {mask.shape} does not match trailing dims of {x.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError(f"{op}: a row has no unmasked entry")
    return np.broadcast_to(mask, x.shape)


def masked_normalize(scores: Value, mask: np.ndarray) -> Value:
    """Row-wise ``s_ij / sum_j s_ij`` over unmasked entries; masked entries are 0.

    ``mask`` may omit leading (batch) axes of ``scores``. A row whose unmasked
    scores are all zero (possible for the squared-distance kernel) gets uniform
    weights and no gradient.
    """
    m = _check_mask("masked_normalize", scores, mask)
    s = np.where(m, scores.data, 0.0)
    z = s.sum(axis=-1, keepdims=True)
    flat = z == 0.0
    zs = np.where(flat, 1.0, z)
    out = np.where(flat, m / m.sum(axis=-1, keepdims=True), s / zs)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(m & ~flat, (g - inner) / zs, 0.0),)

    return scores.tape.record("masked_normalize", out, (scores,), vjp)


def stabilize_logits(logits: Value, mask: np.ndarray) -> Value:
    """Subtract the per-row maximum over unmasked entries; masked entries become 0.

    The maximum is treated as a constant, which is exact whenever the result
    is exponentiated and then normalized per row.
    """
    m = _check_mask("stabilize_logits", logits, mask)
    L = logits.data
    top = np.where(m, L, -np.inf).max(axis=-1, keepdims=True)
    out = np.where(m, L - top, 0.0)
    return logits.tape.record("stabilize_logits", out, (logits,),
                              lambda g: (np.where(m, g, 0.0),))


def pairwise_sqdist(q: Value, k: Value) -> Value:
    """``out[..., i, j] = ||q[..., i, :] - k[..., j, :]||^2``."""
    if q.ndim != k.ndim or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"pairwise_sqdist: {q.shape} vs {k.shape}")
    Q, K = q.data, k.data
    qq = (Q * Q).sum(axis=-1)[..., :, None]
    kk = (K * K).sum(axis=-1)[..., None, :]
    out = np.maximum(qq + kk - 2.0 * (Q @ _swap(K)), 0.0)

    def vjp(g):
        gq = 2.0 * (Q * g.sum(axis=-1)[..., None] - g @ K)
        gk = 2.0 * (K * g.sum(axis=-2)[..., None] - _swap(g) @ Q)
        return gq, gk

    return q.tape.record("pairwise_sqdist", out, (q, k), vjp)


def reshape(x: Value, shape: Sequence[int]) -> Value:
    src = x.shape
    return x.tape.record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Value, axes: Sequence[int] | None = None) -> Value:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return x.tape.record("transpose", np.transpose(x.data, axes), (x,),
                         lambda g: (np.transpose(g, inv),))


def rows(x: Value, start: int, stop: int) -> Value:
    """Slice ``x[start:stop]`` along the first axis."""
    src = x.shape

    def vjp(g):
        out = np.zeros(src)
        out[start:stop] = g
        return (out,)

    return x.tape.record("rows", x.data[start:stop], (x,), vjp)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "exp": exp, "negate": negate}


def elementwise(op: str, *args) -> Value:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def reduce(op: str, x: Value, axis: int | None = None) -> Value:
    if op == "sum":
        return reduce_sum(x, axis)
    if op == "mean":
        return reduce_mean(x, axis)
    raise ValueError(f"unknown reduction {op!r}")
