"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record themselves onto the innermost active :class:`Graph` (a linear
tape in execution order, which is already a topological order).  Calling
``Graph.backward`` replays the tape once, in reverse.  With no active graph
every op runs forward-only, which is what evaluation-time code does.

Broadcasting is deliberately restricted: ``add`` accepts a trailing-shape
operand (bias over leading axes) and everything else wants exact shapes.
Use ``reshape``/``outer_add`` instead of relying on numpy broadcasting.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "NumericError",
    "custom_op",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "matmul",
    "tensor_sum",
    "mean",
    "log_softmax",
    "logsumexp2",
    "tanh",
    "relu",
    "layer_norm",
    "embedding_lookup",
    "dropout",
    "masked_softmax",
    "getitem",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "outer_add",
    "linear",
    "attention",
    "assert_finite",
    "sinusoid_positions",
]


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class NumericError(ArithmeticError):
    """Non-finite values showed up where finite values are required."""


_GRAPH_STACK: list["Graph"] = []


def _active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Linear tape of op records.

    Each record is ``(output, inputs, backward)`` where ``backward`` maps the
    output gradient to one gradient per input (``None`` for untracked
    inputs).  Records are appended in execution order, so iterating the tape
    in reverse visits every op exactly once with all downstream gradients
    already accumulated.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "graphs must be exited in LIFO order"
        return False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad = loss.grad + np.ones_like(loss.data)
        for out, inputs, backward in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; everything funnels into the module-level ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    graph = _active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        graph.records.append((out, inputs, backward))
    return out


def custom_op(out_data, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Record an op with an externally computed value and backward rule."""
    return _record(np.asarray(out_data, dtype=np.float64), tuple(inputs), backward)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may have a trailing sub-shape of a (bias over leading axes)."""
    if a.shape == b.shape:
        reduce_axes: tuple[int, ...] | None = None
    elif b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        reduce_axes = tuple(range(a.ndim - b.ndim))
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        gb = g if reduce_axes is None else g.sum(axis=reduce_axes)
        return g, gb

    return _record(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _record(a.data + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must carry identical leading (batch) axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ, {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(a.data @ b.data, (a, b), backward)


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis), 1.0 / n)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-probabilities along ``axis``."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def logsumexp2(x: Tensor, y: Tensor) -> Tensor:
    """log(e^x + e^y), elementwise, stable; -inf is the identity element."""
    if x.shape != y.shape:
        raise ShapeError(f"logsumexp2: incompatible shapes {x.shape} and {y.shape}")
    out = np.logaddexp(x.data, y.data)

    def backward(g):
        with np.errstate(invalid="ignore"):
            wx = np.exp(x.data - out)
            wy = np.exp(y.data - out)
        # both inputs -inf: the output is -inf and the weights are 0/0
        dead = np.isneginf(out)
        if np.any(dead):
            wx = np.where(dead, 0.0, wx)
            wy = np.where(dead, 0.0, wy)
        return g * wx, g * wy

    return _record(out, (x, y), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _record(out, (x,), lambda g: (g * (x.data > 0.0),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = ivar * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup: id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(table.data[ids], (table,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout with an explicit mask generator; identity when rng is None."""
    if rng is None or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def masked_softmax(scores: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis; masked positions get exactly zero weight.

    ``mask`` is a boolean array broadcastable to ``scores`` (True = visible).
    Masked keys never enter the exponentials, so outputs are bitwise
    independent of their score values.
    """
    if mask is None:
        m = scores.data.max(axis=-1, keepdims=True)
        e = np.exp(scores.data - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_to(mask, scores.shape)
        if not full.any(axis=-1).all():
            raise ShapeError("masked_softmax: row with no visible key")
        s = np.where(full, scores.data, -np.inf)
        m = s.max(axis=-1, keepdims=True)
        e = np.where(full, np.exp(s - m), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / denom

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (scores,), backward)


# ---------------------------------------------------------------------------
# structural ops


def getitem(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing. Keys must not repeat an element."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _record(x.data[key], (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("stack: need at least one tensor")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _record(np.stack([p.data for p in parts], axis=axis), tuple(parts), backward)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """[m, d] + [n, d] -> [m, n, d] pairwise sum (no implicit broadcasting elsewhere)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"outer_add: want [m,d] and [n,d], got {a.shape} and {b.shape}")
    out = a.data[:, None, :] + b.data[None, :, :]
    return _record(out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)))


# ---------------------------------------------------------------------------
# composites


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    n_heads: int = 1,
    return_weights: bool = False,
):
    """Scaled dot-product attention over [T, d] operands.

    ``mask`` is [Tq, Tk] boolean (True = visible), shared across heads.
    Splits d into ``n_heads`` heads; masked keys receive exactly zero weight.
    """
    tq, d = q.shape
    tk = k.shape[0]
    if k.shape != (tk, d) or v.shape != (tk, d):
        raise ShapeError(f"attention: inconsistent shapes {q.shape}/{k.shape}/{v.shape}")
    if d % n_heads:
        raise ShapeError(f"attention: d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    qh = transpose(reshape(q, (tq, n_heads, dh)), (1, 0, 2))
    kh = transpose(reshape(k, (tk, n_heads, dh)), (1, 0, 2))
    vh = transpose(reshape(v, (tk, n_heads, dh)), (1, 0, 2))
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    weights = masked_softmax(scores, mask)
    out = reshape(transpose(matmul(weights, vh), (1, 0, 2)), (tq, d))
    if return_weights:
        return out, weights.data
    return out


def assert_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values in {what}")


_SINUSOID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoid_positions(length: int, d: int) -> np.ndarray:
    """Fixed sin/cos absolute position table, [length, d]."""
    key = (length, d)
    cached = _SINUSOID_CACHE.get(key)
    if cached is not None:
        return cached
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    _SINUSOID_CACHE[key] = table
    return table
