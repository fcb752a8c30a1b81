"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints. Elementwise binary
ops require identical shapes; the only broadcast is :func:`add_bias`, which
adds a trailing-axis vector to every row.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Backward was called on something that is not a scalar loss."""


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self):
        backward(self)

    # operator sugar; all shape rules live in the functions below
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.data.dtype)
    if arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=like.data.dtype)
    return Tensor(arr)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Iterable[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


class _Slice:
    """Adjoint that touches only ``parent[index]``; avoids dense zero buffers per slice."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from loss.

    Adjoints start from zero on every call (stale gradients from an earlier
    backward are discarded); contributions from shared subgraphs are summed.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if isinstance(g, _Slice):
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad[g.index] += g.value
            elif parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
        if node._parents:
            node.grad = None  # interior adjoints are not needed after propagation
    for node in order:
        if node.grad is None and not node._parents:
            node.grad = np.zeros_like(node.data)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., q] + b[q]; the bias gradient sums over all leading axes."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} differ")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped to ``floor`` from below."""
    safe = np.maximum(x.data, floor)
    live = x.data >= floor
    return _make(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    live = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (np.where(live, g, 0.0),), "clamp")


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (x,), grad_fn, "softmax")


def normalize(x: Tensor) -> Tensor:
    """Divide each last-axis slice by its sum."""
    total = x.data.sum(axis=-1, keepdims=True)
    out = x.data / total

    def grad_fn(g):
        inner = (g * x.data).sum(axis=-1, keepdims=True)
        return ((g - inner / total) / total,)

    return _make(out, (x,), grad_fn, "normalize")


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=x.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; use :func:`gather_rows` for fancy lookups."""
    out = x.data[index]

    return _make(np.array(out), (x,), lambda g: (_Slice(index, g),), "getitem")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, parts, grad_fn, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes {sorted(shapes)} differ")
    out = np.stack([p.data for p in parts], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(out, parts, grad_fn, "stack")


# --------------------------------------------------------------------------
# linear algebra and lookups
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over a shared leading axis."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} must both be 2-D or 3-D")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def grad_fn(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return (g @ bt if a.requires_grad else None, at @ g if b.requires_grad else None)

    return _make(out, (a, b), grad_fn, "matmul")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), grad_fn, "gather_rows")


def segment_mean(table: Tensor, rows: np.ndarray, segments: np.ndarray, n_segments: int) -> Tensor:
    """Mean of ``table[rows[i]]`` grouped by ``segments[i]``.

    Segments with no member rows come out as zero vectors.
    """
    rows = np.asarray(rows, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(table.data.dtype)
    weights = np.zeros_like(counts)
    np.divide(1.0, counts, out=weights, where=counts > 0)
    out = np.zeros((n_segments, table.shape[1]), dtype=table.data.dtype)
    np.add.at(out, segments, table.data[rows])
    out *= weights[:, None]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, rows, g[segments] * weights[segments, None])
        return (full,)

    return _make(out, (table,), grad_fn, "segment_mean")


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error between backprop and finite differences."""
    loss = fn()
    backward(loss)
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
    return {name: relative_error(analytic[name], numerical_gradient(fn, p, h)) for name, p in params.items()}
