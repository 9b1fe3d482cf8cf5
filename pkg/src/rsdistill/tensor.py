"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its inputs and a closure mapping the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph once in
reverse topological order. Broadcasting is deliberately limited to
same-shape and scalar-vs-tensor operands; anything else needs an explicit
``expand``.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable warnings for silent numerical events such as division by zero."""
    global _DEBUG
    _DEBUG = bool(flag)


class DivisionByZeroWarning(RuntimeWarning):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce_var(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def expand(self, shape):
        return expand(self, shape)

    # -- differentiation -----------------------------------------------
    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward_fn, op)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` through differentiable edges, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_ops(root: Tensor) -> set:
    """Names of every op recorded in the graph below ``root``."""
    return {n.op for n in topological_order(root)}


def backward(root: Tensor) -> None:
    if root.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward() called on a tensor that is not part of a graph")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                     "(only same-shape or scalar operands; use expand())")


def _fit(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _fit(g, a.shape), _fit(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return _fit(g, a.shape), _fit(-g, b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _fit(g * b.data, a.shape), _fit(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    if _DEBUG and np.any(b.data == 0):
        warnings.warn("division by zero produced non-finite values", DivisionByZeroWarning,
                      stacklevel=2)

    def bw(g):
        return _fit(g / b.data, a.shape), _fit(-g * a.data / (b.data * b.data), b.shape)
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise ShapeError("power: exponent must be a Python number")
    p = float(p)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)
    return _make(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input contains non-positive values")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input contains negative values")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def bmm(a, b) -> Tensor:
    """Batched matmul of [N×I×K] by [N×K×J]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
        gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), bw, "bmm")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(t: Tensor, axis):
    if axis is None:
        if t.size == 0:
            raise DomainError("reduction over an empty tensor")
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise ShapeError(f"axis {ax} out of range for rank {t.ndim}")
        ax %= t.ndim
        if t.shape[ax] == 0:
            raise DomainError(f"reduction over empty axis {ax}")
        out.append(ax)
    return tuple(out)


def _count(t: Tensor, axes) -> int:
    if axes is None:
        return t.size
    return int(np.prod([t.shape[a] for a in axes]))


def _regrow(g: np.ndarray, shape: tuple, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    axes = _norm_axis(t, axis)
    out = t.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (t,), lambda g: (_regrow(g, t.shape, axes, keepdims),), "sum")


def reduce_mean(t, axis=None, keepdims=False) -> Tensor:
    t = as_tensor(t)
    axes = _norm_axis(t, axis)
    n = _count(t, axes)
    out = t.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (t,), lambda g: (_regrow(g, t.shape, axes, keepdims) / n,), "mean")


def reduce_var(t, axis=None, keepdims=False) -> Tensor:
    """Population variance (divisor = number of reduced elements)."""
    t = as_tensor(t)
    axes = _norm_axis(t, axis)
    n = _count(t, axes)
    centered = t.data - t.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def bw(g):
        return (_regrow(g, t.shape, axes, keepdims) * (2.0 / n) * centered,)
    return _make(out, (t,), bw, "var")


def reduce(kind: str, t, axis=None, keepdims=False) -> Tensor:
    fn = {"sum": reduce_sum, "mean": reduce_mean, "var": reduce_var}.get(kind)
    if fn is None:
        raise ValueError(f"unknown reduction {kind!r}")
    return fn(t, axis, keepdims)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    src = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (t,), lambda g: (g.reshape(src),), "reshape")


def transpose(t, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(t.data.transpose(axes), (t,), lambda g: (g.transpose(inv),), "transpose")


def expand(t, shape) -> Tensor:
    """Explicit broadcast of size-1 (or missing leading) dims up to ``shape``."""
    t = as_tensor(t)
    shape = tuple(shape)
    src = t.shape
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)
    summed = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(src) if d == 1 and shape[lead + i] != 1)

    def bw(g):
        if summed:
            g = g.sum(axis=summed, keepdims=True)
        return (g.reshape(src),)
    return _make(out, (t,), bw, "expand")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, tuple(ts), bw, "concat")


def take_rows(t, index) -> Tensor:
    """Select rows of a 2-D+ tensor by integer index (gradient scatters back)."""
    t = as_tensor(t)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(t.data)
        np.add.at(out, index, g)
        return (out,)
    return _make(t.data[index], (t,), bw, "take_rows")
