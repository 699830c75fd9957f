"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on tensors that require gradients records its parents and
a closure mapping the output gradient to parent gradients.  ``backward``
walks that record once, in reverse topological order, and then releases
it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeMismatch

_GRAD_ENABLED = True
_DTYPE = np.dtype(np.float64)  # the engine works in double precision only

ARCCOS_DELTA = 1e-12


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) else data.astype(_DTYPE, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, params: Iterable["Tensor"] | None = None):
        backward(self, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes do not broadcast", a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p

    def fn(g):
        return (g * p * a.data ** (p - 1),)

    return _result(out, (a,), fn)


def square(a) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        return (2.0 * g * a.data,)

    return _result(a.data * a.data, (a,), fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        return (0.5 * g / out,)

    return _result(out, (a,), fn)


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def fn(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, a.data / safe, 0.0),)

    return _result(out, (a,), fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def fn(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), fn)


def tabs(a) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), fn)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        return (g * np.cos(a.data),)

    return _result(np.sin(a.data), (a,), fn)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        return (-g * np.sin(a.data),)

    return _result(np.cos(a.data), (a,), fn)


def arccos_clamped(a, delta: float = ARCCOS_DELTA) -> Tensor:
    """arccos of the input clipped to [-1 + delta, 1 - delta]; the derivative uses the clipped value."""
    a = as_tensor(a)
    xc = np.clip(a.data, -1.0 + delta, 1.0 - delta)

    def fn(g):
        return (-g / np.sqrt(1.0 - xc * xc),)

    return _result(np.arccos(xc), (a,), fn)


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    _broadcast_shape(y, x, "atan2")
    r2 = x.data * x.data + y.data * y.data

    def fn(g):
        gy = _unbroadcast(g * x.data / r2, y.shape) if y.requires_grad else None
        gx = _unbroadcast(-g * y.data / r2, x.shape) if x.requires_grad else None
        return gy, gx

    return _result(np.arctan2(y.data, x.data), (y, x), fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands with at least 2 dims", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul: inner dimensions differ", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch("matmul: batch dimensions do not broadcast", a.shape, b.shape) from None

    def fn(g):
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            # (..., M, K) @ (K, N): fold the batch into rows
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        elif a.ndim == 2 and b.ndim > 2:
            # (M, K) @ (..., K, N): a fixed operator applied to a batch
            if a.requires_grad:
                lead = list(range(g.ndim - 2))
                ga = np.tensordot(g, b.data, axes=(lead + [g.ndim - 1], lead + [b.ndim - 1]))
            if b.requires_grad:
                gb = np.matmul(a.data.T, g)
        else:
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape to {tuple(shape)}", a.shape) from None

    def fn(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), fn)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def fn(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), fn)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(idx)

    def fn(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: incompatible shapes", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, ts, fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch("stack: incompatible shapes", *[t.shape for t in ts]) from None

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, ts, fn)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The tape is consumed: intermediate nodes drop their parents and closures.
    Leaves listed in ``params`` but not reached by the graph get zero grads.
    """
    if loss.size != 1:
        raise ShapeMismatch("backward needs a scalar loss", loss.shape)
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    if loss._parents == () and loss._backward is None and loss.grad is not None:
        raise RuntimeError("tape already consumed by an earlier backward pass")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
    if loss.grad is None:
        loss.grad = np.ones(loss.shape, dtype=loss.data.dtype)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros(p.shape, dtype=p.data.dtype)
