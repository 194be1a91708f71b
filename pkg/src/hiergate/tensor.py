"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and accumulates into ``.grad``.

Broadcasting is deliberately narrow: binary elementwise ops accept two
tensors of identical shape, or a 0-d tensor against any tensor. Anything
else raises :class:`ShapeError`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    """Invalid use of the computation graph (non-scalar loss, reused graph)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_released")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=5)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- backward ------------------------------------------------------------
    def backward(self) -> None:
        if self.ndim != 0:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError("graph already consumed by backward(); rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor with requires_grad=True")
        order = topological_order(self)
        seed = np.ones((), dtype=np.float64)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f"{node.op} (backward)", g.shape, parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return abs_(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: Array, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        for p in parents:
            if p._released:
                raise GraphError(f"{op}: input belongs to a graph already consumed by backward()")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
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
        if node._released:
            raise GraphError("graph already consumed by backward(); rebuild the forward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result(a.data @ b.data, (a, b), "matmul",
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, W, b) -> Tensor:
    """``x @ W + b`` with ``b`` added to every row."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError("linear", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise ShapeError("linear", W.shape, b.shape)
    return _result(x.data @ W.data + b.data, (x, W, b), "linear",
                   lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def conv1d(x, W, b) -> Tensor:
    """Valid (unpadded, stride 1) 1-D convolution.

    ``x`` is ``[n, c_in, length]``, ``W`` is ``[c_out, c_in, k]``, ``b`` is
    ``[c_out]``; the output is ``[n, c_out, length - k + 1]``.
    """
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 3 or W.ndim != 3 or x.shape[1] != W.shape[1] or W.shape[2] > x.shape[2]:
        raise ShapeError("conv1d", x.shape, W.shape)
    if b.shape != (W.shape[0],):
        raise ShapeError("conv1d", W.shape, b.shape)
    k = W.shape[2]
    # windows[n, c_in, t, j] = x[n, c_in, t + j]
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)
    data = np.einsum("nctj,ocj->not", windows, W.data) + b.data[None, :, None]

    def backward(g):
        gW = np.einsum("not,nctj->ocj", g, windows)
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, :, j:j + g.shape[2]] += np.einsum("not,oc->nct", g, W.data[:, :, j])
        return gx, gW, g.sum(axis=(0, 2))

    return _result(data, (x, W, b), "conv1d", backward)


# -- elementwise unary -------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    return _result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.logaddexp(0.0, x.data), (x,), "softplus",
                   lambda g: (g * _sigmoid(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _result(e, (x,), "exp", lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), "softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (x,), "log_softmax",
                   lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -- reductions and indexing ----------------------------------------------


def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), "sum", backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean", x.shape)
    return mul(sum_(x, axis), 1.0 / n)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(np.asarray(x.data[idx]), (x,), "getitem", backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("stack", shape, t.shape)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, "stack", backward)


def where(cond: Array, a, b) -> Tensor:
    """Pick ``a`` where the constant mask ``cond`` is true, else ``b``."""
    a, b = _pair("where", a, b)
    cond = np.asarray(cond, dtype=bool)
    target = a.shape if a.ndim else b.shape
    if cond.shape != target:
        raise ShapeError("where", cond.shape, target)
    return _result(np.where(cond, a.data, b.data), (a, b), "where",
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                              _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def gate_select(w, on, off) -> Tensor:
    """Row-wise choice between ``on`` and ``off`` driven by per-row weights ``w``.

    The forward value is an exact row selection when ``w`` is 0/1 (no
    arithmetic blending), while the gradient is that of
    ``off + w * (on - off)``, so a straight-through ``w`` still receives
    a learning signal.
    """
    w, on, off = as_tensor(w), as_tensor(on), as_tensor(off)
    if on.shape != off.shape or on.ndim != 2 or w.shape != (on.shape[0],):
        raise ShapeError("gate_select", w.shape, on.shape, off.shape)
    wd = w.data
    if np.all((wd == 0.0) | (wd == 1.0)):
        data = np.where(wd[:, None] == 1.0, on.data, off.data)
    else:
        data = off.data + wd[:, None] * (on.data - off.data)

    def backward(g):
        return ((g * (on.data - off.data)).sum(axis=1), g * wd[:, None], g * (1.0 - wd[:, None]))

    return _result(data, (w, on, off), "gate_select", backward)


def stop_gradient(x) -> Tensor:
    return as_tensor(x).detach()
