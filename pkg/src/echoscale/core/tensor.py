"""Tensor with hand-written backward rules.

Every differentiable op builds its output with :func:`make`, passing the
parents and a closure mapping the output gradient to one gradient per
parent. ``Tensor.backward`` walks the graph once in reverse topological
order. There is no operator tracing beyond that: each op owns its rule.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_grad_enabled = True


def default_dtype():
    """dtype selected by ``AVS_PRECISION`` (``f32`` unless set to ``f64``)."""
    key = os.environ.get("AVS_PRECISION", "f32").lower()
    if key not in _PRECISIONS:
        raise ValueError(f"AVS_PRECISION must be one of {sorted(_PRECISIONS)}, got {key!r}")
    return _PRECISIONS[key]


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(default_dtype())
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- backprop ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- arithmetic sugar -------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Param(Tensor):
    """Learnable leaf tensor; ``grad`` accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data


def tensor(x, requires_grad=False, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad, dtype=dtype)


def _topo_order(root):
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
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make(data, parents, backward):
    """Wrap ``data`` as the output of an op over ``parents``."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._prev = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise binary ---------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return make(out, (a, b), bw)


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    p = float(p)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return make(out, (a,), bw)


def maximum(a, b):
    a, b = _pair(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return make(np.where(pick_a, a.data, b.data), (a, b), bw)


def minimum(a, b):
    a, b = _pair(a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return make(np.where(pick_a, a.data, b.data), (a, b), bw)


def matmul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make(a.data @ b.data, (a, b), bw)


# -- elementwise unary ----------------------------------------------------
def exp(x):
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,))


def log(x):
    return make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    """Square root whose gradient is taken as 0 where the output is 0."""
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)
    return make(out, (x,), lambda g: (np.where(out > 0, g * 0.5 / safe, 0.0).astype(out.dtype),))


def sin(x):
    return make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    return make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def abs_(x):
    return make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x):
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = _sigmoid(x.data)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    d = x.data
    out = np.logaddexp(0.0, d).astype(d.dtype, copy=False)
    return make(out, (x,), lambda g: (g * _sigmoid(d),))


def clip(x, lo=None, hi=None):
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return make(out, (x,), lambda g: (g * inside,))


def _sigmoid(d):
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- reductions and shape -------------------------------------------------
def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    if isinstance(idx, Tensor):
        idx = idx.data

    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make(x.data[idx], (x,), bw)


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is Ellipsis or i is None or isinstance(i, (int, slice, np.integer)) for i in items)


def concat(tensors, axis=0):
    tensors = [tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis=0):
    tensors = [tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def broadcast_to(x, shape):
    return make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (unbroadcast(g, x.shape),))


def where(cond, a, b):
    """Select from ``a`` where the constant mask ``cond`` holds, else ``b``."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return unbroadcast(np.where(cond, g, 0), a.shape), unbroadcast(np.where(cond, 0, g), b.shape)

    return make(np.where(cond, a.data, b.data), (a, b), bw)
