"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op accepts plain arrays or :class:`Var` instances.  When no argument is a
``Var`` the op returns a plain ndarray and records nothing, so model code can
be written once and reused for both sampling and training::

    w = Var(np.ones(3))
    y = ad.sum(ad.exp(w) * x)
    grads = backward(y, [w])

Subgradients: ``max`` routes the gradient to the lowest index attaining the
maximum; ``clip_min`` passes gradient only where the input exceeds the floor.
"""
import numpy as np


class Var:
    """A node in the computation graph: value plus parents with their VJPs."""

    __slots__ = ("data", "parents")
    __array_priority__ = 100

    def __init__(self, data, parents=()):
        self.data = np.asarray(data, dtype=float)
        self.parents = parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value(x):
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tracked(*args):
    return any(isinstance(a, Var) for a in args)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(out, *pairs):
    """Wrap ``out`` as a Var whose parents are the Var entries in ``pairs``."""
    parents = tuple((p, fn) for p, fn in pairs if isinstance(p, Var))
    return Var(out, parents)


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _tracked(a, b):
        return out
    return _node(out,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not _tracked(a, b):
        return out
    return _node(out,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _tracked(a, b):
        return out
    return _node(out,
                 (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    if not _tracked(a, b):
        return out
    return _node(out,
                 (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D and ``a`` may carry leading batch axes."""
    av, bv = value(a), value(b)
    out = av @ bv
    if not _tracked(a, b):
        return out

    def grad_b(g):
        a2 = av.reshape(-1, av.shape[-1])
        return a2.T @ g.reshape(-1, g.shape[-1])

    return _node(out, (a, lambda g: g @ bv.T), (b, grad_b))


def exp(x):
    out = np.exp(value(x))
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g * out))


def log(x):
    xv = value(x)
    with np.errstate(divide="ignore"):
        out = np.log(xv)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g / xv))


def tanh(x):
    out = np.tanh(value(x))
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g * (1.0 - out * out)))


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0.0)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g * (xv > 0)))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def softplus(x):
    xv = value(x)
    out = np.logaddexp(0.0, xv)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g * _sigmoid(xv)))


def silu(x):
    xv = value(x)
    s = _sigmoid(xv)
    out = xv * s
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g * (s + xv * s * (1.0 - s))))


def clip_min(x, floor):
    """``max(x, floor)`` for a constant ``floor``."""
    xv = value(x)
    out = np.maximum(xv, floor)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g * (xv > floor)))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not _tracked(x):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape)

    return _node(out, (x, vjp))


def mean(x, axis=None, keepdims=False):
    n = value(x).size if axis is None else np.prod(
        [value(x).shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) / float(n)


def max(x, axis=-1, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = value(x)
    idx = np.expand_dims(np.argmax(xv, axis=axis), axis)
    out = np.take_along_axis(xv, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    if not _tracked(x):
        return out

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(xv.shape)
        np.put_along_axis(full, idx, g, axis=axis)
        return full

    return _node(out, (x, vjp))


def reshape(x, shape):
    xv = value(x)
    out = xv.reshape(shape)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: g.reshape(xv.shape)))


def swapaxes(x, a1, a2):
    out = np.swapaxes(value(x), a1, a2)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: np.swapaxes(g, a1, a2)))


def getitem(x, idx):
    xv = value(x)
    out = xv[idx]
    if not _tracked(x):
        return out

    def vjp(g):
        full = np.zeros(xv.shape)
        np.add.at(full, idx, g)
        return full

    return _node(out, (x, vjp))


def take_along_axis(x, idx, axis):
    xv = value(x)
    out = np.take_along_axis(xv, idx, axis=axis)
    if not _tracked(x):
        return out

    def vjp(g):
        full = np.zeros(xv.shape)
        # idx may repeat along the gathered axis; accumulate, do not overwrite
        shape = np.broadcast_shapes(idx.shape, g.shape)
        grids = list(np.indices(shape, sparse=True))
        grids[axis % xv.ndim] = np.broadcast_to(idx, shape)
        np.add.at(full, tuple(grids), np.broadcast_to(g, shape))
        return full

    return _node(out, (x, vjp))


def where(cond, a, b):
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    if not _tracked(a, b):
        return out
    return _node(out,
                 (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def softmax(x, axis=-1):
    xv = value(x)
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(x):
        return out
    return _node(out, (x, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True))))


def log_softmax(x, axis=-1):
    xv = value(x)
    m = np.max(xv, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xv - m).sum(axis=axis, keepdims=True))
    out = xv - lse
    if not _tracked(x):
        return out
    sm = np.exp(out)
    return _node(out, (x, lambda g: g - sm * g.sum(axis=axis, keepdims=True)))


def backward(output, wrt):
    """Gradients of scalar ``output`` with respect to each Var in ``wrt``."""
    if not isinstance(output, Var):
        return [np.zeros_like(w.data) for w in wrt]
    if output.data.size != 1:
        raise ValueError("backward needs a scalar output")

    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    targets = {id(w) for w in wrt}
    result = {}
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in targets:
            result[id(node)] = g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.array(contrib, dtype=float)
    return [result.get(id(w), np.zeros_like(w.data)) for w in wrt]
