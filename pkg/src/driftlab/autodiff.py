"""Array-level reverse-mode differentiation.

A :class:`Var` wraps a numpy array and remembers how it was computed.  Calling
:func:`grad` walks the recorded graph backwards once and returns gradients for
any set of inputs.

Every operation in this module also accepts plain numpy arrays.  When none of
the arguments is a :class:`Var` the numpy result is returned directly and no
graph is recorded, so model code written against these functions runs at
numpy speed outside of differentiation.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "grad")

    __array_priority__ = 100.0

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        # (parent, vector-Jacobian product) pairs
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def is_var(x):
    return isinstance(x, Var)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _any_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(val, *pairs):
    parents = tuple((p, fn) for p, fn in pairs if isinstance(p, Var))
    return Var(val, parents)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    if not _any_var(a, b):
        return np.add(a, b)
    av, bv = value(a), value(b)
    out = av + bv
    return _node(out, (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    if not _any_var(a, b):
        return np.subtract(a, b)
    av, bv = value(a), value(b)
    return _node(av - bv, (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    if not _any_var(a, b):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    return _node(av * bv, (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    if not _any_var(a, b):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    return _node(out, (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    if not is_var(a):
        return np.negative(a)
    return _node(-a.value, (a, lambda g: -g))


def power(a, p):
    """``a ** p`` for a constant exponent."""
    if not is_var(a):
        return np.power(a, p)
    av = a.value
    return _node(av ** p, (a, lambda g: g * p * av ** (p - 1)))


def square(a):
    if not is_var(a):
        return np.square(a)
    av = a.value
    return _node(av * av, (a, lambda g: 2.0 * g * av))


def matmul(a, b):
    """Batched matrix product with numpy ``@`` semantics (ndim >= 2)."""
    if not _any_var(a, b):
        return np.matmul(a, b)
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    out = av @ bv
    return _node(out,
                 (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
                 (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    mask = np.asarray(mask, dtype=bool)
    if not _any_var(a, b):
        return np.where(mask, a, b)
    av, bv = value(a), value(b)
    return _node(np.where(mask, av, bv),
                 (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), av.shape)),
                 (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), bv.shape)))


def arctan2(y, x):
    if not _any_var(y, x):
        return np.arctan2(y, x)
    yv, xv = value(y), value(x)
    r2 = xv * xv + yv * yv
    return _node(np.arctan2(yv, xv),
                 (y, lambda g: _unbroadcast(g * xv / r2, yv.shape)),
                 (x, lambda g: _unbroadcast(-g * yv / r2, xv.shape)))


# ---------------------------------------------------------------------------
# elementwise unary ops


def tanh(a):
    if not is_var(a):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _node(out, (a, lambda g: g * (1.0 - out * out)))


def exp(a):
    if not is_var(a):
        return np.exp(a)
    out = np.exp(a.value)
    return _node(out, (a, lambda g: g * out))


def log(a):
    if not is_var(a):
        return np.log(a)
    av = a.value
    return _node(np.log(av), (a, lambda g: g / av))


def log1p(a):
    if not is_var(a):
        return np.log1p(a)
    av = a.value
    return _node(np.log1p(av), (a, lambda g: g / (1.0 + av)))


def sqrt(a):
    if not is_var(a):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return _node(out, (a, lambda g: 0.5 * g / out))


def sin(a):
    if not is_var(a):
        return np.sin(a)
    av = a.value
    return _node(np.sin(av), (a, lambda g: g * np.cos(av)))


def cos(a):
    if not is_var(a):
        return np.cos(a)
    av = a.value
    return _node(np.cos(av), (a, lambda g: -g * np.sin(av)))


def tan(a):
    if not is_var(a):
        return np.tan(a)
    av = a.value
    c = np.cos(av)
    return _node(np.tan(av), (a, lambda g: g / (c * c)))


def abs_(a):
    if not is_var(a):
        return np.abs(a)
    av = a.value
    return _node(np.abs(av), (a, lambda g: g * np.sign(av)))


def softplus(a):
    if not is_var(a):
        return np.logaddexp(0.0, a)
    av = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _node(np.logaddexp(0.0, av), (a, lambda g: g * sig))


def maximum(a, c):
    """``max(a, c)`` for a constant floor ``c``."""
    if not is_var(a):
        return np.maximum(a, c)
    av = a.value
    mask = av >= c
    return _node(np.maximum(av, c), (a, lambda g: np.where(mask, g, 0.0)))


# ---------------------------------------------------------------------------
# shape ops and reductions


def sum_(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.value

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _node(np.sum(av, axis=axis, keepdims=keepdims), (a, vjp))


def reshape(a, shape):
    if not is_var(a):
        return np.reshape(a, shape)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def swapaxes(a, i, j):
    if not is_var(a):
        return np.swapaxes(a, i, j)
    return _node(np.swapaxes(a.value, i, j), (a, lambda g: np.swapaxes(g, i, j)))


def expand_dims(a, axis):
    if not is_var(a):
        return np.expand_dims(a, axis)
    return _node(np.expand_dims(a.value, axis), (a, lambda g: np.squeeze(g, axis)))


def getitem(a, idx):
    if not is_var(a):
        return np.asarray(a)[idx]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _node(av[idx], (a, vjp))


def stack(xs, axis=0):
    xs = list(xs)
    if not _any_var(*xs):
        return np.stack(xs, axis=axis)
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    pairs = []
    for n, x in enumerate(xs):
        pairs.append((x, lambda g, n=n: np.take(g, n, axis=axis)))
    return _node(out, *pairs)


def concatenate(xs, axis=0):
    xs = list(xs)
    if not _any_var(*xs):
        return np.concatenate(xs, axis=axis)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for n, x in enumerate(xs):
        lo, hi = bounds[n], bounds[n + 1]
        pairs.append((x, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return _node(out, *pairs)


def tril(a, k=0):
    """Lower-triangular part over the last two axes."""
    if not is_var(a):
        return np.tril(a, k)
    mask = np.tril(np.ones(a.value.shape[-2:]), k)
    return mul(a, mask)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def grad(output, wrt, seed=None):
    """Gradients of ``output`` with respect to each Var in ``wrt``.

    ``output`` is usually a scalar; for a non-scalar output ``seed`` gives the
    cotangent (defaults to ones, i.e. the gradient of ``output.sum()``).
    Inputs that do not influence ``output`` get a zero gradient.
    """
    if not is_var(output):
        return [np.zeros_like(w.value) for w in wrt]
    order = _toposort(output)
    grads = {id(output): np.ones_like(output.value) if seed is None
             else np.broadcast_to(np.asarray(seed, dtype=float), output.value.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    out = []
    for w in wrt:
        out.append(np.array(w.grad, dtype=float) if w.grad is not None
                   else np.zeros_like(w.value))
    for node in order:
        node.grad = None
    return out
