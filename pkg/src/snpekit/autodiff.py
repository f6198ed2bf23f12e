"""Minimal reverse-mode differentiation tape over float64 numpy arrays.

Every trainable model in this package expresses its scalar loss as a
composition of the ops below; :meth:`Tensor.backward` then accumulates
vector-Jacobian products back to the leaves. The contract is agreement with
central finite differences (see ``snpekit.optim.finite_difference_gradient``),
not generality: there is no higher-order differentiation, no GPU, and ops
cover exactly what the networks here need.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "power",
    "square",
    "sqrt",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "tsum",
    "tmean",
    "logsumexp",
    "stack",
    "concat",
    "take_slice",
    "reshape",
    "triangular_matrix",
]


class Tensor:
    """A node on the tape: a float64 ndarray plus edges to its inputs."""

    __slots__ = ("value", "grad", "_edges")

    def __init__(self, value, edges=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._edges = edges

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # Operator sugar; mixed Tensor/array operands are allowed.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take_slice(self, key)

    def backward(self):
        """Accumulate gradients of this (scalar) node into the whole tape."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar root")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._edges:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def _toposort(root):
    # Iterative postorder DFS: inputs of a node always precede it in `order`.
    # Nodes are marked when expanded (not when queued), otherwise a shared
    # input queued by one consumer could be emitted after another consumer.
    order = []
    seen = set()
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
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def constant(value):
    """Wrap an array as a leafless node (no gradient flows into it)."""
    return Tensor(value)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.value + b.value,
        edges=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.value - b.value,
        edges=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def neg(a):
    a = _as_tensor(a)
    return Tensor(-a.value, edges=((a, lambda g: -g),))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    return Tensor(
        av * bv,
        edges=(
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return Tensor(
        out,
        edges=(
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
        ),
    )


def matmul(a, b):
    """2-D matrix product (B, n) @ (n, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    return Tensor(
        av @ bv,
        edges=(
            (a, lambda g: g @ bv.T),
            (b, lambda g: av.T @ g),
        ),
    )


def power(a, p):
    a = _as_tensor(a)
    av = a.value
    return Tensor(av**p, edges=((a, lambda g: g * p * av ** (p - 1)),))


def square(a):
    a = _as_tensor(a)
    av = a.value
    return Tensor(av * av, edges=((a, lambda g: g * 2.0 * av),))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, edges=((a, lambda g: g * 0.5 / out),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, edges=((a, lambda g: g * out),))


def log(a):
    a = _as_tensor(a)
    return Tensor(np.log(a.value), edges=((a, lambda g: g / a.value),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, edges=((a, lambda g: g * (1.0 - out * out)),))


def sigmoid(a):
    a = _as_tensor(a)
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out, edges=((a, lambda g: g * out * (1.0 - out)),))


def softplus(a):
    """log(1 + e^x), computed without overflow; derivative is the sigmoid."""
    a = _as_tensor(a)
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(av, -500, 500)))
    return Tensor(out, edges=((a, lambda g: g * sig),))


def relu(a):
    a = _as_tensor(a)
    av = a.value
    mask = av > 0
    return Tensor(np.where(mask, av, 0.0), edges=((a, lambda g: g * mask),))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    av = a.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return Tensor(av.sum(axis=axis, keepdims=keepdims), edges=((a, vjp),))


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    """Stable log-sum-exp; backward distributes the softmax."""
    a = _as_tensor(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    es = np.exp(av - m)
    s = es.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = es / s

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * soft

    return Tensor(out if keepdims else np.squeeze(out, axis=axis), edges=((a, vjp),))


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor(out, edges=tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.value.shape[axis] for t in tensors])

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(out, edges=tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def take_slice(a, key):
    """Static indexing (ints/slices); backward scatters into zeros."""
    a = _as_tensor(a)
    av = a.value
    out = av[key]

    def vjp(g):
        z = np.zeros_like(av)
        z[key] = g
        return z

    return Tensor(out, edges=((a, vjp),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.value.shape
    return Tensor(a.value.reshape(shape), edges=((a, lambda g: g.reshape(old)),))


def triangular_matrix(diag, offdiag, dim, upper=True):
    """Assemble (..., dim, dim) triangular matrices from flat parts.

    `diag` has shape (..., dim) and lands on the main diagonal; `offdiag` has
    shape (..., dim*(dim-1)//2) and fills the strict upper (or lower) triangle
    in row-major order.
    """
    diag, offdiag = _as_tensor(diag), _as_tensor(offdiag)
    lead = diag.value.shape[:-1]
    ii = np.arange(dim)
    if upper:
        oi, oj = np.triu_indices(dim, k=1)
    else:
        oi, oj = np.tril_indices(dim, k=-1)
    out = np.zeros(lead + (dim, dim))
    out[..., ii, ii] = diag.value
    out[..., oi, oj] = offdiag.value
    return Tensor(
        out,
        edges=(
            (diag, lambda g: g[..., ii, ii]),
            (offdiag, lambda g: g[..., oi, oj]),
        ),
    )
