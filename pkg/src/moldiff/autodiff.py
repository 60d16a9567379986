"""Minimal reverse-mode automatic differentiation over numpy arrays.

Training needs exact gradients of the score-matching loss with respect to
every network weight.  Rather than hand-deriving backprop for each layer,
the network code is written against a tiny tape: wrap the parameters in
:class:`Var`, run the ordinary forward expressions, call
:func:`backward` on the scalar loss, and read ``.grad`` off each wrapped
parameter.

The helper functions at the bottom (``exp``, ``concat``, ``gather``, ...)
accept plain ndarrays as well, in which case they compute with numpy and
stay off the tape.  That lets the same forward code serve both training
(Var parameters) and inference (ndarray parameters).

Only what the model needs is implemented: broadcasting elementwise
arithmetic, 2-D matmul, reductions, a few scalar nonlinearities, row
gather/scatter, and concatenation.  The finite-difference suite in the
tests is the correctness arbiter.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node on the tape: a float64 array plus how to push gradients back."""

    __slots__ = ("value", "grad", "_parents")

    # make ndarray operands defer to our reflected operators instead of
    # coercing the Var into an object array
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        # parents: tuple of (Var, vjp) where vjp maps upstream grad ->
        # gradient contribution for that parent.
        self._parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        a, b = self, _as_var(other)
        return Var(a.value + b.value, (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ))

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_var(other)
        return Var(a.value - b.value, (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ))

    def __rsub__(self, other):
        return _as_var(other) - self

    def __mul__(self, other):
        a, b = self, _as_var(other)
        return Var(a.value * b.value, (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_var(other)
        return Var(a.value / b.value, (
            (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / b.value ** 2, b.value.shape)),
        ))

    def __rtruediv__(self, other):
        return _as_var(other) / self

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Var(a.value ** exponent, (
            (a, lambda g: g * exponent * a.value ** (exponent - 1)),
        ))

    def __matmul__(self, other):
        a, b = self, _as_var(other)
        if a.value.ndim > 2 or b.value.ndim > 2:
            raise ValueError("matmul supports 1-D and 2-D operands only")
        out = a.value @ b.value

        def da(g):
            if a.value.ndim == 1 and b.value.ndim == 1:
                return g * b.value
            if b.value.ndim == 1:      # (m,k) @ (k,) -> (m,)
                return np.outer(g, b.value)
            return g @ b.value.T       # (k,) @ (k,n) gives g (n,) -> (k,)

        def db(g):
            if a.value.ndim == 1 and b.value.ndim == 1:
                return g * a.value
            if a.value.ndim == 1:      # (k,) @ (k,n) -> (n,)
                return np.outer(a.value, g)
            return a.value.T @ g       # covers (m,k) @ (k,n) and (m,k) @ (k,)

        return Var(out, ((a, da), (b, db)))

    def __rmatmul__(self, other):
        return _as_var(other) @ self

    # -- reductions and shaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, a.value.shape).copy()
            g2 = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(g2, a.value.shape).copy()
        return Var(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / count

    def reshape(self, *shape):
        a = self
        return Var(a.value.reshape(*shape), ((a, lambda g: g.reshape(a.value.shape)),))

    def item(self) -> float:
        return float(self.value)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def backward(out: Var) -> None:
    """Accumulate d(out)/d(node) into ``node.grad`` for every tape node.

    ``out`` must be scalar-valued.  Iterative topological order, so deep
    graphs do not hit the recursion limit.
    """
    if out.value.size != 1:
        raise ValueError("backward requires a scalar output")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = np.zeros_like(node.value)
    out.grad = np.ones_like(out.value)

    for node in reversed(order):
        g = node.grad
        for parent, vjp in node._parents:
            parent.grad = parent.grad + vjp(g)


# -- dual-mode helpers (Var -> taped, ndarray -> plain numpy) --------------

def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def exp(x):
    if not _is_var(x):
        return np.exp(x)
    out = np.exp(x.value)
    return Var(out, ((x, lambda g: g * out),))


def log(x):
    if not _is_var(x):
        return np.log(x)
    return Var(np.log(x.value), ((x, lambda g: g / x.value),))


def sqrt(x):
    if not _is_var(x):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return Var(out, ((x, lambda g: g * 0.5 / out),))


def tanh(x):
    if not _is_var(x):
        return np.tanh(x)
    out = np.tanh(x.value)
    return Var(out, ((x, lambda g: g * (1.0 - out ** 2)),))


def _softplus_np(x):
    # log(1 + e^x) computed without overflow for large |x|
    return np.logaddexp(0.0, x)


def shifted_softplus(x):
    """softplus(x) - log 2; smooth activation that is zero at zero."""
    if not _is_var(x):
        return _softplus_np(x) - np.log(2.0)
    out = _softplus_np(x.value) - np.log(2.0)
    sig = 1.0 / (1.0 + np.exp(-x.value))
    return Var(out, ((x, lambda g: g * sig),))


def square(x):
    if not _is_var(x):
        return np.square(x)
    return x * x


def concat(parts, axis=0):
    if not _is_var(*parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    vs = [_as_var(p) for p in parts]
    out = np.concatenate([v.value for v in vs], axis=axis)
    sizes = [v.value.shape[axis] for v in vs]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for v, start, stop in zip(vs, offsets[:-1], offsets[1:]):
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(start, stop)
        parents.append((v, lambda g, idx=tuple(idx): g[idx]))
    return Var(out, tuple(parents))


def gather(x, index):
    """Select rows: out[k] = x[index[k]]."""
    index = np.asarray(index, dtype=np.intp)
    if not _is_var(x):
        return np.asarray(x)[index]
    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return out
    return Var(x.value[index], ((x, vjp),))


def segment_sum(x, index, num_segments):
    """Scatter-add rows: out[s] = sum of x[k] with index[k] == s."""
    index = np.asarray(index, dtype=np.intp)
    if not _is_var(x):
        x = np.asarray(x)
        out = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
        np.add.at(out, index, x)
        return out
    out = np.zeros((num_segments,) + x.value.shape[1:], dtype=np.float64)
    np.add.at(out, index, x.value)
    return Var(out, ((x, lambda g: g[index]),))


def value_of(x) -> np.ndarray:
    """Underlying ndarray whether or not `x` is on the tape."""
    return x.value if isinstance(x, Var) else np.asarray(x)
