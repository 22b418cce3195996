"""Reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the velocity-field MLP and the training
objectives compose: elementwise arithmetic, matrix products, smooth
activations, reductions, slicing, and the clipped-minimum used by the
surrogate objective. Gradients flow only through ``Var`` nodes; plain
arrays and Python scalars are constants.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def value_of(x):
    """Underlying ndarray of a Var, or the input coerced to float64."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Var:
    """Array node on a reverse-mode tape.

    Arithmetic with plain arrays/scalars lifts them as constants. Call
    ``backward()`` on a scalar-valued node to populate ``grad`` on every
    node it depends on.
    """

    __slots__ = ("value", "grad", "_parents", "_vjps")

    # Make ndarray <op> Var dispatch to our reflected methods instead of
    # numpy coercing the Var into an object array.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor.

        ``self`` must hold a single scalar. Uses an iterative topological
        sort so deep chains (long rollouts) do not hit the recursion limit.
        """
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = np.zeros_like(node.value)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            for parent, vjp in zip(node._parents, node._vjps):
                parent.grad = parent.grad + vjp(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        a, b = self.value, value_of(other)
        out = a + b
        if isinstance(other, Var):
            return Var(out, (self, other),
                       (lambda g: _unbroadcast(g, a.shape),
                        lambda g: _unbroadcast(g, b.shape)))
        return Var(out, (self,), (lambda g: _unbroadcast(g, a.shape),))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        a, b = self.value, value_of(other)
        out = a - b
        if isinstance(other, Var):
            return Var(out, (self, other),
                       (lambda g: _unbroadcast(g, a.shape),
                        lambda g: _unbroadcast(-g, b.shape)))
        return Var(out, (self,), (lambda g: _unbroadcast(g, a.shape),))

    def __rsub__(self, other):
        b = value_of(other)
        return Var(b - self.value, (self,),
                   (lambda g: _unbroadcast(-g, self.value.shape),))

    def __mul__(self, other):
        a, b = self.value, value_of(other)
        out = a * b
        if isinstance(other, Var):
            return Var(out, (self, other),
                       (lambda g: _unbroadcast(g * b, a.shape),
                        lambda g: _unbroadcast(g * a, b.shape)))
        return Var(out, (self,), (lambda g: _unbroadcast(g * b, a.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self.value, value_of(other)
        out = a / b
        if isinstance(other, Var):
            return Var(out, (self, other),
                       (lambda g: _unbroadcast(g / b, a.shape),
                        lambda g: _unbroadcast(-g * a / (b * b), b.shape)))
        return Var(out, (self,), (lambda g: _unbroadcast(g / b, a.shape),))

    def __rtruediv__(self, other):
        a = value_of(other)
        b = self.value
        return Var(a / b, (self,),
                   (lambda g: _unbroadcast(-g * a / (b * b), b.shape),))

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("Var ** exponent supports scalar exponents only")
        x = self.value
        out = x ** exponent
        return Var(out, (self,),
                   (lambda g: g * exponent * x ** (exponent - 1),))

    # -- matrix products ----------------------------------------------------

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    # -- nonlinearities -----------------------------------------------------

    def tanh(self):
        y = np.tanh(self.value)
        return Var(y, (self,), (lambda g: g * (1.0 - y * y),))

    def softplus(self):
        x = self.value
        return Var(np.logaddexp(0.0, x), (self,),
                   (lambda g: g * _sigmoid(x),))

    def exp(self):
        y = np.exp(self.value)
        return Var(y, (self,), (lambda g: g * y,))

    def log(self):
        x = self.value
        return Var(np.log(x), (self,), (lambda g: g / x,))

    # -- shape and reductions -----------------------------------------------

    def __getitem__(self, key):
        x = self.value

        def vjp(g):
            acc = np.zeros_like(x)
            np.add.at(acc, key, g)
            return acc

        return Var(x[key], (self,), (vjp,))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.value.shape
        return Var(self.value.reshape(shape), (self,),
                   (lambda g: g.reshape(orig),))

    def sum(self, axis=None, keepdims=False):
        x = self.value
        out = x.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, x.shape).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape).copy()

        return Var(out, (self,), (vjp,))

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)


def _matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        if av.ndim == 1:
            vjps.append(lambda g: g @ bv.T if bv.ndim == 2 else g * bv)
        else:
            vjps.append(lambda g: np.outer(g, bv) if bv.ndim == 1 else g @ bv.T)
    if isinstance(b, Var):
        parents.append(b)
        if av.ndim == 1:
            vjps.append(lambda g: np.outer(av, g) if bv.ndim == 2 else g * av)
        else:
            vjps.append(lambda g: av.T @ g)
    return Var(out, tuple(parents), tuple(vjps))


def minimum(a, b):
    """Elementwise min; gradient follows the smaller branch (ties go to ``a``)."""
    av, bv = value_of(a), value_of(b)
    out = np.minimum(av, bv)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return out
    take_a = av <= bv
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g * take_a, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g * ~take_a, bv.shape))
    return Var(out, tuple(parents), tuple(vjps))


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is 1 inside the range (inclusive), 0 outside."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not isinstance(x, Var):
        return out
    inside = (xv >= lo) & (xv <= hi)
    return Var(out, (x,), (lambda g: g * inside,))


def scalar_value(x) -> float:
    """Extract a Python float from a scalar Var or array."""
    v = value_of(x)
    if v.size != 1:
        raise ValueError("expected a scalar")
    return float(v)
