"""Dense linear algebra and matrix-level reverse-mode automatic differentiation.

Values are float64 numpy arrays. A :class:`Node` wraps a value and, when it
depends on a trainable leaf, the vector-Jacobian product that maps an upstream
gradient onto its parents. :func:`backward` walks the graph in reverse
topological order and adds the result into each leaf's ``grad``. Gradients are
never reset implicitly; call :func:`zero_grad` between steps.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .errors import DimensionMismatch, NotPositiveDefinite

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_JITTER = 1e-6
SYMMETRY_TOL = 1e-9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values only; nothing created inside the block records parents."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


def param(value, name=None) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def make_op(value, parents, vjp) -> Node:
    """Record a custom operation; ``vjp(g)`` returns one gradient per parent."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, requires_grad=True)
    return Node(value)


_make = make_op


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def expm1(a) -> Node:
    """exp(a) - 1, accurate for small a."""
    a = as_node(a)
    av = a.value
    return _make(np.expm1(av), (a,), lambda g: (g * np.exp(av),))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def affine(x, w, b, activation=None) -> Node:
    """x @ w + b, optionally followed by tanh, as one graph node."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    xv, wv = x.value, w.value
    out = xv @ wv + b.value
    if activation == "tanh":
        out = np.tanh(out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")

    def vjp(g):
        if activation == "tanh":
            g = g * (1.0 - out * out)
        if xv.ndim == 1:
            return g @ wv.T, np.outer(xv, g), g
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), vjp)


def add_n(nodes: Sequence) -> Node:
    nodes = [as_node(n) for n in nodes]
    total = nodes[0].value.copy()
    for n in nodes[1:]:
        total = total + n.value
    return _make(total, tuple(nodes), lambda g: (g,) * len(nodes))


# shape and reduction ---------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 1:
            ga = bv @ g if bv.ndim == 2 else g * bv
        elif bv.ndim == 1:
            ga = np.outer(g, bv)
        else:
            ga = g @ bv.T
        if bv.ndim == 1:
            gb = av.T @ g if av.ndim == 2 else g * av
        elif av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.T @ g
        return ga, gb

    return _make(av @ bv, (a, b), vjp)


def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(a, index) -> Node:
    a = as_node(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in parts)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), vjp)


def concat(nodes: Sequence, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(nodes: Sequence, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _make(np.stack([n.value for n in nodes], axis=axis), tuple(nodes), vjp)


# linear algebra --------------------------------------------------------------

def symmetrize(a):
    """(A + A^T) / 2; differentiable when given a node."""
    if isinstance(a, Node):
        return (a + transpose(a)) * 0.5
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + a.T)


def cholesky(a, jitter: float | None = None) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    The input is symmetrized first. With ``jitter`` set, a failed factorization
    is retried once on ``a + jitter * I`` before giving up.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    a = symmetrize(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if jitter is None:
            raise NotPositiveDefinite("non-positive pivot in Cholesky factorization") from None
    try:
        return np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"non-positive pivot in Cholesky factorization (jitter {jitter:g} applied)") from None


def solve(a, b) -> Node:
    """X with A X = B; differentiable in both A and B."""
    a, b = as_node(a), as_node(b)
    av = a.value
    x = np.linalg.solve(av, b.value)

    def vjp(g):
        gb = np.linalg.solve(av.T, g)
        ga = -(gb @ x.T) if x.ndim == 2 else -np.outer(gb, x)
        return ga, gb

    return _make(x, (a, b), vjp)


def gaussian_logpdf(x, mean, cov) -> Node:
    """log N(x; mean, cov) for a single d-dimensional point.

    The gradient with respect to ``cov`` is the symmetric one,
    ``-1/2 (S^-1 - S^-1 r r^T S^-1)``.
    """
    x, mean, cov = as_node(x), as_node(mean), as_node(cov)
    r = x.value - mean.value
    d = r.shape[0]
    if mean.shape != (d,) or cov.shape != (d, d):
        raise DimensionMismatch(f"x {x.shape}, mean {mean.shape}, cov {cov.shape}")
    chol = cholesky(cov.value)
    alpha = cho_solve((chol, True), r)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * (d * LOG_2PI + logdet + r @ alpha)

    def vjp(g):
        s_inv = cho_solve((chol, True), np.eye(d))
        gcov = -0.5 * g * (s_inv - np.outer(alpha, alpha))
        return -g * alpha, g * alpha, gcov

    return _make(out, (x, mean, cov), vjp)


@dataclass
class GaussianDiag:
    """Diagonal Gaussian given by mean and log-variance (arrays or nodes)."""

    mean: Node | np.ndarray
    logvar: Node | np.ndarray

    @property
    def dim(self) -> int:
        return value_of(self.mean).shape[0]

    @classmethod
    def standard(cls, d: int) -> "GaussianDiag":
        return cls(np.zeros(d), np.zeros(d))


# graph traversal -------------------------------------------------------------

def _topo_order(seed: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(seed, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(seed: Node) -> None:
    """Accumulate d(seed)/d(leaf) into every reachable leaf's ``grad``."""
    if seed.value.size != 1:
        raise DimensionMismatch(f"backward needs a scalar seed, got shape {seed.shape}")
    if not seed.requires_grad:
        return
    grads = {id(seed): np.ones_like(seed.value)}
    for node in reversed(_topo_order(seed)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(leaves: Iterable[Node]) -> None:
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.value)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    out = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = float(f(theta.copy()))
        theta[i] = orig - h
        fm = float(f(theta.copy()))
        theta[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out
