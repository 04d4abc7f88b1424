"""Dense float64 tensors, a reverse-mode tape, resampling and PSD square roots.

Tensors are plain ``numpy.ndarray`` values in float64. Anything that needs a
gradient is wrapped in a :class:`Var`, a node on a :class:`Tape`. Every op in
this module accepts either kind of input: with no ``Var`` among its arguments
it returns an ndarray and records nothing, otherwise it returns a ``Var`` on
the shared tape.

    tape = Tape()
    x = tape.track(np.array([1.0, -2.0, 3.0]))
    loss = sum_(square(x))
    backward_grad(loss, x)   # -> array([ 2., -4.,  6.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DimensionError, NonFiniteError, NotPSDError, UsageError

Array = np.ndarray
ArrayLike = Union[Array, "Var", float]

PSD_TOL = 1e-8


class Tape:
    """Append-only record of differentiable operations.

    A tape is owned by one computation (one sampling run, one training step);
    node ids are list positions, so parents always precede children.
    """

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def track(self, value, name: str = "leaf") -> Var:
        """Register ``value`` as a differentiable leaf."""
        return self._push(name, (), _finite(np.array(value, dtype=np.float64), name), None)

    def _push(self, op, parents, value, vjp) -> Var:
        node = Var(self, len(self.nodes), op, parents, value, vjp)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """A tape node: op tag, parent ids, cached forward value, local VJP rule."""

    __slots__ = ("tape", "id", "op", "parents", "value", "vjp")
    __array_ufunc__ = None  # ndarray (op) Var defers to Var

    def __init__(self, tape, id_, op, parents, value, vjp):
        self.tape = tape
        self.id = id_
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def parent_ids(self) -> tuple[int, ...]:
        return tuple(p.id for p in self.parents if p is not None)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.op!r}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def value_of(x) -> Array:
    """The numeric value of ``x`` whether or not it is tracked."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_tracked(x) -> bool:
    return isinstance(x, Var)


def _finite(value: Array, op: str) -> Array:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return value


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise UsageError("operands live on different tapes")
            tape = x.tape
    return tape


def _op(op: str, inputs: Sequence, value: Array, vjp: Callable) -> ArrayLike:
    """Wrap a forward result, recording it when any input is tracked."""
    value = _finite(value, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(x if isinstance(x, Var) else None for x in inputs)
    return tape._push(op, parents, value, vjp)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _op("add", (a, b), av + bv,
               lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _op("sub", (a, b), av - bv,
               lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _op("mul", (a, b), av * bv,
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(x):
    xv = value_of(x)
    return _op("square", (x,), xv * xv, lambda g: (2.0 * xv * g,))


def sqrt(x):
    xv = value_of(x)
    if np.any(xv < 0):
        raise DimensionError("sqrt of a negative value")
    out = np.sqrt(xv)
    return _op("sqrt", (x,), out, lambda g: (g / (2.0 * out),))


def tanh(x):
    out = np.tanh(value_of(x))
    return _op("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def exp(x):
    out = np.exp(value_of(x))
    return _op("exp", (x,), out, lambda g: (g * out,))


# --- reductions and shape -------------------------------------------------


def sum_(x, axis: int | None = None, keepdims: bool = False):
    xv = value_of(x)
    out = np.asarray(xv.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _op("sum", (x,), out, vjp)


def mean(x, axis: int | None = None, keepdims: bool = False):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    xv = value_of(x)
    return _op("reshape", (x,), xv.reshape(shape), lambda g: (g.reshape(xv.shape),))


def transpose(x):
    xv = value_of(x)
    return _op("transpose", (x,), xv.T.copy(), lambda g: (g.T,))


def getitem(x, idx):
    xv = value_of(x)

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return _op("getitem", (x,), np.array(xv[idx], dtype=np.float64), vjp)


def concat(xs: Sequence, axis: int = 0):
    vals = [value_of(x) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(vals)))

    return _op("concat", tuple(xs), np.concatenate(vals, axis=axis), vjp)


# --- linear algebra -------------------------------------------------------


def matmul(a, b):
    """Matrix product; 2-D operands only."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"inner extents differ: {av.shape} @ {bv.shape}")
    return _op("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def softmax_rows(x, scale: float = 1.0):
    """Row-wise softmax of ``scale * x``, stabilised by the row maximum."""
    if scale <= 0:
        raise DimensionError("softmax scale must be positive")
    xv = value_of(x)
    if xv.ndim != 2 or xv.shape[1] < 1:
        raise DimensionError(f"softmax_rows needs an m x n matrix, got {xv.shape}")
    z = scale * xv
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (scale * p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _op("softmax_rows", (x,), p, vjp)


def interp_matrix(n_in: int, n_out: int) -> Array:
    """1-D linear interpolation weights (``n_out x n_in``), half-pixel centres."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resize extents must be positive, got {n_in} -> {n_out}")
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    w[rows, lo] += 1.0 - frac
    w[rows, lo + 1] += frac
    return w


def bilinear_resize(x, out_h: int, out_w: int):
    """Bilinear resampling of a 2-D map to ``out_h x out_w``."""
    xv = value_of(x)
    if xv.ndim != 2:
        raise DimensionError(f"bilinear_resize needs a 2-D map, got {xv.shape}")
    rh = interp_matrix(xv.shape[0], out_h)
    rw = interp_matrix(xv.shape[1], out_w)
    return _op("bilinear_resize", (x,), rh @ xv @ rw.T, lambda g: (rh.T @ g @ rw,))


# --- differentiation ------------------------------------------------------


def backward(loss: Var) -> dict[int, Array]:
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by node id."""
    if not isinstance(loss, Var):
        raise UsageError("loss is not recorded on a tape")
    if loss.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Array] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(loss.tape.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None) if node.vjp is not None else grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


def backward_grad(loss: Var, root: Var) -> Array:
    """Gradient of scalar ``loss`` with respect to the tracked leaf ``root``."""
    if not isinstance(root, Var):
        raise UsageError("root was not tracked before the forward pass")
    if isinstance(loss, Var) and loss.tape is not root.tape:
        raise UsageError("loss and root are on different tapes")
    if not isinstance(loss, Var):
        # the loss never touched a tracked value
        if np.asarray(loss).size != 1:
            raise DimensionError("loss must be scalar")
        return np.zeros_like(root.value)
    grads = backward(loss)
    g = grads.get(root.id)
    if g is None:
        return np.zeros_like(root.value)
    return _finite(np.asarray(g, dtype=np.float64).reshape(root.shape), "backward")


# --- symmetric matrices ---------------------------------------------------


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric matrix stored as its packed upper triangle (row-major)."""

    n: int
    packed: Array

    @classmethod
    def from_dense(cls, a, atol: float = 1e-9) -> SymMatrix:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"square matrix expected, got {a.shape}")
        scale = max(1.0, float(np.abs(a).max(initial=0.0)))
        if not np.allclose(a, a.T, atol=atol * scale, rtol=0):
            raise DimensionError("matrix is not symmetric")
        iu = np.triu_indices(a.shape[0])
        return cls(a.shape[0], _finite(a[iu].copy(), "SymMatrix"))

    def to_dense(self) -> Array:
        out = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n)
        out[iu] = self.packed
        out.T[iu] = self.packed
        return out


def sym_psd_sqrt(s: SymMatrix) -> SymMatrix:
    """Principal square root of a numerically PSD matrix.

    Eigenvalues down to ``-1e-8`` (relative to the largest magnitude) are
    clamped to zero; anything more negative raises :class:`NotPSDError`.
    """
    dense = s.to_dense()
    w, v = np.linalg.eigh(dense)
    floor = -PSD_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < floor:
        raise NotPSDError(f"smallest eigenvalue {w.min():.3e} is below {floor:.1e}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return SymMatrix.from_dense(0.5 * (root + root.T))
