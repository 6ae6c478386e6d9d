"""Scalar reverse-mode differentiation and a finite-difference checker.

A :class:`Tape` records one node per scalar operation together with the local
partial derivatives with respect to its parents; :meth:`Tape.backward` sweeps
the nodes in reverse append order. Besides arithmetic the primitives include a
damped 3x3 linear solve and bilinear sampling, each with a closed-form
vector-Jacobian rule.

The image-sized pipeline uses torch autograd instead (see :func:`tensor_grad`);
both engines are checked against the same central-difference oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NonFiniteValue


class Tape:
    def __init__(self):
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []

    def __len__(self):
        return len(self.parents)

    def _push(self, value: float, parents=(), partials=()) -> "DiffScalar":
        if not math.isfinite(value):
            raise NonFiniteValue(f"non-finite value {value} at tape node {len(self.parents)}")
        self.parents.append(tuple(parents))
        self.partials.append(tuple(partials))
        return DiffScalar(value, self, len(self.parents) - 1)

    def var(self, value: float) -> "DiffScalar":
        return self._push(float(value))

    def constant(self, value: float) -> "DiffScalar":
        return self._push(float(value))

    def backward(self, out: "DiffScalar") -> np.ndarray:
        """Adjoints of every node with respect to ``out``."""
        g = np.zeros(len(self.parents))
        g[out.index] = 1.0
        for i in range(out.index, -1, -1):
            gi = g[i]
            if gi == 0.0:
                continue
            for p, d in zip(self.parents[i], self.partials[i]):
                g[p] += gi * d
        return g


class DiffScalar:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value: float, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"DiffScalar({self.value!r})"

    def __float__(self):
        return float(self.value)

    def _lift(self, other) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        o = self._lift(other)
        return self.tape._push(self.value + o.value, (self.index, o.index), (1.0, 1.0))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return self.tape._push(self.value - o.value, (self.index, o.index), (1.0, -1.0))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        o = self._lift(other)
        return self.tape._push(self.value * o.value, (self.index, o.index), (o.value, self.value))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * reciprocal(self._lift(other))

    def __rtruediv__(self, other):
        return self._lift(other) * reciprocal(self)

    def __neg__(self):
        return self.tape._push(-self.value, (self.index,), (-1.0,))

    def __pow__(self, k):
        if isinstance(k, DiffScalar):
            return exp(k * log(self))
        return self.tape._push(self.value**k, (self.index,), (k * self.value ** (k - 1),))


def _unary(x, value: float, partial: float):
    if not isinstance(x, DiffScalar):
        return value
    return x.tape._push(value, (x.index,), (partial,))


def _val(x) -> float:
    return x.value if isinstance(x, DiffScalar) else float(x)


def exp(x):
    try:
        v = math.exp(_val(x))
    except OverflowError:
        raise NonFiniteValue(f"exp overflow at {_val(x)}") from None
    return _unary(x, v, v)


def log(x):
    v = _val(x)
    if v <= 0:
        raise NonFiniteValue(f"log of non-positive value {v}")
    return _unary(x, math.log(v), 1.0 / v)


def sqrt(x):
    v = _val(x)
    if v < 0:
        raise NonFiniteValue(f"sqrt of negative value {v}")
    r = math.sqrt(v)
    return _unary(x, r, 0.5 / r if r > 0 else math.inf)


def reciprocal(x):
    v = _val(x)
    if v == 0:
        raise NonFiniteValue("reciprocal of zero")
    return _unary(x, 1.0 / v, -1.0 / (v * v))


def detach(x):
    """Same value, no gradient path."""
    if isinstance(x, DiffScalar):
        return x.tape.constant(x.value)
    return x


def _binary_select(a, b, pick_a: bool):
    tape = a.tape if isinstance(a, DiffScalar) else getattr(b, "tape", None)
    if tape is None:
        return a if pick_a else b
    src = a if pick_a else b
    if isinstance(src, DiffScalar):
        return tape._push(src.value, (src.index,), (1.0,))
    return tape.constant(src)


def maximum(a, b):
    """Ties pick the first argument."""
    return _binary_select(a, b, _val(a) >= _val(b))


def minimum(a, b):
    """Ties pick the first argument."""
    return _binary_select(a, b, _val(a) <= _val(b))


def _tape_of(items):
    for x in items:
        if isinstance(x, DiffScalar):
            return x.tape
    return None


def solve3_damped(A, b, damping: float = 1e-9):
    """Solve ``(A + damping I) x = b`` for a 3x3 ``A`` (nested sequences).

    Backward rule: with adjoint ``x_bar`` the input adjoints are
    ``b_bar = K^-T x_bar`` and ``A_bar = -b_bar x^T``.
    """
    flatA = [A[i][j] for i in range(3) for j in range(3)]
    Av = np.array([_val(a) for a in flatA]).reshape(3, 3) + damping * np.eye(3)
    bv = np.array([_val(x) for x in b])
    Kinv = np.linalg.inv(Av)
    xv = Kinv @ bv
    tape = _tape_of(list(flatA) + list(b))
    if tape is None:
        return [float(v) for v in xv]
    parents, partial_rows = [], []
    for k, a in enumerate(flatA):
        if isinstance(a, DiffScalar):
            parents.append(a.index)
            r, c = divmod(k, 3)
            partial_rows.append(-Kinv[:, r] * xv[c])
    for k, x in enumerate(b):
        if isinstance(x, DiffScalar):
            parents.append(x.index)
            partial_rows.append(Kinv[:, k])
    rows = np.array(partial_rows) if partial_rows else np.zeros((0, 3))
    return [tape._push(float(xv[i]), parents, tuple(rows[:, i])) for i in range(3)]


def bilinear_sample(values, x, y):
    """Sample a 2D array (rows = y, cols = x) at index coordinates; zero outside.

    At integer coordinates the subgradient is the linear piece of the cell to
    the left/above the sample point.
    """
    H = len(values)
    W = len(values[0])
    xv, yv = _val(x), _val(y)
    x0, y0 = math.ceil(xv) - 1, math.ceil(yv) - 1
    fx, fy = xv - x0, yv - y0

    def at(r, c):
        if 0 <= r < H and 0 <= c < W:
            return values[r][c]
        return 0.0

    v00, v01 = at(y0, x0), at(y0, x0 + 1)
    v10, v11 = at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    w = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    corners = (v00, v01, v10, v11)
    cv = [_val(c) for c in corners]
    out = sum(wi * ci for wi, ci in zip(w, cv))
    dx = (1 - fy) * (cv[1] - cv[0]) + fy * (cv[3] - cv[2])
    dy = (1 - fx) * (cv[2] - cv[0]) + fx * (cv[3] - cv[1])
    tape = _tape_of(list(corners) + [x, y])
    if tape is None:
        return out
    parents, partials = [], []
    for wi, c in zip(w, corners):
        if isinstance(c, DiffScalar):
            parents.append(c.index)
            partials.append(wi)
    for d, s in ((dx, x), (dy, y)):
        if isinstance(s, DiffScalar):
            parents.append(s.index)
            partials.append(d)
    return tape._push(out, parents, partials)


def grad(f: Callable, x) -> np.ndarray:
    """Reverse-mode gradient of a scalar function written with :class:`DiffScalar` ops."""
    x = np.asarray(x, dtype=np.float64).ravel()
    tape = Tape()
    xs = [tape.var(v) for v in x]
    out = f(xs)
    if not isinstance(out, DiffScalar):
        return np.zeros_like(x)
    g = tape.backward(out)
    return np.array([g[v.index] for v in xs])


def value(f: Callable, x) -> float:
    tape = Tape()
    return _val(f([tape.var(v) for v in np.asarray(x, dtype=np.float64).ravel()]))


def tensor_grad(f: Callable, x) -> np.ndarray:
    """Gradient of a torch scalar function of a float64 vector."""
    t = torch.tensor(np.asarray(x, dtype=np.float64), dtype=torch.float64, requires_grad=True)
    out = f(t)
    if not torch.isfinite(out):
        raise NonFiniteValue(f"function value {float(out.detach())} is not finite")
    (g,) = torch.autograd.grad(out, t, allow_unused=True)
    if g is None:
        return np.zeros(t.shape)
    g = g.numpy()
    if not np.isfinite(g).all():
        raise NonFiniteValue("non-finite gradient")
    return g


def tensor_value(f: Callable, x) -> float:
    with torch.no_grad():
        return float(f(torch.as_tensor(np.asarray(x, dtype=np.float64))))


@dataclass
class GradReport:
    max_rel_err: float
    argmax: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    tol: float = 1e-4

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def check_grad(f: Callable, x, h: float = 1e-5, tol: float = 1e-4, engine: str = "tape", coords: Sequence[int] | None = None) -> GradReport:
    """Compare the reverse-mode gradient with central differences.

    ``engine`` is ``"tape"`` for :class:`DiffScalar` functions or ``"torch"``
    for tensor functions. ``coords`` restricts the comparison to a subset of
    coordinates (the analytic gradient is still computed in full).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    if engine == "tape":
        analytic, fval = grad(f, x), (lambda z: value(f, z))
    elif engine == "torch":
        analytic, fval = tensor_grad(f, x), (lambda z: tensor_value(f, z))
    else:
        raise ValueError(f"unknown engine {engine!r}")
    idx = range(len(x)) if coords is None else list(coords)
    numeric = np.zeros(len(x))
    rel = np.zeros(len(x))
    for i in idx:
        e = np.zeros_like(x)
        e[i] = h
        numeric[i] = (fval(x + e) - fval(x - e)) / (2 * h)
        denom = max(abs(analytic[i]), abs(numeric[i]), 1e-8)
        rel[i] = abs(analytic[i] - numeric[i]) / denom
    k = int(np.argmax(rel))
    return GradReport(float(rel[k]), k, analytic, numeric, tol)
