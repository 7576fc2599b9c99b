"""Vectorised interval arithmetic with outward rounding.

Only the subset needed for guaranteed enclosures of the vector fields and
their derivatives is provided: the four field operations, squares, square
roots, reductions, and tensor contractions (midpoint-radius form).
"""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(float).eps
_TINY = np.finfo(float).tiny


def _down(x):
    return np.nextafter(x, -np.inf)


def _up(x):
    return np.nextafter(x, np.inf)


class Interval:
    """Array of closed intervals ``[lo, hi]`` (numpy broadcasting semantics)."""

    __slots__ = ("lo", "hi")
    __array_priority__ = 1000
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise ValueError("interval with lower bound above upper bound")
        self.lo = np.array(lo)
        self.hi = np.array(hi)

    @classmethod
    def _raw(cls, lo, hi) -> "Interval":
        obj = cls.__new__(cls)
        obj.lo = lo
        obj.hi = hi
        return obj

    @classmethod
    def from_mid_rad(cls, mid, rad) -> "Interval":
        mid = np.asarray(mid, dtype=float)
        rad = np.asarray(rad, dtype=float)
        return cls._raw(_down(mid - rad), _up(mid + rad))

    # -- shape handling -------------------------------------------------
    @property
    def shape(self):
        return self.lo.shape

    @property
    def ndim(self):
        return self.lo.ndim

    @property
    def T(self) -> "Interval":
        return Interval._raw(self.lo.T, self.hi.T)

    def __len__(self):
        return len(self.lo)

    def __getitem__(self, key) -> "Interval":
        return Interval._raw(self.lo[key], self.hi[key])

    def __setitem__(self, key, value):
        v = as_interval(value)
        self.lo[key] = v.lo
        self.hi[key] = v.hi

    def reshape(self, *shape) -> "Interval":
        return Interval._raw(self.lo.reshape(*shape), self.hi.reshape(*shape))

    def copy(self) -> "Interval":
        return Interval._raw(self.lo.copy(), self.hi.copy())

    def __repr__(self):
        return f"Interval(lo={self.lo!r}, hi={self.hi!r})"

    # -- summaries --------------------------------------------------------
    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def rad(self) -> np.ndarray:
        m = self.mid()
        return _up(np.maximum(self.hi - m, m - self.lo))

    def mag(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.lo - tol <= x) & (x <= self.hi + tol)

    def contains_zero(self) -> np.ndarray:
        return (self.lo <= 0.0) & (self.hi >= 0.0)

    def sum(self, axis=None) -> "Interval":
        return Interval._raw(_down(self.lo.sum(axis=axis)), _up(self.hi.sum(axis=axis)))

    # -- arithmetic -------------------------------------------------------
    def __neg__(self) -> "Interval":
        return Interval._raw(-self.hi, -self.lo)

    def __pos__(self) -> "Interval":
        return self

    def __add__(self, other) -> "Interval":
        if isinstance(other, Interval):
            return Interval._raw(_down(self.lo + other.lo), _up(self.hi + other.hi))
        b = np.asarray(other, dtype=float)
        return Interval._raw(_down(self.lo + b), _up(self.hi + b))

    __radd__ = __add__

    def __sub__(self, other) -> "Interval":
        if isinstance(other, Interval):
            return Interval._raw(_down(self.lo - other.hi), _up(self.hi - other.lo))
        b = np.asarray(other, dtype=float)
        return Interval._raw(_down(self.lo - b), _up(self.hi - b))

    def __rsub__(self, other) -> "Interval":
        b = np.asarray(other, dtype=float)
        return Interval._raw(_down(b - self.hi), _up(b - self.lo))

    def __mul__(self, other) -> "Interval":
        if isinstance(other, Interval):
            p = (self.lo * other.lo, self.lo * other.hi, self.hi * other.lo, self.hi * other.hi)
            lo = np.minimum(np.minimum(p[0], p[1]), np.minimum(p[2], p[3]))
            hi = np.maximum(np.maximum(p[0], p[1]), np.maximum(p[2], p[3]))
            return Interval._raw(_down(lo), _up(hi))
        b = np.asarray(other, dtype=float)
        p, q = self.lo * b, self.hi * b
        return Interval._raw(_down(np.minimum(p, q)), _up(np.maximum(p, q)))

    __rmul__ = __mul__

    def reciprocal(self) -> "Interval":
        if np.any(self.contains_zero()):
            raise ZeroDivisionError("interval division by an interval containing zero")
        return Interval._raw(_down(1.0 / self.hi), _up(1.0 / self.lo))

    def __truediv__(self, other) -> "Interval":
        if isinstance(other, Interval):
            return self * other.reciprocal()
        b = np.asarray(other, dtype=float)
        if np.any(b == 0.0):
            raise ZeroDivisionError("interval division by zero")
        p, q = self.lo / b, self.hi / b
        return Interval._raw(_down(np.minimum(p, q)), _up(np.maximum(p, q)))

    def __rtruediv__(self, other) -> "Interval":
        return as_interval(other) * self.reciprocal()

    def sqr(self) -> "Interval":
        lo2, hi2 = self.lo * self.lo, self.hi * self.hi
        lo = np.where(self.lo >= 0, lo2, np.where(self.hi <= 0, hi2, 0.0))
        hi = np.maximum(lo2, hi2)
        return Interval._raw(np.maximum(_down(lo), 0.0), _up(hi))

    def sqrt(self) -> "Interval":
        if np.any(self.hi < 0):
            raise ValueError("square root of a negative interval")
        return Interval._raw(np.maximum(_down(np.sqrt(np.maximum(self.lo, 0.0))), 0.0), _up(np.sqrt(self.hi)))

    def abs(self) -> "Interval":
        lo = np.where(self.contains_zero(), 0.0, np.minimum(np.abs(self.lo), np.abs(self.hi)))
        return Interval._raw(lo, self.mag())

    def clip(self, bound) -> "Interval":
        """Intersect with ``[-bound, bound]`` (``bound`` must be a valid enclosure of |x|)."""
        b = np.asarray(bound, dtype=float)
        return Interval._raw(np.maximum(self.lo, -b), np.minimum(self.hi, b))

    def hull(self, other) -> "Interval":
        o = as_interval(other)
        return Interval._raw(np.minimum(self.lo, o.lo), np.maximum(self.hi, o.hi))


def as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    return Interval(x)


def zeros(shape) -> Interval:
    return Interval(np.zeros(shape))


def stack(items, axis: int = 0) -> Interval:
    items = [as_interval(i) for i in items]
    return Interval._raw(np.stack([i.lo for i in items], axis), np.stack([i.hi for i in items], axis))


def concatenate(items, axis: int = 0) -> Interval:
    items = [as_interval(i) for i in items]
    return Interval._raw(
        np.concatenate([i.lo for i in items], axis), np.concatenate([i.hi for i in items], axis)
    )


def _mid_rad(x):
    if isinstance(x, Interval):
        return x.mid(), x.rad()
    x = np.asarray(x, dtype=float)
    return x, None


def einsum(spec: str, a, b):
    """Two-operand ``np.einsum`` lifted to intervals (midpoint-radius form).

    Plain arrays pass straight through to numpy.
    """
    if not isinstance(a, Interval) and not isinstance(b, Interval):
        return np.einsum(spec, a, b)
    am, ar = _mid_rad(a)
    bm, br = _mid_rad(b)
    mid = np.einsum(spec, am, bm)
    absprod = np.einsum(spec, np.abs(am), np.abs(bm))
    rad = np.zeros_like(mid)
    if br is not None:
        rad = rad + np.einsum(spec, np.abs(am), br)
    if ar is not None:
        rad = rad + np.einsum(spec, ar, np.abs(bm))
    if ar is not None and br is not None:
        rad = rad + np.einsum(spec, ar, br)
    # contraction length bounds the accumulated rounding error
    n_terms = max(am.size, bm.size)
    rad = rad + (n_terms + 4) * _EPS * (absprod + rad) + _TINY
    return Interval.from_mid_rad(mid, rad)


def matmul(a, b):
    """Matrix (or matrix-vector) product for intervals or plain arrays."""
    if not isinstance(a, Interval) and not isinstance(b, Interval):
        return np.asarray(a) @ np.asarray(b)
    a_nd = a.ndim if isinstance(a, Interval) else np.ndim(a)
    b_nd = b.ndim if isinstance(b, Interval) else np.ndim(b)
    spec = {(2, 2): "ij,jk->ik", (2, 1): "ij,j->i", (1, 2): "j,jk->k", (1, 1): "j,j->"}[(a_nd, b_nd)]
    return einsum(spec, a, b)


def sqrt(x):
    return x.sqrt() if isinstance(x, Interval) else np.sqrt(x)


def sqr(x):
    return x.sqr() if isinstance(x, Interval) else x * x


def mag(x) -> np.ndarray:
    return x.mag() if isinstance(x, Interval) else np.abs(np.asarray(x, dtype=float))
