"""Zonotopes, matrix zonotopes, interval vectors and halfspace polyhedra.

Every set value is immutable once built; operations return new objects.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .interval import Interval


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Zonotope:
    """The set ``{center + generators @ xi : |xi|_inf <= 1}``.

    Zero generator columns are dropped on construction, so ``n_generators``
    always counts directions that actually contribute to the set.
    """

    center: np.ndarray
    generators: np.ndarray

    def __init__(self, center, generators=None):
        c = np.array(center, dtype=float).reshape(-1)
        if generators is None:
            G = np.zeros((c.size, 0))
        else:
            G = np.array(generators, dtype=float)
            if G.ndim == 1:
                G = G.reshape(-1, 1) if c.size > 1 or G.size == 1 else G.reshape(1, -1)
            if G.size == 0:
                G = np.zeros((c.size, 0))
        if G.ndim != 2 or G.shape[0] != c.size:
            raise ValueError(f"generator matrix has {G.shape[0]} rows, center has length {c.size}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(G))):
            raise ValueError("zonotope entries must be finite")
        if G.shape[1]:
            G = G[:, np.any(G != 0.0, axis=0)]
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "generators", _frozen(np.ascontiguousarray(G)))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def n_generators(self) -> int:
        return self.generators.shape[1]

    @property
    def order(self) -> float:
        return self.n_generators / self.dim

    @classmethod
    def point(cls, c) -> "Zonotope":
        return cls(c)

    @classmethod
    def from_box(cls, lower, upper) -> "Zonotope":
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        return cls(0.5 * (lower + upper), np.diag(0.5 * (upper - lower)))

    @classmethod
    def from_interval(cls, iv: Interval) -> "Zonotope":
        return cls.from_box(iv.lo, iv.hi)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "generators": self.generators.T.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Zonotope":
        c = np.asarray(d["center"], dtype=float)
        cols = d.get("generators") or []
        G = np.asarray(cols, dtype=float).T if cols else np.zeros((c.size, 0))
        return cls(c, G)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Points ``c + G xi`` with ``xi`` uniform in the unit cube, shape (n, dim)."""
        xi = rng.uniform(-1.0, 1.0, size=(n, self.n_generators))
        return self.center + xi @ self.generators.T

    def __add__(self, other: "Zonotope") -> "Zonotope":
        return minkowski_sum(self, other)

    def __repr__(self):
        return f"Zonotope(dim={self.dim}, n_generators={self.n_generators})"


class IntervalVector(Interval):
    """Axis-aligned box ``[lower, upper]``."""

    __slots__ = ()

    def __init__(self, lower, upper):
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise ValueError("lower and upper bounds differ in length")
        super().__init__(lower, upper)

    @property
    def lower(self) -> np.ndarray:
        return self.lo

    @property
    def upper(self) -> np.ndarray:
        return self.hi

    @classmethod
    def symmetric(cls, radius) -> "IntervalVector":
        r = np.asarray(radius, dtype=float)
        return cls(-r, r)


@dataclass(frozen=True, eq=False)
class MatrixZonotope:
    """``{nominal + sum_j xi_j generators[j] : |xi_j| <= 1}``."""

    nominal: np.ndarray
    generators: np.ndarray  # (q, n, n)

    def __init__(self, nominal, generators=None):
        A = np.array(nominal, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("nominal matrix must be square")
        if generators is None or len(generators) == 0:
            gens = np.zeros((0,) + A.shape)
        else:
            gens = np.array(generators, dtype=float)
        if gens.ndim != 3 or gens.shape[1:] != A.shape:
            raise ValueError("matrix generators must share the nominal's shape")
        object.__setattr__(self, "nominal", _frozen(A))
        object.__setattr__(self, "generators", _frozen(gens))

    @property
    def n_generators(self) -> int:
        return self.generators.shape[0]

    def evaluate(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return self.nominal + np.tensordot(xi, self.generators, axes=1)


@dataclass(frozen=True, eq=False)
class PolyhedralSet:
    """``{x : H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __init__(self, H, h):
        H = np.atleast_2d(np.array(H, dtype=float))
        h = np.array(h, dtype=float).reshape(-1)
        if H.shape[0] != h.size:
            raise ValueError("row count of H must equal length of h")
        object.__setattr__(self, "H", _frozen(H))
        object.__setattr__(self, "h", _frozen(h))

    def residual(self, x) -> np.ndarray:
        return self.H @ np.asarray(x, dtype=float) - self.h

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(self.residual(x) <= tol))


def _check_dims(a: Zonotope, b: Zonotope):
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def minkowski_sum(a: Zonotope, b: Zonotope) -> Zonotope:
    _check_dims(a, b)
    return Zonotope(a.center + b.center, np.hstack([a.generators, b.generators]))


def linear_map(M, z: Zonotope) -> Zonotope:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != z.dim:
        raise ValueError(f"map has {M.shape[1]} columns, zonotope has dimension {z.dim}")
    return Zonotope(M @ z.center, M @ z.generators)


def cartesian_product(a: Zonotope, b: Zonotope) -> Zonotope:
    G = np.zeros((a.dim + b.dim, a.n_generators + b.n_generators))
    G[: a.dim, : a.n_generators] = a.generators
    G[a.dim :, a.n_generators :] = b.generators
    return Zonotope(np.concatenate([a.center, b.center]), G)


def project(z: Zonotope, axes: Sequence[int]) -> Zonotope:
    axes = list(axes)
    return Zonotope(z.center[axes], z.generators[axes, :])


def scale_generators(z: Zonotope, factor: float) -> Zonotope:
    """Scale ``z`` about its own center."""
    return Zonotope(z.center, factor * z.generators)


def support(z: Zonotope, d) -> float:
    d = np.asarray(d, dtype=float)
    if not np.any(d):
        raise ValueError("support function needs a nonzero direction")
    return float(d @ z.center + np.abs(d @ z.generators).sum())


def interval_hull(z: Zonotope) -> IntervalVector:
    r = np.abs(z.generators).sum(axis=1)
    return IntervalVector(z.center - r, z.center + r)


def _lp_contains(G: np.ndarray, d: np.ndarray, bound: float) -> bool:
    scale = np.abs(G).max(axis=1)
    keep = scale > 0
    A_eq = G[keep] / scale[keep, None]
    b_eq = d[keep] / scale[keep]
    p = G.shape[1]
    res = linprog(
        np.zeros(p),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=[(-bound, bound)] * p,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    return res.status == 0


def contains_points(z: Zonotope, X, tol: float = 1e-9) -> np.ndarray:
    """Vectorised exact membership test for the rows of ``X``.

    A hull check rejects cheaply, a least-norm coefficient vector accepts
    cheaply, and only the undecided points reach the linear program.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != z.dim:
        raise ValueError("point dimension differs from zonotope dimension")
    D = X - z.center
    G = z.generators
    atol = 1e-12 * (1.0 + np.abs(z.center))
    if z.n_generators == 0:
        return np.all(np.abs(D) <= atol, axis=1)
    rad = np.abs(G).sum(axis=1)
    out = np.all(np.abs(D) <= (1.0 + tol) * rad + atol, axis=1)
    idx = np.flatnonzero(out)
    if idx.size == 0:
        return out
    xi, *_ = np.linalg.lstsq(G, D[idx].T, rcond=None)
    resid = np.abs(G @ xi - D[idx].T).max(axis=0)
    certified = (np.abs(xi).max(axis=0) <= 1.0 + tol) & (resid <= 1e-12 * (1.0 + rad.max()))
    for k, ok in zip(idx, certified):
        if not ok:
            out[k] = _lp_contains(G, D[k], 1.0 + tol)
    return out


def contains_point(z: Zonotope, x, tol: float = 1e-9) -> bool:
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    return bool(contains_points(z, np.asarray(x, dtype=float).reshape(1, -1), tol)[0])


def split(z: Zonotope, j: int) -> tuple[Zonotope, Zonotope]:
    if not 0 <= j < z.n_generators:
        raise IndexError(f"generator index {j} out of range for {z.n_generators} generators")
    g = z.generators[:, j]
    G = z.generators.copy()
    G[:, j] = 0.5 * g
    return Zonotope(z.center - 0.5 * g, G), Zonotope(z.center + 0.5 * g, G)


def reduce_order(z: Zonotope, max_order: float) -> Zonotope:
    """Box the generators that cost least to box until ``order <= max_order``."""
    if max_order < 1:
        raise ValueError("max_order must be at least 1")
    n, p = z.dim, z.n_generators
    if p <= max_order * n:
        return z
    n_keep = int(np.floor(max_order * n)) - n
    A = np.abs(z.generators)
    score = A.sum(axis=0) - A.max(axis=0)
    order = np.argsort(score, kind="stable")
    boxed, kept = order[: p - n_keep], np.sort(order[p - n_keep :])
    box = np.diag(A[:, boxed].sum(axis=1))
    return Zonotope(z.center, np.hstack([z.generators[:, kept], box]))


def volume_pos(z: Zonotope) -> float:
    """Exact volume of the projection onto the first three coordinates."""
    if z.dim < 3:
        raise ValueError("position volume needs at least three coordinates")
    G = reduce_order(z, 5).generators[:3]
    G = G[:, np.any(G != 0.0, axis=0)]
    p = G.shape[1]
    if p < 3:
        return 0.0
    idx = np.array(list(itertools.combinations(range(p), 3)))
    sub = np.transpose(G[:, idx], (1, 0, 2))  # (n_subsets, 3, 3)
    return float(8.0 * np.abs(np.linalg.det(sub)).sum())


def to_polyhedron_constraints(z: Zonotope, axes: Sequence[int]) -> PolyhedralSet:
    """Halfspaces bounding the projection of ``z`` onto ``axes``.

    Rows act on the full state (zero weight outside ``axes``). Two axes give
    the exact polygon, three axes fall back to the interval hull.
    """
    axes = list(axes)
    k = len(axes)
    if not 1 <= k <= 3:
        raise ValueError(f"unsupported number of axes: {k}")
    n = z.dim
    c = z.center[axes]
    G = z.generators[axes, :]
    if k == 2:
        normals = []
        for g in G.T:
            nrm = np.hypot(g[0], g[1])
            if nrm == 0.0:
                continue
            cand = np.array([-g[1], g[0]]) / nrm
            if not any(abs(abs(cand @ m) - 1.0) < 1e-12 for m in normals):
                normals.append(cand)
        if len(normals) < 2:
            # degenerate polygon: add the missing orthogonal direction(s)
            base = normals[0] if normals else np.array([1.0, 0.0])
            normals = [base, np.array([-base[1], base[0]])]
        N = np.array(normals)
    else:
        N = np.eye(k)
    offsets = N @ c
    widths = np.abs(N @ G).sum(axis=1)
    rows = np.zeros((2 * len(N), n))
    rows[: len(N), axes] = N
    rows[len(N) :, axes] = -N
    h = np.concatenate([offsets + widths, -offsets + widths])
    return PolyhedralSet(rows, h)


def parallelotope_hull(z: Zonotope) -> tuple[Zonotope, np.ndarray]:
    """Enclosing parallelotope ``c + T diag(r) [-1, 1]^n`` and its facet matrix ``T^-1``.

    ``T`` takes the longest generators that keep full rank (axis directions
    fill any gap) and ``r_i = sum_j |(T^-1 g_j)_i|``. The set ``z`` satisfies
    ``|T^-1 (x - c)| <= r`` componentwise, so the returned pair gives an
    exact halfspace description with ``2 n`` rows.
    """
    n = z.dim
    G = z.generators
    cols = []
    for j in np.argsort(-np.linalg.norm(G, axis=0), kind="stable") if G.size else []:
        trial = np.column_stack(cols + [G[:, j]])
        if np.linalg.matrix_rank(trial, tol=1e-10 * np.abs(trial).max()) == len(cols) + 1:
            cols.append(G[:, j] / np.linalg.norm(G[:, j]))
        if len(cols) == n:
            break
    for i in range(n):
        if len(cols) == n:
            break
        trial = np.column_stack(cols + [np.eye(n)[i]])
        if np.linalg.matrix_rank(trial, tol=1e-10) == len(cols) + 1:
            cols.append(np.eye(n)[i])
    T = np.column_stack(cols)
    Tinv = np.linalg.inv(T)
    r = np.abs(Tinv @ G).sum(axis=1) * (1.0 + 1e-12) if G.size else np.zeros(n)
    return Zonotope(z.center, T * r), Tinv
