"""Vector fields, derivatives, RK4 discretisation and SDC factorisations.

Gravity is written once for point arrays and for :class:`Interval` boxes, so
the interval enclosures used by the reachability engines evaluate exactly the
same formulas as the point code. Point functions accept leading batch
dimensions (``x`` of shape ``(..., 6)``).

Two-body states are heliocentric, in km and km/s. CR3BP states live in the
rotating barycentric frame in nondimensional units, with the larger primary at
``(-mu, 0, 0)`` and the smaller one at ``(1 - mu, 0, 0)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import lsq_linear

from . import interval as iv
from .interval import Interval

MU_SUN_KM3_S2 = 1.32712440018e11
MU_EARTH_MOON = 0.012150585
EARTH_MOON_LENGTH_KM = 3.844e5
EARTH_MOON_TIME_S = 375200.0
EARTH_MOON_MASS_KG = 6.0458e24
# thrust per unit mass arrives in m/s^2, positions are in km
ACCEL_SI_TO_KM = 1e-3

_RK4_NODES = (0.5, 0.5, 1.0)
_RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


class SingularityError(ArithmeticError):
    """A state or box touches a gravitational singularity; the set must be refined."""


class ModelKind(enum.Enum):
    TWO_BODY = "two_body"
    CR3BP = "cr3bp"
    # rotating-frame kinematics without primaries; linear, used as a test model
    ROTATING_FREE = "rotating_free"


class Frame(enum.Enum):
    HELIOCENTRIC_INERTIAL = "heliocentric_inertial"
    ROTATING_BARYCENTRIC = "rotating_barycentric"


class Units(enum.Enum):
    DIMENSIONAL = "dimensional"
    NONDIMENSIONAL = "nondimensional"


@dataclass(frozen=True)
class DynamicsModel:
    """Force model, spacecraft thrust parameters and unit scales.

    For the two-body model the scales are identity and units are km, s.
    ``isp`` is carried for configuration fidelity only, since the spacecraft
    mass is held constant.
    """

    kind: ModelKind
    mu: float
    t_max: float = 0.0
    mass: float = 1000.0
    isp: float = 3000.0
    length_scale: float = 1.0
    time_scale: float = 1.0
    mass_scale: float = 1.0
    primaries: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind is ModelKind.TWO_BODY and not self.mu > 0:
            raise ValueError("two-body gravitational parameter must be positive")
        if self.kind is ModelKind.CR3BP and not 0 < self.mu < 0.5:
            raise ValueError("CR3BP mass ratio must lie in (0, 0.5)")
        if self.t_max < 0:
            raise ValueError("t_max must be nonnegative")
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if min(self.length_scale, self.time_scale, self.mass_scale) <= 0:
            raise ValueError("unit scales must be positive")
        if self.kind is ModelKind.TWO_BODY:
            prim = ((self.mu, np.zeros(3)),)
        elif self.kind is ModelKind.CR3BP:
            prim = (
                (1.0 - self.mu, np.array([-self.mu, 0.0, 0.0])),
                (self.mu, np.array([1.0 - self.mu, 0.0, 0.0])),
            )
        else:
            prim = ()
        object.__setattr__(self, "primaries", prim)

    @classmethod
    def two_body(cls, t_max=0.0, mass=1000.0, isp=3000.0, mu=MU_SUN_KM3_S2) -> "DynamicsModel":
        return cls(ModelKind.TWO_BODY, mu, t_max, mass, isp)

    @classmethod
    def cr3bp(cls, t_max=0.0, mass=1000.0, isp=3000.0, mu=MU_EARTH_MOON,
              length_scale=EARTH_MOON_LENGTH_KM, time_scale=EARTH_MOON_TIME_S,
              mass_scale=EARTH_MOON_MASS_KG) -> "DynamicsModel":
        return cls(ModelKind.CR3BP, mu, t_max, mass, isp, length_scale, time_scale, mass_scale)

    @classmethod
    def rotating_free(cls, t_max=0.0, mass=1000.0, length_scale=EARTH_MOON_LENGTH_KM,
                      time_scale=EARTH_MOON_TIME_S) -> "DynamicsModel":
        return cls(ModelKind.ROTATING_FREE, 0.0, t_max, mass, 0.0, length_scale, time_scale)

    @property
    def rotating(self) -> bool:
        return self.kind is not ModelKind.TWO_BODY

    @property
    def frame(self) -> Frame:
        return Frame.ROTATING_BARYCENTRIC if self.rotating else Frame.HELIOCENTRIC_INERTIAL

    @property
    def velocity_scale(self) -> float:
        return self.length_scale / self.time_scale

    @property
    def thrust_accel(self) -> float:
        """Acceleration at full thrust in the model's own units."""
        return self.t_max / self.mass * ACCEL_SI_TO_KM * self.time_scale**2 / self.length_scale

    @property
    def input_matrix(self) -> np.ndarray:
        """Maps an acceleration vector into the state derivative."""
        return np.vstack([np.zeros((3, 3)), np.eye(3)])


@dataclass(frozen=True)
class StateVector:
    values: np.ndarray
    frame: Frame
    units: Units

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != 6:
            raise ValueError(f"state vector must have 6 entries, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("state vector entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, StateVector) else np.asarray(x, dtype=float)


# --------------------------------------------------------------------------
# generic helpers (ndarray or Interval)


def _is_iv(*xs) -> bool:
    return any(isinstance(x, Interval) for x in xs)


def _zeros(shape, like):
    return iv.zeros(shape) if isinstance(like, Interval) else np.zeros(shape)


def _stack(items, axis=-1):
    return iv.stack(items, axis) if _is_iv(*items) else np.stack(items, axis)


def _cat(items, axis=-1):
    return iv.concatenate(items, axis) if _is_iv(*items) else np.concatenate(items, axis)


class _PrimaryTerm:
    """Distance powers of one primary; ``naive`` is False when only the norm bound applies."""

    __slots__ = ("m", "P", "rho", "inv3", "inv5", "inv7", "inv_min", "naive")


def _primary_terms(r, model: DynamicsModel, dist_lb=None) -> list:
    """Per-primary offsets and inverse distance powers.

    For interval boxes ``inv_min`` is an upper bound on ``1/|rho|``. It uses
    the better of the box itself and ``dist_lb`` (a caller-supplied lower
    bound on the distance to each primary). When the box covers a primary
    but ``dist_lb`` keeps it away, only the norm bounds below are available.
    """
    out = []
    for p, (m, P) in enumerate(model.primaries):
        t = _PrimaryTerm()
        t.m, t.P = m, P
        t.rho = r - P
        d2 = iv.sqr(t.rho).sum(axis=-1)
        if isinstance(d2, Interval):
            lb = float(np.sqrt(max(d2.lo.min(), 0.0)))
            if dist_lb is not None:
                lb = max(lb, float(dist_lb[p]))
            if not lb > 0:
                raise SingularityError("box reaches a primary")
            t.inv_min = float(np.nextafter(1.0 / lb, np.inf))
            t.naive = bool(np.all(d2.lo > 0))
        else:
            if not np.all(d2 > 0):
                raise SingularityError("state reaches a primary")
            t.naive = True
            t.inv_min = None
        if t.naive:
            inv2 = 1.0 / d2
            t.inv3 = inv2 / iv.sqrt(d2)
            t.inv5 = t.inv3 * inv2
            t.inv7 = t.inv5 * inv2
        out.append(t)
    return out


# Entrywise bounds on the direction-dependent factors of point-mass gravity,
# max over unit vectors n:  acceleration |n_i| <= 1;  Jacobian |3 n_i n_j -
# delta_ij| <= 2 (i = j) or 1.5;  Hessian |3(d_ij n_k + d_ik n_j + d_jk n_i) -
# 15 n_i n_j n_k| <= 6 (all equal), 4.14 (two equal), 2.89 (all distinct).
# Interval boxes are intersected with these scaled by 1/min|rho|^(2, 3, 4),
# which removes the dependency blow-up of the naive evaluation on large boxes.
_ACC_FACTOR = np.ones(3)
_JAC_FACTOR = np.where(np.eye(3, dtype=bool), 2.0, 1.5)
_HESS_FACTOR = np.array(
    [[[6.0 if i == j == k else (2.89 if len({i, j, k}) == 3 else 4.14) for k in range(3)]
      for j in range(3)] for i in range(3)]
)


def _bounded(t: _PrimaryTerm, naive_fn, factor: np.ndarray, power: int):
    """Naive term (point or interval), intersected with its norm bound for intervals."""
    if t.inv_min is None:
        return naive_fn()
    bound = t.m * t.inv_min**power * factor * (1.0 + 1e-12)
    if not t.naive:
        return Interval(-bound, bound)
    return naive_fn().clip(bound)


def gravity_accel(r, model: DynamicsModel, dist_lb=None):
    acc = _zeros(r.shape, r)
    for t in _primary_terms(r, model, dist_lb):
        acc = acc - _bounded(t, lambda: t.m * (t.rho * t.inv3[..., None]), _ACC_FACTOR, 2)
    return acc


def drift(x, model: DynamicsModel, dist_lb=None):
    """Unforced vector field; ``x`` may be an array ``(..., 6)`` or an Interval."""
    r, v = x[..., :3], x[..., 3:]
    acc = gravity_accel(r, model, dist_lb)
    if model.rotating:
        acc = acc + _stack([r[..., 0] + 2.0 * v[..., 1], r[..., 1] - 2.0 * v[..., 0], 0.0 * r[..., 2]])
    return _cat([v, acc])


def _gravity_jacobian(r, model: DynamicsModel, dist_lb=None):
    T = _zeros(r.shape + (3,), r)
    eye = np.eye(3)

    def naive(t):
        outer = t.rho[..., :, None] * t.rho[..., None, :]
        return t.m * (3.0 * (outer * t.inv5[..., None, None]) - t.inv3[..., None, None] * eye)

    for t in _primary_terms(r, model, dist_lb):
        T = T + _bounded(t, lambda: naive(t), _JAC_FACTOR, 3)
    return T


def _gravity_hessian(r, model: DynamicsModel, dist_lb=None):
    """``H[..., i, j, k] = d^2 acc_i / dr_j dr_k``."""
    H = _zeros(r.shape + (3, 3), r)
    eye = np.eye(3)

    def naive(t):
        rho = t.rho
        sym = (
            rho[..., None, None, :] * eye[:, :, None]
            + rho[..., None, :, None] * eye[:, None, :]
            + rho[..., :, None, None] * eye[None, :, :]
        )
        cube = (rho[..., :, None, None] * rho[..., None, :, None]) * rho[..., None, None, :]
        return t.m * (3.0 * (sym * t.inv5[..., None, None, None]) - 15.0 * (cube * t.inv7[..., None, None, None]))

    for t in _primary_terms(r, model, dist_lb):
        H = H + _bounded(t, lambda: naive(t), _HESS_FACTOR, 4)
    return H


def _rotating_block() -> tuple[np.ndarray, np.ndarray]:
    D = np.diag([1.0, 1.0, 0.0])
    C = np.array([[0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    return D, C


def _jacobian(x, model: DynamicsModel, dist_lb=None):
    r = x[..., :3]
    batch = r.shape[:-1]
    T = _gravity_jacobian(r, model, dist_lb)
    D, C = _rotating_block()
    if model.rotating:
        T = T + D
    top = np.broadcast_to(np.hstack([np.zeros((3, 3)), np.eye(3)]), batch + (3, 6))
    if isinstance(T, Interval):
        bottom = iv.concatenate([T, np.broadcast_to(C if model.rotating else np.zeros((3, 3)), batch + (3, 3))], -1)
        return iv.concatenate([top, bottom], -2)
    Cb = np.broadcast_to(C if model.rotating else np.zeros((3, 3)), batch + (3, 3))
    return np.concatenate([top, np.concatenate([T, Cb], -1)], -2)


# --------------------------------------------------------------------------
# public vector fields and derivatives


def _check_u(u, model: DynamicsModel) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(np.linalg.norm(u, axis=-1) > 1.0 + 1e-9):
        raise ValueError("normalised thrust command exceeds unit norm")
    return u


def vector_field(x, u, model: DynamicsModel) -> np.ndarray:
    """``f(x) + B * thrust_accel * u`` for a normalised command ``|u| <= 1``."""
    xv = _values(x)
    u = _check_u(u, model)
    f = drift(xv, model)
    return f + np.concatenate([np.zeros(u.shape), model.thrust_accel * u], -1)


def two_body_vf(x, u, model: DynamicsModel) -> np.ndarray:
    if model.kind is not ModelKind.TWO_BODY:
        raise ValueError("two_body_vf needs a two-body model")
    return vector_field(x, u, model)


def cr3bp_vf(x, u, model: DynamicsModel) -> np.ndarray:
    if not model.rotating:
        raise ValueError("cr3bp_vf needs a rotating-frame model")
    return vector_field(x, u, model)


def jacobian(x, model: DynamicsModel) -> np.ndarray:
    """Closed-form Jacobian of the drift, shape ``(..., 6, 6)``."""
    return _jacobian(_values(x), model)


def drift_hessian(x, model: DynamicsModel) -> np.ndarray:
    """Second derivatives of the drift, ``H[..., i, j, k]``, shape ``(..., 6, 6, 6)``."""
    xv = _values(x)
    Hg = _gravity_hessian(xv[..., :3], model)
    H = np.zeros(xv.shape[:-1] + (6, 6, 6))
    H[..., 3:, :3, :3] = Hg
    return H


def hessian_interval(box: Interval, i: int, model: DynamicsModel) -> Interval:
    """Enclosure of the Hessian of drift component ``i`` over ``box`` (6x6).

    The thrust enters affinely, so its second derivatives vanish and are not
    represented. Raises :class:`SingularityError` if the box reaches a primary.
    """
    if not 0 <= i < 6:
        raise IndexError("component index must lie in 0..5")
    if i < 3 or not model.primaries:
        return iv.zeros((6, 6))
    Hg = _gravity_hessian(box[:3], model)[i - 3]
    out = iv.zeros((6, 6))
    out[:3, :3] = Hg
    return out


# --------------------------------------------------------------------------
# RK4 map and its variational derivatives in (state, acceleration)


def rk4_map(x, a, dt: float, model: DynamicsModel) -> np.ndarray:
    """One RK4 step with acceleration ``a`` held constant (model units)."""
    x = np.asarray(x, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), x.shape[:-1] + (3,))
    Ba = np.concatenate([np.zeros_like(a), a], -1)
    k1 = drift(x, model) + Ba
    k2 = drift(x + 0.5 * dt * k1, model) + Ba
    k3 = drift(x + 0.5 * dt * k2, model) + Ba
    k4 = drift(x + dt * k3, model) + Ba
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x, u, dt: float, model: DynamicsModel):
    """RK4 step with normalised zero-order-hold thrust ``u``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = _check_u(u, model)
    out = rk4_map(_values(x), model.thrust_accel * u, dt, model)
    if isinstance(x, StateVector):
        return StateVector(out, x.frame, x.units)
    return out


def _rk4_variational(x, a, dt: float, model: DynamicsModel, second: bool, dist_lb=None):
    """Shared point / interval recursion for g, Dg and (optionally) D^2 g.

    Derivatives are with respect to the joint vector ``z = [x; a]`` (9 entries).
    """
    E = np.hstack([np.eye(6), np.zeros((6, 3))])
    Bz = np.hstack([np.zeros((6, 6)), np.vstack([np.zeros((3, 3)), np.eye(3)])])
    Ba = _cat([_zeros((3,), a) if isinstance(a, Interval) else np.zeros(3), a])
    curved = second and bool(model.primaries)
    y, Dy, D2y = x, E, None
    ks = []
    Dg = E
    D2g = None
    for s in range(4):
        k = drift(y, model, dist_lb) + Ba
        J = _jacobian(y, model, dist_lb)
        Dk = iv.matmul(J, Dy) + Bz
        D2k = None
        if curved:
            Hg = _gravity_hessian(y[:3], model, dist_lb)
            P = Dy[:3]
            HDD = iv.einsum("iak,kb->iab", iv.einsum("ijk,ja->iak", Hg, P), P)
            D2k = _cat([_zeros((3, 9, 9), HDD), HDD], 0)
            if D2y is not None:
                D2k = D2k + iv.einsum("ij,jab->iab", J, D2y)
        ks.append(k)
        w = dt / 6.0 * _RK4_WEIGHTS[s]
        Dg = Dg + w * Dk
        if D2k is not None:
            D2g = w * D2k if D2g is None else D2g + w * D2k
        if s < 3:
            c = _RK4_NODES[s] * dt
            y = x + c * k
            Dy = E + c * Dk
            D2y = None if D2k is None else c * D2k
    # same operation order as rk4_map, so point images agree bit for bit
    g = x + dt / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    if second and D2g is None:
        D2g = np.zeros((6, 9, 9))
    return g, Dg, D2g


def rk4_jacobians(x, a, dt: float, model: DynamicsModel):
    """RK4 image and its exact Jacobian with respect to ``[x; a]`` (6x9)."""
    g, Dg, _ = _rk4_variational(np.asarray(x, float), np.asarray(a, float), dt, model, False)
    return g, Dg


def rk4_truncation_estimate(center, state_gens, a_center, input_gens, dt: float, model: DynamicsModel) -> np.ndarray:
    """Per-component local error of one RK4 step against the exact flow, estimated.

    Richardson extrapolation of one step against two half steps, taken at
    the centre and at both ends of every state and input generator; the
    largest magnitude per component is returned. This is an estimate, not a
    bound: callers multiply it by a safety factor.
    """
    c = np.asarray(center, dtype=float)
    a = np.asarray(a_center, dtype=float)
    G = np.asarray(state_gens, dtype=float).reshape(6, -1)
    H = np.asarray(input_gens, dtype=float).reshape(3, -1)
    X = np.vstack([c, c + G.T, c - G.T, np.tile(c, (2 * H.shape[1], 1))])
    A = np.vstack([np.tile(a, (1 + 2 * G.shape[1], 1)), a + H.T, a - H.T])
    one = rk4_map(X, A, dt, model)
    two = rk4_map(rk4_map(X, A, 0.5 * dt, model), A, 0.5 * dt, model)
    return np.abs(one - two).max(axis=0) * (16.0 / 15.0)


def rk4_second_derivatives(x, a, dt: float, model: DynamicsModel):
    """RK4 image, Jacobian (6x9) and second derivative tensor (6x9x9)."""
    return _rk4_variational(np.asarray(x, float), np.asarray(a, float), dt, model, True)


def rk4_hessian_enclosure(xbox: Interval, abox: Interval, dt: float, model: DynamicsModel,
                          dist_lb=None) -> Interval:
    """Interval enclosure of the RK4 second derivatives over a state-input box.

    ``dist_lb`` optionally supplies, per primary, a lower bound on the
    distance of every RK4 stage point generated from the box (see
    :func:`stage_distance_bounds`).
    """
    _, _, D2g = _rk4_variational(xbox, abox, dt, model, True, dist_lb)
    return D2g if isinstance(D2g, Interval) else Interval(D2g)


def rk4_image_enclosure(xbox: Interval, abox: Interval, dt: float, model: DynamicsModel) -> Interval:
    """Interval enclosure of the RK4 image of a state-input box (natural extension)."""
    g, _, _ = _rk4_variational(xbox, abox, dt, model, False)
    return g


def zonotope_distance_lower_bound(center, generators, point) -> float:
    """Rigorous lower bound on the distance from ``{c + G xi}`` to ``point``.

    A bounded least-squares solve proposes the closest point; the returned
    value is the separation certified by the support function along the
    resulting direction, so solver tolerance never makes it optimistic.
    """
    d = np.asarray(point, float) - center
    if generators.shape[1] == 0:
        return float(np.linalg.norm(d))
    sol = lsq_linear(generators, d, bounds=(-1.0, 1.0), method="bvls", tol=1e-12)
    n = center + generators @ sol.x - point
    nrm = np.linalg.norm(n)
    if nrm == 0.0:
        return 0.0
    n /= nrm
    return float(max(n @ (center - point) - np.abs(n @ generators).sum(), 0.0))


def stage_distance_bounds(center, generators, accel_bound: float, dt: float,
                          model: DynamicsModel) -> np.ndarray:
    """Per-primary lower bounds on the distance of every RK4 stage point.

    Stage points leave the set by at most ``dt`` times the largest stage
    velocity, which is bounded through the triangle inequality using the
    acceleration available within half the set's own clearance. Raises
    :class:`SingularityError` if that clearance is not enough.
    """
    c = np.asarray(center, float)
    G = np.asarray(generators, float)
    rad = np.abs(G).sum(1)
    if not model.primaries:
        return np.zeros(0)
    rho = np.array([zonotope_distance_lower_bound(c[:3], G[:3], P) for _, P in model.primaries])
    if np.any(rho <= 0):
        raise SingularityError("set reaches a primary")
    R = np.linalg.norm(np.abs(c[:3]) + rad[:3])
    V = np.linalg.norm(np.abs(c[3:]) + rad[3:])
    grav = sum(m / (0.5 * r) ** 2 for (m, _), r in zip(model.primaries, rho))
    h = dt
    if model.rotating:
        den = 1.0 - 2.0 * h - h * h
        if den <= 0:
            raise SingularityError("step too large for the stage bound")
        v_stage = (V + h * (grav + R + accel_bound)) / den
    else:
        v_stage = V + h * (grav + accel_bound)
    shift = h * v_stage * (1.0 + 1e-12)
    if np.any(shift > 0.5 * rho):
        raise SingularityError("stage points may approach a primary; refine the set or the step")
    return rho - shift


# --------------------------------------------------------------------------
# SDC factorisation


def sdc_matrix(x, model: DynamicsModel) -> np.ndarray:
    """Augmented 7x7 coefficient matrix with ``drift(x) = (A(x) [x; 1])[:6]``.

    The last (homogeneous) coordinate absorbs the constant offsets that the
    rotating-frame gravity terms produce.
    """
    xv = _values(x)
    A = np.zeros((7, 7))
    A[:3, 3:6] = np.eye(3)
    D, C = _rotating_block()
    if model.rotating:
        A[3:6, :3] = D
        A[3:6, 3:6] = C
    for t in _primary_terms(xv[:3], model):
        A[3:6, :3] -= t.m * t.inv3 * np.eye(3)
        A[3:6, 6] += t.m * t.inv3 * t.P
    return A


def sdc_partials(x, model: DynamicsModel) -> np.ndarray:
    """``dA/dx_i`` for the six state components, shape (6, 7, 7)."""
    xv = _values(x)
    dA = np.zeros((6, 7, 7))
    for t in _primary_terms(xv[:3], model):
        for i in range(3):
            d_inv3 = -3.0 * t.rho[i] * t.inv5
            dA[i, 3:6, :3] -= t.m * d_inv3 * np.eye(3)
            dA[i, 3:6, 6] += t.m * d_inv3 * t.P
    return dA


def discrete_sdc(x, dt: float, model: DynamicsModel):
    """Exact SDC factorisation of the zero-input RK4 map.

    Returns ``(A_d, dA_d)`` with ``rk4_map(x, 0) == (A_d @ [x; 1])[:6]`` and
    ``dA_d[i] = dA_d/dx_i`` (shape (6, 7, 7)). Each stage derivative is
    written as ``A(y_s) M_s [x; 1]`` with ``y_s`` the actual RK4 stage point.
    """
    xv = _values(x)
    y, Dy = xv, np.eye(6)
    M, dM = np.eye(7), np.zeros((6, 7, 7))
    Ad = np.eye(7)
    dAd = np.zeros((6, 7, 7))
    for s in range(4):
        As = sdc_matrix(y, model)
        dAs_dy = sdc_partials(y, model)
        dAs = np.einsum("mab,mi->iab", dAs_dy, Dy)  # chain rule through y_s(x)
        AM = As @ M
        dAM = dAs @ M + np.einsum("ab,ibc->iac", As, dM)
        w = dt / 6.0 * _RK4_WEIGHTS[s]
        Ad = Ad + w * AM
        dAd = dAd + w * dAM
        if s < 3:
            c = _RK4_NODES[s] * dt
            k = drift(y, model)
            Dk = _jacobian(y, model) @ Dy
            y = xv + c * k
            Dy = np.eye(6) + c * Dk
            M = np.eye(7) + c * AM
            dM = c * dAM
    return Ad, dAd


@dataclass(frozen=True)
class SDCFactorization:
    matrix_fn: Callable[[np.ndarray], np.ndarray]
    partials_fn: Callable[[np.ndarray], np.ndarray]
    validity: str

    def residual(self, x, model: DynamicsModel) -> float:
        xv = _values(x)
        return float(np.linalg.norm(self.matrix_fn(xv)[:6] @ np.append(xv, 1.0) - drift(xv, model)))


def sdc_factorize(model: DynamicsModel) -> SDCFactorization:
    """Coefficient-times-state factorisation of the continuous drift."""
    if model.kind is ModelKind.TWO_BODY:
        validity = "|r| > 0"
    elif model.kind is ModelKind.CR3BP:
        validity = "r1 > 0 and r2 > 0"
    else:
        validity = "all states"
    return SDCFactorization(
        matrix_fn=lambda x: sdc_matrix(x, model),
        partials_fn=lambda x: sdc_partials(x, model),
        validity=validity,
    )


@dataclass(frozen=True)
class IntegralCheckReport:
    available: bool
    matrix: np.ndarray | None
    residual: float | None
    reason: str = ""


def sdc_integral_check(x, model: DynamicsModel, n_nodes: int = 16,
                       clearance: float = 0.05) -> IntegralCheckReport:
    """Average the drift Jacobian along the segment from the origin to ``x``.

    By the fundamental theorem of calculus the averaged Jacobian ``A_int``
    satisfies ``A_int x = f(x) - f(0)``; the reported residual measures the
    quadrature error of that identity. The check is refused when the segment
    passes within ``clearance * |x|`` of a primary, where Gauss-Legendre
    quadrature is meaningless.
    """
    xv = _values(x)
    r = xv[:3]
    scale = max(np.linalg.norm(xv), 1e-300)
    for _, P in model.primaries:
        lam = np.clip(P @ r / max(r @ r, 1e-300), 0.0, 1.0)
        if np.linalg.norm(lam * r - P) <= clearance * scale:
            return IntegralCheckReport(False, None, None, "segment passes too close to a primary")
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    lam = 0.5 * (nodes + 1.0)
    J = jacobian(lam[:, None] * xv[None, :], model)
    A_int = 0.5 * np.einsum("k,kij->ij", weights, J)
    f0 = drift(np.zeros(6), model)
    res = float(np.linalg.norm(A_int @ xv - (drift(xv, model) - f0)))
    return IntegralCheckReport(True, A_int, res)


# --------------------------------------------------------------------------
# units


def nondimensionalize(x: StateVector, model: DynamicsModel) -> StateVector:
    if x.units is not Units.DIMENSIONAL:
        raise ValueError("state is already nondimensional")
    v = x.values.copy()
    v[:3] /= model.length_scale
    v[3:] /= model.velocity_scale
    return StateVector(v, x.frame, Units.NONDIMENSIONAL)


def dimensionalize(x: StateVector, model: DynamicsModel) -> StateVector:
    if x.units is not Units.NONDIMENSIONAL:
        raise ValueError("state is already dimensional")
    v = x.values.copy()
    v[:3] *= model.length_scale
    v[3:] *= model.velocity_scale
    return StateVector(v, x.frame, Units.DIMENSIONAL)
