"""First-order Taylor reachability with a rigorous Lagrange remainder.

Each step linearises the RK4 map at the set centre (state and input jointly)
and adds a symmetric box that bounds the second-order remainder over the
interval hull of the state-input set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import (DynamicsModel, SingularityError, rk4_hessian_enclosure, rk4_jacobians, rk4_map,
                       rk4_truncation_estimate, stage_distance_bounds)
from .setops import IntervalVector, Zonotope, interval_hull, minkowski_sum, reduce_order
from .tube import ReachTube, StepResult, propagate

# relative padding for the floating-point evaluation of the remainder formula
_ROUND_PAD = 1e-12


@dataclass(frozen=True)
class TaylorReachConfig:
    dt: float
    remainder_tol: float = 1e-6
    max_splits: int = 8
    max_order: float = 5.0
    input_set: Zonotope | None = None
    # additive velocity-increment set applied after every step (R^3)
    disturbance_set: Zonotope | None = None
    # multiple of the estimated RK4 local error added as a box each step; zero
    # encloses the discrete RK4 map itself, positive values cover the flow
    truncation_safety: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.remainder_tol > 0:
            raise ValueError("remainder_tol must be positive")
        if self.max_splits < 0:
            raise ValueError("max_splits must be nonnegative")
        if self.truncation_safety < 0:
            raise ValueError("truncation_safety must be nonnegative")
        if self.max_order < 1:
            raise ValueError("max_order must be at least 1")


@dataclass(frozen=True)
class LinearizationPoint:
    state: np.ndarray
    input: np.ndarray
    image: np.ndarray
    jacobian: np.ndarray  # 6 x 9, columns: state then input


def _input_or_zero(u_set: Zonotope | None) -> Zonotope:
    return u_set if u_set is not None else Zonotope(np.zeros(3))


def linearize_step(z: Zonotope, u_set: Zonotope | None, model: DynamicsModel, dt: float):
    """Affine image of ``z x u_set`` under the RK4 map linearised at the centres."""
    u_set = _input_or_zero(u_set)
    _, Dg = rk4_jacobians(z.center, u_set.center, dt, model)
    # the plain RK4 map keeps singleton tubes bit-identical to the reference integrator
    g = rk4_map(z.center, u_set.center, dt, model)
    G = np.hstack([Dg[:, :6] @ z.generators, Dg[:, 6:] @ u_set.generators])
    return Zonotope(g, G), LinearizationPoint(z.center, u_set.center, g, Dg)


def _joint_gamma(z: Zonotope, u_set: Zonotope, zstar: LinearizationPoint) -> np.ndarray:
    gx = np.abs(z.center - zstar.state) + np.abs(z.generators).sum(1)
    gu = np.abs(u_set.center - zstar.input) + np.abs(u_set.generators).sum(1)
    return np.concatenate([gx, gu])


def _joint_boxes(z: Zonotope, u_set: Zonotope):
    return interval_hull(z), interval_hull(u_set)


def primary_clearance(z: Zonotope, u_set: Zonotope, model: DynamicsModel, dt: float):
    """Distance lower bounds for the RK4 stages of ``z``, or None if unavailable."""
    if not model.primaries:
        return None
    try:
        accel = float(np.linalg.norm(interval_hull(u_set).mag()))
        return stage_distance_bounds(z.center, z.generators, accel, dt, model)
    except SingularityError:
        return None


def _remainder_terms(z, u_set, zstar, model, dt):
    xbox, abox = _joint_boxes(z, u_set)
    dist_lb = primary_clearance(z, u_set, model, dt)
    M = rk4_hessian_enclosure(xbox, abox, dt, model, dist_lb).mag()  # 6 x 9 x 9
    gamma = _joint_gamma(z, u_set, zstar)
    ell = 0.5 * np.einsum("aij,i,j->a", M, gamma, gamma) * (1.0 + _ROUND_PAD)
    return ell, M, gamma


def lagrange_remainder(z: Zonotope, u_set: Zonotope | None, zstar: LinearizationPoint,
                       model: DynamicsModel, dt: float) -> IntervalVector:
    """Symmetric box bounding the second-order remainder of the linearisation."""
    ell, _, _ = _remainder_terms(z, _input_or_zero(u_set), zstar, model, dt)
    return IntervalVector(-ell, ell)


def split_scores(z: Zonotope, M: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Contribution of each state generator to the bilinear remainder bound."""
    absG = np.abs(z.generators)  # 6 x p
    MG = np.einsum("aij,j->ai", M[:, :6, :], gamma)  # 6 x 6
    return np.einsum("ai,ip->p", MG, absG)


def _disturbance_zonotope(w: Zonotope | None) -> Zonotope | None:
    if w is None:
        return None
    return Zonotope(np.concatenate([np.zeros(3), w.center]),
                    np.vstack([np.zeros((3, w.n_generators)), w.generators]))


def taylor_step(z: Zonotope, model: DynamicsModel, cfg: TaylorReachConfig, dt: float | None = None) -> StepResult:
    dt = cfg.dt if dt is None else dt
    u_set = _input_or_zero(cfg.input_set)
    lin, zstar = linearize_step(z, u_set, model, dt)
    ell, M, gamma = _remainder_terms(z, u_set, zstar, model, dt)
    out = minkowski_sum(lin, Zonotope(np.zeros(6), np.diag(ell)))
    if cfg.truncation_safety > 0:
        est = rk4_truncation_estimate(z.center, z.generators, u_set.center, u_set.generators, dt, model)
        out = minkowski_sum(out, Zonotope(np.zeros(6), np.diag(cfg.truncation_safety * est)))
    w = _disturbance_zonotope(cfg.disturbance_set)
    if w is not None:
        out = minkowski_sum(out, w)
    return StepResult(out, ell, split_scores(z, M, gamma))


def propagate_step(z: Zonotope, u_set: Zonotope | None, model: DynamicsModel, cfg: TaylorReachConfig) -> Zonotope:
    """Linearised image plus remainder box, order-reduced."""
    if u_set is not cfg.input_set:
        cfg = replace(cfg, input_set=u_set)
    return reduce_order(taylor_step(z, model, cfg).set, cfg.max_order)


def propagate_tube(z0: Zonotope, model: DynamicsModel, cfg: TaylorReachConfig, t_final: float) -> ReachTube:
    return propagate(
        z0,
        lambda z, h: taylor_step(z, model, cfg, h),
        cfg.dt,
        t_final,
        cfg.remainder_tol,
        cfg.max_splits,
        cfg.max_order,
        method="taylor",
    )
