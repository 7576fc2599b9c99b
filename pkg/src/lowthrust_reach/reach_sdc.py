"""Reachability through the pseudo-linear (SDC) form of the RK4 map.

The zero-input RK4 map is written exactly as ``g(x) = A_d(x) [x; 1]``. A set
``x = c + G xi`` is pushed through the product ``A_d(c + G xi) (c + G xi)``
expanded in the generator coefficients:

* ``A_d(c) c`` is the new centre;
* ``A_d(c) G_j + Gt_j c`` (with ``Gt_j`` the matrix generators of the
  expansion of ``A_d`` over ``z``) are the merged linear generators;
* the terms quadratic in ``xi`` are the cross products ``Gt_j G_l`` plus the
  curvature of ``A_d`` itself. Together they form the exact second-order
  term, which is enclosed as a zonotope;
* what remains is third order in the set size and is bounded by interval
  arithmetic on the RK4 second derivatives over the set's hull.

Thrust enters through the input columns of the RK4 Jacobian and, to second
order, through the same quadratic form; the disturbance is an additive
velocity increment per step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import (DynamicsModel, discrete_sdc, rk4_hessian_enclosure, rk4_second_derivatives,
                       rk4_truncation_estimate)
from .interval import Interval
from .setops import MatrixZonotope, Zonotope, interval_hull, minkowski_sum, reduce_order
from .reach_taylor import primary_clearance
from .tube import ReachTube, StepResult, propagate, tube_volume_series  # noqa: F401 (re-export)

_ROUND_PAD = 1e-12


@dataclass(frozen=True)
class SDCReachConfig:
    dt: float
    err_tol: float = 1e-5
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
        if not self.err_tol > 0:
            raise ValueError("err_tol must be positive")
        if self.max_splits < 0:
            raise ValueError("max_splits must be nonnegative")
        if self.truncation_safety < 0:
            raise ValueError("truncation_safety must be nonnegative")
        if self.max_order < 1:
            raise ValueError("max_order must be at least 1")
        if self.input_set is not None and np.any(self.input_set.center != 0):
            raise ValueError("the SDC step expects an input set centred at the origin")


def matrix_taylor_expand(z: Zonotope, model: DynamicsModel, dt: float) -> MatrixZonotope:
    """First-order expansion of ``A_d`` over ``z``: nominal ``A_d(c)``, one matrix per generator."""
    Ad, dAd = discrete_sdc(z.center, dt, model)
    Gt = np.einsum("iab,ij->jab", dAd, z.generators)
    return MatrixZonotope(Ad, Gt)


def _quadratic_zonotope(Q: np.ndarray) -> Zonotope:
    """Enclose ``{xi^T Q_a xi : |xi|_inf <= 1}`` (one symmetric ``Q_a`` per output row).

    Squares ``xi_j^2`` lie in ``[0, 1]`` and products ``xi_j xi_l`` in
    ``[-1, 1]``; each monomial becomes its own generator direction.
    """
    n, p, _ = Q.shape
    diag = np.einsum("ajj->aj", Q)
    center = 0.5 * diag.sum(1)
    iu, ju = np.triu_indices(p, 1)
    cross = Q[:, iu, ju] + Q[:, ju, iu]
    return Zonotope(center, np.hstack([0.5 * diag, cross]))


def sdc_step(z: Zonotope, model: DynamicsModel, cfg: SDCReachConfig, dt: float | None = None,
             mz: MatrixZonotope | None = None) -> StepResult:
    dt = cfg.dt if dt is None else dt
    u_set = cfg.input_set if cfg.input_set is not None else Zonotope(np.zeros(3))
    c, G = z.center, z.generators
    p, pu = G.shape[1], u_set.n_generators
    if mz is None:
        mz = matrix_taylor_expand(z, model, dt)
    cbar = np.append(c, 1.0)
    Gbar = np.vstack([G, np.zeros((1, p))])

    g, Dg, D2g = rk4_second_derivatives(c, np.zeros(3), dt, model)
    # linear part from the product expansion; the exact identity
    # A_d G + Gt c == Dg_x G holds to rounding
    lin_state = (mz.nominal @ Gbar + np.einsum("jab,b->aj", mz.generators, cbar))[:6]
    lin_input = Dg[:, 6:] @ u_set.generators
    consistency = float(np.max(np.abs((mz.nominal @ cbar)[:6] - g)))

    # quadratic part in the joint coefficients [xi_state, xi_input]
    Gz = np.zeros((9, p + pu))
    Gz[:6, :p] = G
    Gz[6:, p:] = u_set.generators
    Q = 0.5 * np.einsum("aij,ip,jq->apq", D2g, Gz, Gz)
    cross = np.einsum("jab,bl->ajl", mz.generators, Gbar)[:6]  # Gt_j G_l
    dev_radius = np.abs(cross).sum((1, 2))
    quad = _quadratic_zonotope(Q)

    # third-order remainder over the joint hull
    xbox, abox = interval_hull(z), interval_hull(u_set)
    D2box = rk4_hessian_enclosure(xbox, abox, dt, model, primary_clearance(z, u_set, model, dt))
    M = (D2box - Interval(D2g)).mag()
    gamma = np.concatenate([np.abs(G).sum(1), np.abs(u_set.generators).sum(1)])
    err = 0.5 * np.einsum("aij,i,j->a", M, gamma, gamma) * (1.0 + _ROUND_PAD)

    out = Zonotope(g + quad.center, np.hstack([lin_state, lin_input, quad.generators, np.diag(err)]))
    if cfg.truncation_safety > 0:
        est = rk4_truncation_estimate(c, G, np.zeros(3), u_set.generators, dt, model)
        out = minkowski_sum(out, Zonotope(np.zeros(6), np.diag(cfg.truncation_safety * est)))
    if cfg.disturbance_set is not None:
        w = cfg.disturbance_set
        out = minkowski_sum(out, Zonotope(np.concatenate([np.zeros(3), w.center]),
                                          np.vstack([np.zeros((3, w.n_generators)), w.generators])))
    scores = np.einsum("ai,ip->p", np.einsum("aij,j->ai", M[:, :6, :], gamma), np.abs(G))
    info = {"consistency": consistency, "dev_radius": dev_radius}
    return StepResult(out, err, scores, info)


def sdc_propagate_step(z: Zonotope, mz: MatrixZonotope, cfg: SDCReachConfig, model: DynamicsModel) -> Zonotope:
    """One order-reduced step using a matrix zonotope expanded over ``z``."""
    if mz.n_generators != z.n_generators:
        raise ValueError("matrix zonotope was not expanded over this set")
    return reduce_order(sdc_step(z, model, cfg, mz=mz).set, cfg.max_order)


def sdc_propagate_tube(z0: Zonotope, model: DynamicsModel, cfg: SDCReachConfig, t_final: float) -> ReachTube:
    consistency = []

    def step(z, h):
        res = sdc_step(z, model, cfg, h)
        consistency.append(res.info["consistency"])
        return res

    tube = propagate(z0, step, cfg.dt, t_final, cfg.err_tol, cfg.max_splits, cfg.max_order, method="sdc")
    tube.diagnostics["max_consistency"] = max(consistency, default=0.0)
    return tube


def with_input(cfg: SDCReachConfig, u_set: Zonotope | None) -> SDCReachConfig:
    return replace(cfg, input_set=u_set)
