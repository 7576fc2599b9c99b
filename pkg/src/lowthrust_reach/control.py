"""Thrust sets, LQR and tube-constrained MPC, and the station-keeping supervisor.

Commands ``u`` are normalised thrust vectors: ``|u|_2 <= 1`` maps to the
acceleration ``thrust_accel * u`` in model units. The input box
``[u_min, u_max]`` defaults to the largest cube inside the unit ball, so every
box-feasible command is also thrust-feasible.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from .dynamics import DynamicsModel, rk4_jacobians, rk4_map, rk4_step
from .qp import QPResult, kkt_residual, solve_box_projected_gradient, solve_qp
from .reach_sdc import SDCReachConfig, sdc_propagate_tube
from .setops import Zonotope, contains_point, interval_hull, parallelotope_hull, scale_generators, support
from .tube import ReachTube

U_CUBE = 1.0 / np.sqrt(3.0)


# ---------------------------------------------------------------------------
# thrust set


@dataclass(frozen=True)
class ThrustSet:
    """Zonotope enclosing the thrust ball of radius ``radius`` (centre at the origin)."""

    zonotope: Zonotope
    radius: float
    calibration: float  # max support / radius over the calibration directions
    inradius: float  # exact min support over all unit directions

    def scaled(self, factor: float) -> Zonotope:
        """The same shape with every generator multiplied by ``factor`` (unit change)."""
        return Zonotope(self.zonotope.center * factor, self.zonotope.generators * factor)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the sphere (rows)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    rho = np.sqrt(1.0 - z * z)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


CALIBRATION_DIRECTIONS = fibonacci_directions(64)


def _unit_rows(rows) -> np.ndarray:
    a = np.asarray(rows, dtype=float)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


_FACE_DIAGONALS = _unit_rows([[1, 1, 0], [1, -1, 0], [1, 0, 1], [1, 0, -1], [0, 1, 1], [0, 1, -1]])
_BODY_DIAGONALS = _unit_rows([[1, 1, 1], [1, 1, -1], [1, -1, 1], [-1, 1, 1]])
_ONE_ONE_TWO = _unit_rows([[1, 1, 2], [1, -1, 2], [-1, 1, 2], [-1, -1, 2], [1, 2, 1], [1, 2, -1],
                           [-1, 2, 1], [-1, 2, -1], [2, 1, 1], [2, 1, -1], [2, -1, 1], [2, -1, -1]])
# symmetric families; with equal generator lengths these beat any prefix of a single list
_PRESETS = {
    4: _BODY_DIAGONALS,
    6: _FACE_DIAGONALS,
    10: np.vstack([_FACE_DIAGONALS, _BODY_DIAGONALS]),
    12: _ONE_ONE_TWO,
}


def _candidate_directions(n_extra: int) -> np.ndarray:
    if n_extra in _PRESETS:
        return _PRESETS[n_extra]
    dirs = list(_FACE_DIAGONALS) + list(_BODY_DIAGONALS)
    if n_extra > len(dirs):
        dirs += list(fibonacci_directions(n_extra - len(dirs) + 2)[1:-1])
    return np.array(dirs[:n_extra]).reshape(-1, 3)


def _min_support_unit(G: np.ndarray) -> float:
    """Inradius of the zonotope ``Z(0, G)`` in R^3: smallest support over facet normals."""
    best = np.inf
    for i, j in itertools.combinations(range(G.shape[1]), 2):
        nrm = np.cross(G[:, i], G[:, j])
        s = np.linalg.norm(nrm)
        if s > 1e-12:
            best = min(best, np.abs(nrm @ G).sum() / s)
    return best


def build_thrust_set(t_max: float, mass: float, n_extra_dirs: int = 0) -> ThrustSet:
    """Zonotope ``Z(0, s * r * D)`` with ``r = t_max / mass`` [m/s^2] enclosing the thrust ball.

    ``D`` holds the three axes followed by ``n_extra_dirs`` diagonal unit
    directions. The scale ``s`` is the smallest one whose zonotope contains
    the ball, found exactly from the facet normals, so the support reaches
    ``r`` in every direction (the 64 calibration directions included).
    """
    if t_max < 0:
        raise ValueError("t_max must be nonnegative")
    if not mass > 0:
        raise ValueError("mass must be positive")
    if n_extra_dirs < 0:
        raise ValueError("n_extra_dirs must be nonnegative")
    radius = t_max / mass
    D = np.hstack([np.eye(3), _candidate_directions(n_extra_dirs).T])
    s = 1.0 / _min_support_unit(D)
    Du = s * D
    cal = max(np.abs(d @ Du).sum() for d in CALIBRATION_DIRECTIONS)
    return ThrustSet(Zonotope(np.zeros(3), radius * Du), radius, float(cal), radius)


def thrust_ratio(ts: ThrustSet) -> float:
    """Over-approximation ratio over the calibration directions."""
    if ts.radius == 0:
        return ts.calibration
    return max(support(ts.zonotope, d) for d in CALIBRATION_DIRECTIONS) / ts.radius


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ControllerConfig:
    """MPC and LQR weights, horizons, input box, and station-keeping trigger settings."""

    horizon_n: int = 10
    control_horizon: int = 5
    q_weights: tuple = (1000.0, 1000.0, 1000.0, 100.0, 100.0, 100.0)
    r_weights: tuple = (1.0, 1.0, 1.0)
    p_terminal: np.ndarray | None = None
    u_min: tuple = (-U_CUBE,) * 3
    u_max: tuple = (U_CUBE,) * 3
    tube_shrink: float = 0.9
    soft_penalty: float = 1e6
    relinearize: bool = False
    # station keeping: half-widths of the monitored tube's initial set and the
    # membership tolerance of the exit test
    tube_pos: float = 5e-7
    tube_vel: float = 5e-7
    trigger_tol: float = 0.0

    def __post_init__(self):
        if not self.horizon_n >= self.control_horizon >= 1:
            raise ValueError("need horizon_n >= control_horizon >= 1")
        if len(self.q_weights) != 6 or len(self.r_weights) != 3:
            raise ValueError("q_weights needs 6 entries and r_weights 3")
        if min(self.q_weights) <= 0 or min(self.r_weights) <= 0:
            raise ValueError("weights must be positive")
        if not np.all(np.asarray(self.u_min) < np.asarray(self.u_max)):
            raise ValueError("u_min must be below u_max")
        if np.linalg.norm(np.maximum(np.abs(self.u_min), np.abs(self.u_max))) > 1.0 + 1e-12:
            raise ValueError("input box must lie inside the unit thrust ball")
        if not 0 < self.tube_shrink <= 1:
            raise ValueError("tube_shrink must lie in (0, 1]")
        if self.p_terminal is not None and np.shape(self.p_terminal) != (6, 6):
            raise ValueError("p_terminal must be 6x6")
        if min(self.tube_pos, self.tube_vel) < 0 or self.trigger_tol < 0:
            raise ValueError("tube widths and trigger tolerance must be nonnegative")

    @property
    def Q(self) -> np.ndarray:
        return np.diag(np.asarray(self.q_weights, dtype=float))

    @property
    def R(self) -> np.ndarray:
        return np.diag(np.asarray(self.r_weights, dtype=float))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.u_min, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.u_max, dtype=float)


# ---------------------------------------------------------------------------
# linearisation and LQR


def linearize_reference(reference: np.ndarray, model: DynamicsModel, dt: float):
    """``A_k, B_k`` of the RK4 map at ``(x_ref_k, u = 0)``; ``B`` acts on normalised ``u``."""
    As, Bs = [], []
    for x in reference:
        _, Dg = rk4_jacobians(x, np.zeros(3), dt, model)
        As.append(Dg[:, :6])
        Bs.append(Dg[:, 6:] * model.thrust_accel)
    return np.array(As), np.array(Bs)


def riccati_window(As, Bs, Q, R, P_end):
    """Backward Riccati recursion over the window; returns ``(K_0, P_0, ok)``.

    ``K_0`` is the gain at the first stamp of the window. ``ok`` is False when
    the recursion produced non-finite or exploding values.
    """
    P = np.asarray(P_end, dtype=float)
    K = np.zeros((Bs[0].shape[1], As[0].shape[0]))
    for A, B in zip(As[::-1], Bs[::-1]):
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
            S = R + B.T @ P @ B
            K = np.linalg.solve(S, B.T @ P @ A)
            P_new = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P)) or np.abs(P).max() > 1e300:
            return K, P, False
    return K, P, bool(np.all(np.isfinite(K)))


@dataclass
class GainSchedule:
    gains: np.ndarray  # (n_stamps, 3, 6)
    flagged: list  # stamps where the recursion failed and the previous gain was reused


def lqr_gains(reference: np.ndarray, model: DynamicsModel, cfg: ControllerConfig, dt: float,
              linearization=None) -> GainSchedule:
    """Per-stamp gains from a sliding-window Riccati recursion about the reference.

    The window at stamp ``k`` covers stamps ``k .. k + horizon_n - 1`` (clipped
    at the end of the reference) and starts from ``P = Q``.
    """
    As, Bs = linearization if linearization is not None else linearize_reference(reference, model, dt)
    n = len(As)
    Q, R = cfg.Q, cfg.R
    gains = np.zeros((n, Bs.shape[2], As.shape[1]))
    flagged = []
    for k in range(n):
        hi = min(n, k + cfg.horizon_n)
        K, _, ok = riccati_window(As[k:hi], Bs[k:hi], Q, R, Q)
        if not ok:
            flagged.append(k)
            K = gains[k - 1] if k > 0 else np.zeros_like(gains[0])
        gains[k] = K
    return GainSchedule(gains, flagged)


def terminal_weight(A: np.ndarray, B: np.ndarray, cfg: ControllerConfig) -> np.ndarray:
    """Configured ``P``, else the discrete Riccati fixed point, else ``10 Q``."""
    if cfg.p_terminal is not None:
        return np.asarray(cfg.p_terminal, dtype=float)
    try:
        P = solve_discrete_are(A, B, cfg.Q, cfg.R)
        if np.all(np.isfinite(P)) and np.all(np.linalg.eigvalsh(0.5 * (P + P.T)) > 0):
            return 0.5 * (P + P.T)
    except (np.linalg.LinAlgError, ValueError):
        pass
    return 10.0 * cfg.Q


# ---------------------------------------------------------------------------
# MPC


@dataclass
class MPCSolution:
    inputs: np.ndarray  # (N, 3) normalised commands
    predicted: np.ndarray  # (N + 1, 6) linearised predicted states
    qp: QPResult
    soft: bool  # tube constraints relaxed with slack
    fallback: bool  # projected-gradient fallback used
    kkt: float
    tube_residual: float  # max violation of the tube rows by the predicted states, in set radii


def _condense(As, Bs, defects, N: int, Nc: int):
    """Prediction ``e = Phi e0 + Gam v + c`` for stacked deviations ``e_1..e_N``.

    ``v`` holds the first ``Nc`` inputs; later inputs repeat the last one.
    """
    nx, nu = Bs.shape[1], Bs.shape[2]
    T = np.zeros((N * nu, Nc * nu))
    for i in range(N):
        j = min(i, Nc - 1)
        T[i * nu:(i + 1) * nu, j * nu:(j + 1) * nu] = np.eye(nu)
    Phi = np.zeros((N * nx, nx))
    Gu = np.zeros((N * nx, N * nu))
    cvec = np.zeros(N * nx)
    M = np.eye(nx)
    for i in range(N):
        A, B = As[i], Bs[i]
        M = A @ M
        Phi[i * nx:(i + 1) * nx] = M
        prev = cvec[(i - 1) * nx:i * nx] if i else np.zeros(nx)
        cvec[i * nx:(i + 1) * nx] = A @ prev + defects[i]
        if i:
            Gu[i * nx:(i + 1) * nx, :i * nu] = A @ Gu[(i - 1) * nx:i * nx, :i * nu]
        Gu[i * nx:(i + 1) * nx, i * nu:(i + 1) * nu] = B
    return Phi, Gu @ T, cvec, T


def tube_halfspaces(z: Zonotope, shrink: float):
    """Rows ``(H, h)`` with ``H x <= h`` describing ``z`` shrunk about its centre.

    A full-rank square generator matrix (a parallelotope) gives its exact
    facets; anything else gives the interval hull. Rows are scaled so that a
    unit violation means one set radius, which keeps slack penalties
    comparable across stamps.
    """
    G = z.generators
    n = z.dim
    if G.shape == (n, n) and np.linalg.cond(G) < 1e12:
        M = np.linalg.inv(G)
        H = np.vstack([M, -M])
        h = np.concatenate([M @ z.center + shrink, -(M @ z.center) + shrink])
        return H, h
    iv = interval_hull(scale_generators(z, shrink))
    rad = np.maximum(0.5 * (iv.upper - iv.lower), 1e-300)
    E = np.diag(1.0 / rad)
    return np.vstack([E, -E]), np.concatenate([iv.upper / rad, -iv.lower / rad])


def mpc_solve(x_now, reference: np.ndarray, tube_window, model: DynamicsModel, cfg: ControllerConfig,
              dt: float, linearization=None) -> MPCSolution:
    """Condensed LTV MPC about the reference window.

    ``reference`` has at least ``N + 1`` states; ``tube_window[i]`` (optional,
    may contain None) constrains the predicted state ``i + 1`` to the interval
    hull of the set shrunk by ``tube_shrink`` about its centre.
    """
    N, Nc = cfg.horizon_n, cfg.control_horizon
    reference = np.asarray(reference, dtype=float)
    if len(reference) < N + 1:
        raise ValueError("reference window shorter than horizon + 1")
    if linearization is None:
        As, Bs = linearize_reference(reference[:N], model, dt)
    else:
        As, Bs = linearization
    defects = np.array([rk4_map(reference[i], np.zeros(3), dt, model) - reference[i + 1] for i in range(N)])
    sol = _solve_condensed(np.asarray(x_now, float) - reference[0], reference, As, Bs, defects,
                           tube_window, model, cfg, dt)
    if cfg.relinearize:
        # one pass about the nonlinear rollout of the first solution
        traj = [np.asarray(x_now, float)]
        for u in sol.inputs:
            traj.append(rk4_step(traj[-1], u, dt, model))
        As2, Bs2 = [], []
        defects2 = []
        for i in range(N):
            g, Dg = rk4_jacobians(traj[i], model.thrust_accel * sol.inputs[i], dt, model)
            As2.append(Dg[:, :6])
            Bs2.append(Dg[:, 6:] * model.thrust_accel)
            # affine term so that deviations are still measured from the reference
            defects2.append(g - Dg[:, 6:] @ (model.thrust_accel * sol.inputs[i])
                            - Dg[:, :6] @ (traj[i] - reference[i]) - reference[i + 1])
        sol = _solve_condensed(np.asarray(x_now, float) - reference[0], reference, np.array(As2),
                               np.array(Bs2), np.array(defects2), tube_window, model, cfg, dt)
    return sol


def _solve_condensed(e0, reference, As, Bs, defects, tube_window, model, cfg, dt) -> MPCSolution:
    N, Nc = cfg.horizon_n, cfg.control_horizon
    nu, nx = 3, 6
    Phi, Gam, cvec, T = _condense(As, Bs, defects, N, Nc)
    P = terminal_weight(As[-1], Bs[-1], cfg)
    Qbar = np.kron(np.eye(N), cfg.Q)
    Qbar[-nx:, -nx:] = P
    Rbar = T.T @ np.kron(np.eye(N), cfg.R) @ T
    free = Phi @ e0 + cvec
    H = Gam.T @ Qbar @ Gam + Rbar
    H = 0.5 * (H + H.T)
    f = Gam.T @ Qbar @ free
    # both sides scaled by a common factor for conditioning
    scale = 1.0 / max(1.0, np.abs(H).max())
    Hs, fs = H * scale, f * scale

    nv = Nc * nu
    lo_u = np.tile(cfg.lower, Nc)
    hi_u = np.tile(cfg.upper, Nc)
    C_box = np.vstack([np.eye(nv), -np.eye(nv)])
    d_box = np.concatenate([hi_u, -lo_u])

    # tube rows on the predicted states x_i = ref_i + free_i + Gam_i v, i = 1..N
    tube_rows, tube_rhs, tube_sets = [], [], []
    for i, z in enumerate((tube_window or [])[:N]):
        if z is None:
            continue
        Hz, hz = tube_halfspaces(z, cfg.tube_shrink)
        sl = slice(i * nx, (i + 1) * nx)
        tube_rows.append(Hz @ Gam[sl])
        tube_rhs.append(hz - Hz @ (reference[i + 1] + free[sl]))
        tube_sets.append((i, Hz, hz))
    C_tube = np.vstack(tube_rows) if tube_rows else np.zeros((0, nv))
    d_tube = np.concatenate(tube_rhs) if tube_rhs else np.zeros(0)
    C = np.vstack([C_box, C_tube])
    d = np.concatenate([d_box, d_tube])
    res = solve_qp(Hs, fs, C, d)
    soft, fallback = False, False
    kkt = kkt_residual(Hs, fs, C, d, res)
    if not res.ok and C_tube.size:
        soft = True
        res, kkt = _solve_soft(Hs, fs, C_box, d_box, C_tube, d_tube, cfg.soft_penalty * scale)
    v = res.x[:nv]
    if not res.ok:
        fallback = True
        v = solve_box_projected_gradient(Hs, fs, lo_u, hi_u)
        res = QPResult(v, np.zeros(len(d_box)), "fallback", res.iterations, [])
        kkt = float("nan")
    v = np.clip(v, lo_u, hi_u)  # rounding guard only; feasible solutions are already inside
    U = (T @ v).reshape(N, nu)
    e = (free + Gam @ v).reshape(N, nx)
    predicted = np.vstack([reference[0] + e0, reference[1:N + 1] + e])
    tube_res = 0.0
    for i, Hz, hz in tube_sets:
        tube_res = max(tube_res, float(np.max(Hz @ predicted[i + 1] - hz)))
    return MPCSolution(U, predicted, res, soft, fallback, kkt, tube_res)


def _solve_soft(H, f, C_box, d_box, C_tube, d_tube, penalty):
    """Tube rows relaxed by nonnegative slack with quadratic cost ``penalty``.

    Returns the result on the joint variables ``[v; s]`` with its KKT residual.
    """
    nv, ns = H.shape[0], C_tube.shape[0]
    H2 = np.zeros((nv + ns, nv + ns))
    H2[:nv, :nv] = H
    H2[nv:, nv:] = penalty * np.eye(ns)
    f2 = np.concatenate([f, np.zeros(ns)])
    C2 = np.vstack([
        np.hstack([C_box, np.zeros((C_box.shape[0], ns))]),
        np.hstack([C_tube, -np.eye(ns)]),
        np.hstack([np.zeros((ns, nv)), -np.eye(ns)]),
    ])
    d2 = np.concatenate([d_box, d_tube, np.zeros(ns)])
    res = solve_qp(H2, f2, C2, d2)
    return res, kkt_residual(H2, f2, C2, d2, res)


# ---------------------------------------------------------------------------
# closed-loop simulation helpers


def reference_trajectory(x0, model: DynamicsModel, dt: float, n_steps: int) -> np.ndarray:
    """Ballistic RK4 trajectory; equals the centre sequence of a singleton tube."""
    out = np.empty((n_steps + 1, 6))
    out[0] = x0
    for k in range(n_steps):
        out[k + 1] = rk4_map(out[k], np.zeros(3), dt, model)
    return out


def sample_disturbances(w: Zonotope | None, n: int, rng: np.random.Generator) -> np.ndarray:
    """Velocity increments, uniform in the generator coefficients."""
    if w is None or w.n_generators == 0:
        base = np.zeros(3) if w is None else w.center
        return np.tile(base, (n, 1))
    xi = rng.uniform(-1.0, 1.0, size=(n, w.n_generators))
    return w.center + xi @ w.generators.T


def _apply(x, u, w, dt, model):
    x_next = rk4_step(x, u, dt, model)
    x_next[3:] += w
    return x_next


def delta_v_mps(inputs: np.ndarray, model: DynamicsModel, dt: float) -> float:
    """``sum |u_k| * (T_max / m) * dt`` in m/s (``dt`` in model time units)."""
    inputs = np.atleast_2d(inputs)
    if inputs.size == 0:
        return 0.0
    return float(np.linalg.norm(inputs, axis=1).sum() * (model.t_max / model.mass) * dt * model.time_scale)


# ---------------------------------------------------------------------------
# tracking comparison


@dataclass
class TrackingMetrics:
    effort: float
    tracking_error: float
    wall_time_s: float
    iter_time_s: float
    inputs: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"effort": self.effort, "tracking_error": self.tracking_error,
                "wall_time_s": self.wall_time_s, "iter_time_s": self.iter_time_s}


def tracking_compare(reference: np.ndarray, model: DynamicsModel, cfg: ControllerConfig, dt: float,
                     seed: int, disturbance: Zonotope | None = None,
                     initial_set: Zonotope | None = None) -> dict:
    """Closed-loop LQR and MPC over the same reference and disturbance realisation.

    The truth starts at a point drawn from ``initial_set`` (centred on the
    first reference state if given) and receives one velocity increment per
    step. The last ``horizon_n`` reference stamps only feed prediction windows.
    """
    reference = np.asarray(reference, dtype=float)
    n_steps = len(reference) - 1 - cfg.horizon_n
    if n_steps < 1:
        raise ValueError("reference too short for the horizon")
    rng = np.random.default_rng(seed)
    x0 = reference[0] if initial_set is None else initial_set.sample(1, rng)[0]
    W = sample_disturbances(disturbance, n_steps, rng)
    lin = linearize_reference(reference, model, dt)
    sched = lqr_gains(reference, model, cfg, dt, linearization=lin)

    def lqr_policy(k, x):
        return np.clip(-sched.gains[k] @ (x - reference[k]), cfg.lower, cfg.upper)

    def mpc_policy(k, x):
        win = (lin[0][k:k + cfg.horizon_n], lin[1][k:k + cfg.horizon_n])
        return mpc_solve(x, reference[k:k + cfg.horizon_n + 1], None, model, cfg, dt, linearization=win).inputs[0]

    out = {}
    for name, policy in (("lqr", lqr_policy), ("mpc", mpc_policy)):
        x = x0.copy()
        xs, us = [x], []
        t0 = time.perf_counter()
        for k in range(n_steps):
            u = policy(k, x)
            us.append(u)
            x = _apply(x, u, W[k], dt, model)
            xs.append(x)
        wall = time.perf_counter() - t0
        xs, us = np.array(xs), np.array(us)
        out[name] = TrackingMetrics(
            effort=float(np.linalg.norm(us, axis=1).sum()),
            tracking_error=float(np.linalg.norm(xs - reference[:n_steps + 1], axis=1).sum()),
            wall_time_s=wall,
            iter_time_s=wall / n_steps,
            inputs=us,
            states=xs,
        )
    out["lqr_flagged_stamps"] = sched.flagged
    return out


# ---------------------------------------------------------------------------
# station keeping


@dataclass
class StationKeepingLog:
    activation_events: list = field(default_factory=list)  # (time, state)
    deactivation_events: list = field(default_factory=list)  # (time, state)
    burns: list = field(default_factory=list)  # (time, u)
    delta_v_total: float = 0.0  # m/s
    containment_flags: list = field(default_factory=list)  # per stamp, truth inside the monitored set
    active_flags: list = field(default_factory=list)  # per stamp, MPC on during the step
    refresh_times: list = field(default_factory=list)
    apolune_times: list = field(default_factory=list)  # refined to dt / 100
    soft_solves: int = 0
    fallback_continuous: bool = False
    message: str = ""

    @property
    def episodes(self) -> int:
        return len(self.activation_events)

    @property
    def recovered_fraction(self) -> float:
        """Share of activations that ended with re-entry into the shrunk tube."""
        if not self.activation_events:
            return 1.0
        return len(self.deactivation_events) / len(self.activation_events)


def _r2(x, model):
    return np.linalg.norm(np.asarray(x)[..., :3] - model.primaries[-1][1], axis=-1)


def _r2_rate(x, model):
    rel = x[:3] - model.primaries[-1][1]
    return float(rel @ x[3:6]) / float(np.linalg.norm(rel))


def apolune_times(reference: np.ndarray, model: DynamicsModel, dt: float) -> list:
    """Times where the distance to the second primary peaks (``dr/dt`` from + to -).

    Each sign change between two stamps is refined by bisection on the RK4
    flow until the bracket is below ``dt / 100``.
    """
    rates = np.array([_r2_rate(x, model) for x in reference])
    out = []
    for k in range(len(reference) - 1):
        if rates[k] > 0 and rates[k + 1] <= 0:
            lo, hi = 0.0, dt
            while hi - lo > dt / 100:
                mid = 0.5 * (lo + hi)
                xm = rk4_map(reference[k], np.zeros(3), mid, model)
                if _r2_rate(xm, model) > 0:
                    lo = mid
                else:
                    hi = mid
            out.append(k * dt + 0.5 * (lo + hi))
    return out


def monitor_tube(x_nom, model: DynamicsModel, cfg: ControllerConfig, dt: float, n_steps: int,
                 disturbance: Zonotope | None = None) -> ReachTube:
    """SDC tube from the deadband box about ``x_nom``, each stamp enclosed by a parallelotope.

    The parallelotope keeps the tube sound and gives the MPC exact facets.
    """
    G = np.diag([cfg.tube_pos] * 3 + [cfg.tube_vel] * 3)
    rc = SDCReachConfig(dt, err_tol=np.inf, max_splits=0, disturbance_set=disturbance)
    tube = sdc_propagate_tube(Zonotope(x_nom, G), model, rc, n_steps * dt)
    tube.sets = [[parallelotope_hull(z)[0] for z in s] for s in tube.sets]
    return tube


def station_keep(x0, t_final: float, model: DynamicsModel, cfg: ControllerConfig, dt: float, seed: int,
                 disturbance: Zonotope | None = None, tube_disturbance: Zonotope | None = None):
    """Event-triggered MPC station keeping about the ballistic reference from ``x0``.

    A monitoring tube (SDC method, initial half-widths ``tube_pos`` /
    ``tube_vel``) is propagated from the reference state at the start and at
    every apolune. MPC switches on when the truth leaves the current tube set
    and off once it is back inside the ``tube_shrink``-scaled set. Returns the
    log and the truth trajectory.
    """
    n_steps = int(round(t_final / dt))
    N = cfg.horizon_n
    reference = reference_trajectory(x0, model, dt, n_steps + N)
    lin = linearize_reference(reference, model, dt)
    rng = np.random.default_rng(seed)
    W = sample_disturbances(disturbance, n_steps, rng)
    log = StationKeepingLog()
    log.apolune_times = [t for t in apolune_times(reference[:n_steps + 1], model, dt) if t < t_final]
    refresh = sorted({0} | {int(np.ceil(t / dt - 1e-9)) for t in log.apolune_times} - {n_steps})

    x = np.array(reference[0], dtype=float)
    xs = [x.copy()]
    active = False
    tube, tube_start = None, 0
    for k in range(n_steps):
        if k in refresh or tube is None:
            nxt = [r for r in refresh if r > k]
            length = (nxt[0] if nxt else n_steps) - k + N
            tube = monitor_tube(reference[k], model, cfg, dt, length, tube_disturbance)
            tube_start = k
            log.refresh_times.append(k * dt)
            if not tube.completed or tube.diverged:
                log.fallback_continuous = True
                log.message = f"monitoring tube diverged at t = {k * dt:.6g}; continuous MPC from here"
        j = k - tube_start
        if log.fallback_continuous:
            inside = False
            if not active:
                active = True
                log.activation_events.append((k * dt, x.copy()))
        else:
            inside = tube.contains(j, x, cfg.trigger_tol)
            if not active and not inside:
                active = True
                log.activation_events.append((k * dt, x.copy()))
            elif active and _inside_shrunk(tube, j, x, cfg):
                active = False
                log.deactivation_events.append((k * dt, x.copy()))
        log.containment_flags.append(bool(inside))
        log.active_flags.append(active)
        u = np.zeros(3)
        if active:
            win = None
            if not log.fallback_continuous:
                win = [_tube_set(tube, j + i + 1) for i in range(N)]
            sol = mpc_solve(x, reference[k:k + N + 1], win, model, cfg, dt,
                            linearization=(lin[0][k:k + N], lin[1][k:k + N]))
            u = sol.inputs[0]
            log.soft_solves += int(sol.soft)
            if np.any(u != 0):
                log.burns.append((k * dt, u.copy()))
        x = _apply(x, u, W[k], dt, model)
        xs.append(x.copy())
    log.delta_v_total = delta_v_mps(np.array([b[1] for b in log.burns]), model, dt)
    return log, np.array(xs)


def _tube_set(tube: ReachTube, j: int):
    if j >= len(tube):
        return None
    return tube.sets[j][0]


def _inside_shrunk(tube: ReachTube, j: int, x, cfg: ControllerConfig) -> bool:
    z = _tube_set(tube, j)
    return z is not None and contains_point(scale_generators(z, cfg.tube_shrink), x, cfg.trigger_tol)
