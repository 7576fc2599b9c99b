"""Scenario-level operations: reach tubes, target queries, Monte Carlo
validation, station keeping and the LQR/MPC comparison.

These functions compute and return data; ``cli`` turns the results into files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .control import (StationKeepingLog, delta_v_mps, reference_trajectory, sample_disturbances, station_keep,
                      tracking_compare)
from .dynamics import rk4_map
from .kepler import body_position
from .reach_sdc import SDCReachConfig, sdc_propagate_tube
from .reach_taylor import TaylorReachConfig, propagate_tube
from .scenario import ConfigError, ScenarioConfig
from .setops import contains_points, project
from .tube import ReachTube, step_schedule


def methods_for(cfg: ScenarioConfig, override: str | None = None) -> list:
    m = override or cfg.method
    return ["taylor", "sdc"] if m == "both" else [m]


@dataclass
class ReachRun:
    tube: ReachTube
    wall_time_s: float

    def summary(self) -> dict:
        t = self.tube
        err = np.max([np.max(e, initial=0.0) for e in t.err_log], initial=0.0)
        return {
            "stamps": len(t),
            "final_time": float(t.times[-1]),
            "splits": len(t.split_events),
            "max_children": max(len(s) for s in t.sets),
            "max_remainder": float(err),
            "wall_time_s": self.wall_time_s,
            "diverged": t.diverged,
            "divergence_step": t.divergence_step,
            "completed": t.completed,
            "message": t.message,
        }


def run_reach(cfg: ScenarioConfig, method: str, t_final: float | None = None) -> ReachRun:
    """Propagate the configured initial set with one method."""
    t_final = cfg.horizon if t_final is None else t_final
    z0 = cfg.initial_set()
    u_set, w_set = cfg.input_set(), cfg.disturbance_set()
    t0 = time.perf_counter()
    if method == "taylor":
        rc = TaylorReachConfig(cfg.dt, cfg.remainder_tol, cfg.max_splits, cfg.max_order, u_set, w_set,
                               cfg.truncation_safety)
        tube = propagate_tube(z0, cfg.model, rc, t_final)
    elif method == "sdc":
        rc = SDCReachConfig(cfg.dt, cfg.err_tol, cfg.max_splits, cfg.max_order, u_set, w_set,
                            cfg.truncation_safety)
        tube = sdc_propagate_tube(z0, cfg.model, rc, t_final)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ReachRun(tube, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# target query


@dataclass
class TargetVerdict:
    tof_days: float
    reachable: bool | None  # None when the tube stopped before this time of flight
    stamp: int | None
    target_position_km: np.ndarray

    def to_dict(self) -> dict:
        return {
            "tof_days": self.tof_days,
            "reachable": self.reachable,
            "verdict": {True: "reachable", False: "not_reachable", None: "unknown"}[self.reachable],
            "stamp": self.stamp,
            "target_position_km": self.target_position_km.tolist(),
        }


def target_position(cfg: ScenarioConfig, tof_days: float) -> np.ndarray:
    if cfg.target is None:
        raise ConfigError("target", "missing target section")
    return body_position(cfg.target.body, cfg.target.epoch_jd + tof_days)


def target_query(cfg: ScenarioConfig, tube: ReachTube, tofs=None) -> list:
    """Is the target body inside the position projection of the tube at each time of flight?"""
    if cfg.target is None:
        raise ConfigError("target", "missing target section")
    tofs = cfg.target.tof_days if tofs is None else tofs
    times = np.asarray(tube.times)
    out = []
    for tof in tofs:
        t = tof * 86400.0 / cfg.model.time_scale
        steps = t / cfg.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("target.tof_days", f"{tof} days is not a whole number of steps")
        r = target_position(cfg, tof)
        k = np.flatnonzero(np.abs(times - t) <= 1e-9 * max(1.0, t))
        if k.size == 0:
            out.append(TargetVerdict(float(tof), None, None, r))
            continue
        k = int(k[0])
        hit = any(bool(contains_points(project(z, [0, 1, 2]), r[None, :])[0]) for z in tube.sets[k])
        out.append(TargetVerdict(float(tof), hit, k, r))
    return out


# ---------------------------------------------------------------------------
# Monte Carlo validation


@dataclass
class ValidationReport:
    method: str
    n_samples: int
    inflate: float
    times: np.ndarray
    fractions: np.ndarray  # per stamp, share of samples inside the tube

    @property
    def all_contained(self) -> bool:
        return bool(np.all(self.fractions == 1.0))

    @property
    def first_escape(self) -> int | None:
        bad = np.flatnonzero(self.fractions < 1.0)
        return int(bad[0]) if bad.size else None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_samples": self.n_samples,
            "inflate": self.inflate,
            "all_contained": self.all_contained,
            "first_escape": self.first_escape,
            "min_fraction": float(self.fractions.min()),
            "times": self.times.tolist(),
            "fractions": self.fractions.tolist(),
        }


def sample_truth(cfg: ScenarioConfig, n_samples: int, n_steps: int, seed: int, inflate: float = 1.0,
                 substeps: int = 10, t_final: float | None = None) -> np.ndarray:
    """Trajectories of sampled initial states, inputs and disturbances: ``(n_steps + 1, n, 6)``.

    Inputs are piecewise constant over each tube step; the truth integrates
    with ``substeps`` RK4 steps per tube step and receives the disturbance
    increment at the end of each step, as the tube does.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    t_final = cfg.horizon if t_final is None else t_final
    hs = step_schedule(cfg.dt, t_final)[:n_steps]
    X = cfg.initial_set(inflate).sample(n_samples, rng)
    u_set, w_set = cfg.input_set(inflate), cfg.disturbance_set(inflate)
    out = np.empty((len(hs) + 1, n_samples, 6))
    out[0] = X
    for k, h in enumerate(hs):
        A = u_set.sample(n_samples, rng) if u_set is not None else np.zeros((n_samples, 3))
        for _ in range(substeps):
            X = rk4_map(X, A, h / substeps, cfg.model)
        X = X.copy()
        X[:, 3:] += sample_disturbances(w_set, n_samples, rng)
        out[k + 1] = X
    return out


def tube_membership(tube: ReachTube, k: int, X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    inside = np.zeros(len(X), dtype=bool)
    for z in tube.sets[k]:
        rest = ~inside
        if not rest.any():
            break
        inside[rest] = contains_points(z, X[rest], tol)
    return inside


def validate_tube(cfg: ScenarioConfig, tube: ReachTube, n_samples: int, seed: int, inflate: float = 1.0,
                  tol: float = 1e-9) -> ValidationReport:
    """Containment fraction of sampled truth trajectories at every stamp of ``tube``."""
    traj = sample_truth(cfg, n_samples, len(tube) - 1, seed, inflate, t_final=tube.times[-1] if len(tube) > 1 else None)
    fractions = np.array([tube_membership(tube, k, traj[k], tol).mean() for k in range(len(tube))])
    return ValidationReport(tube.method, n_samples, inflate, np.asarray(tube.times, dtype=float), fractions)


# ---------------------------------------------------------------------------
# station keeping


@dataclass
class StationKeepingRun:
    log: StationKeepingLog
    times: np.ndarray
    states: np.ndarray
    reference: np.ndarray
    inputs: np.ndarray  # per step, zero when coasting
    wall_time_s: float
    horizon_n: int
    extra: dict = field(default_factory=dict)

    @property
    def open_episode(self) -> bool:
        return len(self.log.activation_events) > len(self.log.deactivation_events)

    @property
    def post_correction_contained(self) -> bool:
        """Every activation ended with re-entry into the shrunk tube.

        An episode still open at the final stamp counts only if it began more
        than one prediction horizon before the end.
        """
        log = self.log
        n_open = len(log.activation_events) - len(log.deactivation_events)
        if n_open == 0:
            return True
        if n_open > 1 or log.fallback_continuous:
            return False
        t_start = log.activation_events[-1][0]
        return self.times[-1] - t_start <= self.horizon_n * (self.times[1] - self.times[0]) + 1e-12

    def metrics(self) -> dict:
        n = len(self.inputs)
        return {
            "effort": float(np.linalg.norm(self.inputs, axis=1).sum()),
            "tracking_error": float(np.linalg.norm(self.states - self.reference, axis=1).sum()),
            "wall_time_s": self.wall_time_s,
            "iter_time_s": self.wall_time_s / max(n, 1),
            "activations": self.log.episodes,
            "delta_v_mps": self.log.delta_v_total,
        }

    def events(self) -> dict:
        log = self.log
        return {
            "activations": [{"t": t, "state": x.tolist()} for t, x in log.activation_events],
            "deactivations": [{"t": t, "state": x.tolist()} for t, x in log.deactivation_events],
            "refresh_times": list(log.refresh_times),
            "apolune_times": list(log.apolune_times),
            "soft_solves": log.soft_solves,
            "fallback_continuous": log.fallback_continuous,
            "post_correction_contained": self.post_correction_contained,
            "message": log.message,
        }


def run_stationkeep(cfg: ScenarioConfig, seed: int | None = None) -> StationKeepingRun:
    if not cfg.model.rotating:
        raise ConfigError("model.kind", "station keeping needs a rotating-frame model")
    seed = cfg.seed if seed is None else seed
    t_final = cfg.stationkeep_horizon or cfg.horizon
    n_steps = int(round(t_final / cfg.dt))
    t0 = time.perf_counter()
    log, xs = station_keep(cfg.initial_state, n_steps * cfg.dt, cfg.model, cfg.controller, cfg.dt, seed,
                           disturbance=cfg.disturbance_set())
    wall = time.perf_counter() - t0
    times = cfg.dt * np.arange(n_steps + 1)
    burns = {int(round(t / cfg.dt)): u for t, u in log.burns}
    inputs = np.array([burns.get(k, np.zeros(3)) for k in range(n_steps)]).reshape(n_steps, 3)
    ref = reference_trajectory(cfg.initial_state, cfg.model, cfg.dt, n_steps)
    return StationKeepingRun(log, times, xs, ref, inputs, wall, cfg.controller.horizon_n)


def recompute_delta_v(inputs: np.ndarray, cfg: ScenarioConfig) -> float:
    return delta_v_mps(inputs, cfg.model, cfg.dt)


# ---------------------------------------------------------------------------
# tracking comparison


def run_track_compare(cfg: ScenarioConfig, seed: int | None = None) -> dict:
    """Closed-loop LQR and MPC over the ballistic reference from the configured state."""
    if not cfg.model.rotating:
        raise ConfigError("model.kind", "the tracking comparison needs a rotating-frame model")
    seed = cfg.seed if seed is None else seed
    N = cfg.controller.horizon_n
    ref = reference_trajectory(cfg.initial_state, cfg.model, cfg.dt, cfg.n_steps + N)
    init = cfg.initial_set() if cfg.pos_gen or cfg.vel_gen else None
    res = tracking_compare(ref, cfg.model, cfg.controller, cfg.dt, seed, cfg.disturbance_set(), init)
    out = {}
    for name in ("lqr", "mpc"):
        m = res[name]
        d = m.to_dict()
        d["activations"] = 1  # both controllers run continuously
        d["delta_v_mps"] = delta_v_mps(m.inputs, cfg.model, cfg.dt)
        out[name] = d
    out["lqr_flagged_stamps"] = [int(k) for k in res["lqr_flagged_stamps"]]
    out["mpc_better_effort"] = out["mpc"]["effort"] < out["lqr"]["effort"]
    out["mpc_better_error"] = out["mpc"]["tracking_error"] < out["lqr"]["tracking_error"]
    out["_trajectories"] = {name: (res[name].states, res[name].inputs) for name in ("lqr", "mpc")}
    return out
