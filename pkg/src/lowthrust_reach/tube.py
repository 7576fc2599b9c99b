"""Reach tubes and the propagation driver shared by both reachability methods."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import SingularityError
from .setops import Zonotope, contains_point, reduce_order, split, volume_pos


@dataclass
class StepResult:
    """One propagated set plus the diagnostics the refinement rule needs.

    ``error`` is the per-component half-width of the bounding term that the
    tolerance is compared against; ``split_scores`` ranks the state
    generators of the *input* set by their contribution to that term.
    """

    set: Zonotope
    error: np.ndarray
    split_scores: np.ndarray
    info: dict = field(default_factory=dict)


@dataclass
class ReachTube:
    """Sets at discrete time stamps; each stamp may hold several split children."""

    times: list
    sets: list  # list[list[Zonotope]]
    err_log: list  # per stamp, componentwise max error over children
    split_events: list = field(default_factory=list)  # (step, generator index)
    diverged: bool = False
    divergence_step: int | None = None
    message: str = ""
    method: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.sets):
            raise ValueError("times and sets differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("tube times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def completed(self) -> bool:
        return not self.message.startswith("stopped")

    def contains(self, k: int, x, tol: float = 1e-9) -> bool:
        return any(contains_point(z, x, tol) for z in self.sets[k])

    def hull(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the interval hull over all children at stamp ``k``."""
        lo = np.min([z.center - np.abs(z.generators).sum(1) for z in self.sets[k]], axis=0)
        hi = np.max([z.center + np.abs(z.generators).sum(1) for z in self.sets[k]], axis=0)
        return lo, hi

    def centers(self) -> np.ndarray:
        """Mean of the child centers per stamp."""
        return np.array([np.mean([z.center for z in s], axis=0) for s in self.sets])

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "sets": [[z.to_dict() for z in s] for s in self.sets],
            "splits": [[int(k), int(j)] for k, j in self.split_events],
            "err_log": [np.asarray(e).tolist() for e in self.err_log],
            "diverged": self.diverged,
            "divergence_step": self.divergence_step,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict, method: str = "") -> "ReachTube":
        return cls(
            times=list(d["times"]),
            sets=[[Zonotope.from_dict(z) for z in s] for s in d["sets"]],
            err_log=[np.asarray(e, dtype=float) for e in d.get("err_log", [])],
            split_events=[tuple(e) for e in d.get("splits", [])],
            diverged=bool(d.get("diverged", False)),
            divergence_step=d.get("divergence_step"),
            message=d.get("message", ""),
            method=method or d.get("meta", {}).get("method", ""),
        )


def step_schedule(dt: float, t_final: float) -> list:
    """Step sizes covering ``[0, t_final]``; the last one may be shorter."""
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    n = max(1, math.ceil(t_final / dt - 1e-9))
    steps = [dt] * n
    last = t_final - (n - 1) * dt
    if abs(last - dt) > 1e-9 * dt:  # keep whole-step horizons exactly uniform
        steps[-1] = last
    return steps


def propagate(
    z0: Zonotope,
    step_fn: Callable[[Zonotope, float], StepResult],
    dt: float,
    t_final: float,
    tol: float,
    max_splits: int,
    max_order: float,
    method: str,
) -> ReachTube:
    """Iterate ``step_fn`` with forward-only bisection on tolerance violations.

    A set whose error exceeds ``tol`` is bisected along its highest-scoring
    generator and both halves are re-stepped, while the split budget lasts.
    Once it is spent the offending result is kept and the tube is flagged as
    diverged. A singularity stops propagation (flagged too).
    """
    tube = ReachTube([0.0], [[z0]], [np.zeros(z0.dim)], method=method)
    splits_used = 0
    active = [z0]
    t = 0.0
    for k, h in enumerate(step_schedule(dt, t_final), start=1):
        queue = list(active)
        nxt, errs = [], []
        while queue:
            z = queue.pop(0)
            try:
                res = step_fn(z, h)
            except SingularityError as exc:
                tube.diverged = True
                tube.divergence_step = tube.divergence_step or k
                tube.message = f"stopped at step {k}: {exc}"
                return tube
            if not (np.all(np.isfinite(res.set.center)) and np.all(np.isfinite(res.set.generators))):
                tube.diverged = True
                tube.divergence_step = tube.divergence_step or k
                tube.message = f"stopped at step {k}: non-finite set"
                return tube
            if np.max(res.error, initial=0.0) > tol:
                if splits_used < max_splits and z.n_generators > 0 and res.split_scores.size:
                    j = _pick_generator(z, res.split_scores)
                    queue[:0] = list(split(z, j))
                    tube.split_events.append((k, j))
                    splits_used += 1
                    continue
                if not tube.diverged:
                    tube.diverged = True
                    tube.divergence_step = k
                    tube.message = f"tolerance exceeded with split budget spent at step {k}"
            nxt.append(reduce_order(res.set, max_order))
            errs.append(res.error)
        active = nxt
        t += h
        tube.times.append(t)
        tube.sets.append(active)
        tube.err_log.append(np.max(errs, axis=0))
    return tube


def _pick_generator(z: Zonotope, scores: np.ndarray) -> int:
    """Highest score; ties go to the longer generator, then the lower index."""
    norms = np.linalg.norm(z.generators, axis=0)
    keys = [(-float(s), -float(n), j) for j, (s, n) in enumerate(zip(scores, norms))]
    return min(keys)[2]


def tube_volume_series(tube: ReachTube) -> np.ndarray:
    """``(time, log position volume)`` rows; children's volumes are summed.

    A stamp whose sets have zero volume gets ``-inf``.
    """
    out = np.empty((len(tube), 2))
    for k, (t, sets) in enumerate(zip(tube.times, tube.sets)):
        v = sum(volume_pos(z) for z in sets)
        out[k] = t, (math.log(v) if v > 0 else -math.inf)
    return out
