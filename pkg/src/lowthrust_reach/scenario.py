"""Scenario files: TOML with an explicit unit on every dimensional field.

Dimensional keys carry their unit as a suffix (``t_max_n``, ``dt_hours``,
``horizon_days``); exactly one spelling of each quantity may appear. Errors
name the offending field path, e.g. ``reach.dt``.
"""

from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import ControllerConfig, build_thrust_set
from .kepler import BODIES
from .dynamics import MU_EARTH_MOON, MU_SUN_KM3_S2, DynamicsModel, ModelKind
from .setops import Zonotope

METHODS = ("taylor", "sdc", "both")
TIME_UNITS_S = {"s": 1.0, "hours": 3600.0, "days": 86400.0}
MODEL_UNITS = {ModelKind.TWO_BODY: "km_kms", ModelKind.CR3BP: "nondimensional",
               ModelKind.ROTATING_FREE: "nondimensional"}
MODEL_FRAMES = {ModelKind.TWO_BODY: "inertial", ModelKind.CR3BP: "rotating",
                ModelKind.ROTATING_FREE: "rotating"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class TargetSpec:
    body: str
    epoch_jd: float
    tof_days: tuple


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    model: DynamicsModel
    initial_state: np.ndarray  # model units
    pos_gen: float
    vel_gen: float
    thrust: bool
    n_extra_dirs: int
    disturbance_vel: float  # per-step velocity increment half-width, model units
    method: str
    dt: float  # model time units
    horizon: float  # model time units
    max_order: float
    max_splits: int
    remainder_tol: float
    err_tol: float
    truncation_safety: float
    controller: ControllerConfig
    seed: int
    target: TargetSpec | None = None
    stationkeep_horizon: float | None = None
    source_hash: str = field(default="", compare=False)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def initial_set(self, inflate: float = 1.0) -> Zonotope:
        G = np.diag([self.pos_gen] * 3 + [self.vel_gen] * 3) * inflate
        return Zonotope(self.initial_state, G)

    def input_set(self, inflate: float = 1.0) -> Zonotope | None:
        """Thrust enclosure in model acceleration units, or None when thrust is off."""
        if not self.thrust or self.model.t_max == 0:
            return None
        ts = build_thrust_set(self.model.t_max, self.model.mass, self.n_extra_dirs)
        return ts.scaled(inflate * self.model.thrust_accel / ts.radius)

    def disturbance_set(self, inflate: float = 1.0) -> Zonotope | None:
        if self.disturbance_vel == 0:
            return None
        return Zonotope(np.zeros(3), inflate * self.disturbance_vel * np.eye(3))

    def seconds(self, t_model: float) -> float:
        return t_model * self.model.time_scale


def _get(d: dict, path: str, key: str, kind=float, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing")
        return default
    v = d[key]
    full = f"{path}.{key}" if path else key
    try:
        if kind is float:
            if isinstance(v, bool):
                raise TypeError
            v = float(v)
            if not math.isfinite(v):
                raise ConfigError(full, "must be finite")
        elif kind is int:
            if isinstance(v, bool) or int(v) != v:
                raise TypeError
            v = int(v)
        elif kind is bool:
            if not isinstance(v, bool):
                raise TypeError
        elif kind is str:
            if not isinstance(v, str):
                raise TypeError
    except (TypeError, ValueError):
        raise ConfigError(full, f"expected {kind.__name__}, got {v!r}") from None
    return v


def _time(d: dict, path: str, base: str, model: DynamicsModel, required=True):
    """Read ``<base>_<unit>`` (unit in s/hours/days/nd) and return model time units."""
    found = [k for k in d if k.startswith(base + "_") and k[len(base) + 1:] in (*TIME_UNITS_S, "nd")]
    stray = [k for k in d if k == base]
    if stray:
        raise ConfigError(f"{path}.{base}", "needs a unit suffix (_s, _hours, _days or _nd)")
    if not found:
        if required:
            raise ConfigError(f"{path}.{base}", "missing (give one of _s, _hours, _days, _nd)")
        return None
    if len(found) > 1:
        raise ConfigError(f"{path}.{base}", f"given more than once: {', '.join(sorted(found))}")
    key = found[0]
    v = _get(d, path, key)
    if not v > 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    unit = key[len(base) + 1:]
    if unit == "nd":
        if model.kind is ModelKind.TWO_BODY:
            raise ConfigError(f"{path}.{key}", "nondimensional time needs a CR3BP-type model")
        return v
    return v * TIME_UNITS_S[unit] / model.time_scale


def _model(d: dict) -> DynamicsModel:
    path = "model"
    kind_s = _get(d, path, "kind", str, required=True)
    try:
        kind = ModelKind(kind_s)
    except ValueError:
        raise ConfigError(f"{path}.kind", f"unknown model {kind_s!r}") from None
    t_max = _get(d, path, "t_max_n", default=0.0)
    mass = _get(d, path, "mass_kg", default=1000.0)
    isp = _get(d, path, "isp_s", default=3000.0)
    if t_max < 0:
        raise ConfigError(f"{path}.t_max_n", "must be nonnegative")
    if not mass > 0:
        raise ConfigError(f"{path}.mass_kg", "must be positive")
    if kind is ModelKind.TWO_BODY:
        if "mu_nd" in d:
            raise ConfigError(f"{path}.mu_nd", "two-body models take mu_km3_s2")
        mu = _get(d, path, "mu_km3_s2", default=MU_SUN_KM3_S2)
        return DynamicsModel.two_body(t_max, mass, isp, mu)
    if "mu_km3_s2" in d:
        raise ConfigError(f"{path}.mu_km3_s2", "rotating models take the mass ratio mu_nd")
    length = _get(d, path, "length_scale_km", default=None)
    time_s = _get(d, path, "time_scale_s", default=None)
    extra = {}
    if length is not None:
        extra["length_scale"] = length
    if time_s is not None:
        extra["time_scale"] = time_s
    if kind is ModelKind.CR3BP:
        mu = _get(d, path, "mu_nd", default=MU_EARTH_MOON)
        try:
            return DynamicsModel.cr3bp(t_max, mass, isp, mu, **extra)
        except ValueError as exc:
            raise ConfigError(f"{path}.mu_nd", str(exc)) from None
    return DynamicsModel.rotating_free(t_max, mass, **extra)


def parse_config(data: dict, source_hash: str = "") -> ScenarioConfig:
    name = _get(data, "", "name", str, default="scenario")
    seed = _get(data, "", "seed", int, default=0)
    if seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    model = _model(data.get("model", {}) if isinstance(data.get("model"), dict) else {})

    ini = data.get("initial", {})
    units = _get(ini, "initial", "units", str, required=True)
    frame = _get(ini, "initial", "frame", str, required=True)
    if units != MODEL_UNITS[model.kind]:
        raise ConfigError("initial.units", f"{model.kind.value} model expects {MODEL_UNITS[model.kind]!r}, got {units!r}")
    if frame != MODEL_FRAMES[model.kind]:
        raise ConfigError("initial.frame", f"{model.kind.value} model expects {MODEL_FRAMES[model.kind]!r}, got {frame!r}")
    state = ini.get("state")
    if not isinstance(state, list) or len(state) != 6:
        raise ConfigError("initial.state", "expected a list of 6 numbers")
    try:
        x0 = np.array([float(v) for v in state])
    except (TypeError, ValueError):
        raise ConfigError("initial.state", "entries must be numbers") from None
    if not np.all(np.isfinite(x0)):
        raise ConfigError("initial.state", "entries must be finite")
    pos_gen = _get(ini, "initial", "pos_gen", default=0.0)
    vel_gen = _get(ini, "initial", "vel_gen", default=0.0)
    if pos_gen < 0 or vel_gen < 0:
        raise ConfigError("initial.pos_gen" if pos_gen < 0 else "initial.vel_gen", "must be nonnegative")

    th = data.get("thrust", {})
    thrust = _get(th, "thrust", "enabled", bool, default=True)
    n_extra = _get(th, "thrust", "n_extra_dirs", int, default=0)
    if n_extra < 0:
        raise ConfigError("thrust.n_extra_dirs", "must be nonnegative")

    dist = data.get("disturbance", {})
    w = _get(dist, "disturbance", "vel_gen", default=0.0)
    if w < 0:
        raise ConfigError("disturbance.vel_gen", "must be nonnegative")

    rc = data.get("reach", {})
    method = _get(rc, "reach", "method", str, default="both").lower()
    if method not in METHODS:
        raise ConfigError("reach.method", f"expected one of {METHODS}, got {method!r}")
    horizon = _time(rc, "reach", "horizon", model)
    if "steps" in rc:
        steps = _get(rc, "reach", "steps", int)
        if steps < 1:
            raise ConfigError("reach.steps", "must be at least 1")
        if _time(rc, "reach", "dt", model, required=False) is not None:
            raise ConfigError("reach.steps", "give either steps or dt, not both")
        dt = horizon / steps
    else:
        dt = _time(rc, "reach", "dt", model)
    ratio = horizon / dt
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
        raise ConfigError("reach.horizon", "must be a whole number of steps dt")
    max_order = _get(rc, "reach", "max_order", default=5.0)
    max_splits = _get(rc, "reach", "max_splits", int, default=8)
    remainder_tol = _get(rc, "reach", "remainder_tol", default=1e-6)
    err_tol = _get(rc, "reach", "err_tol", default=1e-5)
    truncation_safety = _get(rc, "reach", "truncation_safety", default=2.0)
    if max_order < 1:
        raise ConfigError("reach.max_order", "must be at least 1")
    if max_splits < 0:
        raise ConfigError("reach.max_splits", "must be nonnegative")
    if not remainder_tol > 0:
        raise ConfigError("reach.remainder_tol", "must be positive")
    if not err_tol > 0:
        raise ConfigError("reach.err_tol", "must be positive")
    if truncation_safety < 0:
        raise ConfigError("reach.truncation_safety", "must be nonnegative")

    cc = data.get("controller", {})
    kw = {}
    for key, kind in (("horizon_n", int), ("control_horizon", int), ("tube_shrink", float),
                      ("soft_penalty", float), ("relinearize", bool), ("tube_pos", float),
                      ("tube_vel", float), ("trigger_tol", float)):
        v = _get(cc, "controller", key, kind)
        if v is not None:
            kw[key] = v
    for key, n in (("q_weights", 6), ("r_weights", 3), ("u_min", 3), ("u_max", 3)):
        if key in cc:
            v = cc[key]
            if not isinstance(v, list) or len(v) != n:
                raise ConfigError(f"controller.{key}", f"expected a list of {n} numbers")
            kw[key] = tuple(float(e) for e in v)
    try:
        controller = ControllerConfig(**kw)
    except ValueError as exc:
        raise ConfigError("controller", str(exc)) from None
    sk_h = _time(cc, "controller", "stationkeep_horizon", model, required=False)

    target = None
    if "target" in data:
        td = data["target"]
        body = _get(td, "target", "body", str, required=True).lower()
        if body not in BODIES:
            raise ConfigError("target.body", f"unknown body {body!r}")
        epoch = _get(td, "target", "epoch_jd", required=True)
        tofs = td.get("tof_days", [])
        if not isinstance(tofs, list) or not all(isinstance(t, (int, float)) and t > 0 for t in tofs):
            raise ConfigError("target.tof_days", "expected a list of positive numbers")
        if model.kind is not ModelKind.TWO_BODY:
            raise ConfigError("target", "target queries need a two-body model")
        target = TargetSpec(body, epoch, tuple(float(t) for t in tofs))

    return ScenarioConfig(
        name=name, model=model, initial_state=x0, pos_gen=pos_gen, vel_gen=vel_gen, thrust=thrust,
        n_extra_dirs=n_extra, disturbance_vel=w, method=method, dt=dt, horizon=horizon,
        max_order=max_order, max_splits=max_splits, remainder_tol=remainder_tol, err_tol=err_tol,
        truncation_safety=truncation_safety,
        controller=controller, seed=seed, target=target, stationkeep_horizon=sk_h, source_hash=source_hash,
    )


def load_config(path) -> ScenarioConfig:
    raw = Path(path).read_bytes()
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML ({exc})") from None
    return parse_config(data, hashlib.sha256(raw).hexdigest())
