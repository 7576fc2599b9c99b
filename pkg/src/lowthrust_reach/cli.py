"""Command line: ``lowthrust-reach {reach,target,validate,stationkeep,compare}``.

Exit codes: 0 success, 2 configuration error, 3 divergence flag,
4 containment failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import export
from .experiments import (methods_for, run_reach, run_stationkeep, run_track_compare, target_query,
                          validate_tube)
from .scenario import ConfigError, ScenarioConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CONTAINMENT = 0, 2, 3, 4


def _units(cfg: ScenarioConfig) -> tuple[str, str]:
    if cfg.model.rotating:
        return "nondimensional", "nondimensional"
    return "km_kms", "s"


def _write_reach_files(out: Path, cfg: ScenarioConfig, method: str, run) -> None:
    units, tunits = _units(cfg)
    export.write_tube(out / f"tube_{method}.json", run.tube, cfg.source_hash, units, tunits)
    export.write_hull_csv(out / f"hull_{method}.csv", run.tube)
    export.write_volume_csv(out / f"volume_{method}.csv", run.tube)


def cmd_reach(cfg: ScenarioConfig, args) -> int:
    out = Path(args.out)
    summary = {"config": cfg.name, "config_hash": cfg.source_hash, "methods": {}}
    code = EXIT_OK
    for m in methods_for(cfg, args.method):
        run = run_reach(cfg, m)
        _write_reach_files(out, cfg, m, run)
        summary["methods"][m] = run.summary()
        if run.tube.diverged:
            code = EXIT_DIVERGED
    export.write_json(out / "summary.json", summary)
    for m, s in summary["methods"].items():
        print(f"{m}: {s['stamps']} stamps, {s['splits']} splits, wall {s['wall_time_s']:.2f} s"
              + (f", {s['message']}" if s["message"] else ""))
    return code


def cmd_target(cfg: ScenarioConfig, args) -> int:
    if cfg.target is None:
        raise ConfigError("target", "missing target section")
    out = Path(args.out)
    tofs = args.tof if args.tof else list(cfg.target.tof_days)
    if not tofs:
        raise ConfigError("target.tof_days", "no times of flight given")
    doc = {"config": cfg.name, "config_hash": cfg.source_hash, "body": cfg.target.body,
           "epoch_jd": cfg.target.epoch_jd, "methods": {}}
    code = EXIT_OK
    horizon = max(tofs) * 86400.0 / cfg.model.time_scale
    for m in methods_for(cfg, args.method):
        run = run_reach(cfg, m, t_final=horizon)
        _write_reach_files(out, cfg, m, run)
        verdicts = target_query(cfg, run.tube, tofs)
        doc["methods"][m] = {"summary": run.summary(), "verdicts": [v.to_dict() for v in verdicts]}
        for v in verdicts:
            print(f"{m}: TOF {v.tof_days:g} d -> {v.to_dict()['verdict']}")
        if run.tube.diverged:
            code = EXIT_DIVERGED
    export.write_json(out / "target.json", doc)
    return code


def cmd_validate(cfg: ScenarioConfig, args) -> int:
    out = Path(args.out)
    seed = cfg.seed if args.seed is None else args.seed
    doc = {"config": cfg.name, "config_hash": cfg.source_hash, "seed": seed, "methods": {}}
    escaped = diverged = False
    for m in methods_for(cfg, args.method):
        run = run_reach(cfg, m)
        _write_reach_files(out, cfg, m, run)
        rep = validate_tube(cfg, run.tube, args.samples, seed, args.inflate)
        doc["methods"][m] = rep.to_dict() | {"tube_message": run.tube.message, "diverged": run.tube.diverged}
        escaped |= not rep.all_contained
        diverged |= run.tube.diverged
        print(f"{m}: min containment {rep.fractions.min():.4f} over {len(rep.fractions)} stamps"
              + ("" if rep.all_contained else f", first escape at stamp {rep.first_escape}"))
    export.write_json(out / "validation.json", doc)
    if escaped:
        return EXIT_CONTAINMENT
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_stationkeep(cfg: ScenarioConfig, args) -> int:
    out = Path(args.out)
    run = run_stationkeep(cfg, args.seed)
    export.write_burns_csv(out / "burns.csv", run.times[:-1], run.inputs, run.log.active_flags)
    export.write_trajectory_csv(out / "trajectory.csv", run.times, run.states)
    export.write_json(out / "events.json", run.events())
    export.write_json(out / "metrics.json", run.metrics())
    m = run.metrics()
    print(f"activations {m['activations']}, delta-v {m['delta_v_mps']:.6g} m/s, wall {m['wall_time_s']:.2f} s")
    if run.log.fallback_continuous:
        return EXIT_DIVERGED
    return EXIT_OK if run.post_correction_contained else EXIT_CONTAINMENT


def cmd_compare(cfg: ScenarioConfig, args) -> int:
    out = Path(args.out)
    res = run_track_compare(cfg, args.seed)
    for name, (xs, us) in res.pop("_trajectories").items():
        t = cfg.dt * np.arange(len(xs))
        export.write_trajectory_csv(out / f"trajectory_{name}.csv", t, xs)
        export.write_burns_csv(out / f"inputs_{name}.csv", t[:-1], us, [True] * len(us))
    export.write_json(out / "compare.json", res)
    for name in ("lqr", "mpc"):
        print(f"{name}: effort {res[name]['effort']:.6g}, tracking error {res[name]['tracking_error']:.6g}")
    return EXIT_OK


COMMANDS = {"reach": cmd_reach, "target": cmd_target, "validate": cmd_validate,
            "stationkeep": cmd_stationkeep, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowthrust-reach", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario TOML file")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--out", default=".", help="output directory (created if missing)")
        s.add_argument("--method", choices=("taylor", "sdc", "both"), default=None,
                       help="overrides reach.method")
        if name == "validate":
            s.add_argument("--samples", type=int, default=500)
            s.add_argument("--inflate", type=float, default=1.0,
                           help="scale of the sampled sets relative to the propagated ones")
        if name == "target":
            s.add_argument("--tof", type=float, nargs="*", help="times of flight in days")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from None
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be nonnegative")
        if getattr(args, "samples", 1) < 1:
            raise ConfigError("--samples", "must be at least 1")
        if getattr(args, "inflate", 1.0) <= 0:
            raise ConfigError("--inflate", "must be positive")
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
