"""Writers and readers for every file the command line produces.

Floats are written with 17 significant digits so that every value
round-trips exactly and reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .tube import ReachTube, tube_volume_series

STATE_NAMES = ("x", "y", "z", "vx", "vy", "vz")
HULL_HEADER = ["t"] + [f"{s}_lo" for s in STATE_NAMES] + [f"{s}_hi" for s in STATE_NAMES]
VOLUME_HEADER = ["t", "log_volume"]
BURN_HEADER = ["t", "ux", "uy", "uz", "active_flag"]
TRAJECTORY_HEADER = ["t", *STATE_NAMES]


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_rows(path: Path, header: list, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([r if isinstance(r, str) else fmt(r) for r in row])
    return path


def _read_rows(path: Path, header: list) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats, which strict JSON cannot hold, by strings."""
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return str(float(o))
    return o


def write_json(path, obj) -> Path:
    path = Path(path)
    text = json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default, allow_nan=True))),
                      indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def tube_document(tube: ReachTube, config_hash: str, units: str, time_units: str) -> dict:
    doc = tube.to_dict()
    doc["meta"] = {"method": tube.method, "config_hash": config_hash, "units": units, "time_units": time_units}
    return doc


def write_tube(path, tube: ReachTube, config_hash: str = "", units: str = "", time_units: str = "") -> Path:
    return write_json(path, tube_document(tube, config_hash, units, time_units))


def read_tube(path) -> ReachTube:
    return ReachTube.from_dict(read_json(path))


def hull_rows(tube: ReachTube) -> np.ndarray:
    rows = []
    for k, t in enumerate(tube.times):
        lo, hi = tube.hull(k)
        rows.append(np.concatenate([[t], lo, hi]))
    return np.array(rows)


def write_hull_csv(path, tube: ReachTube) -> Path:
    return _write_rows(path, HULL_HEADER, hull_rows(tube))


def read_hull_csv(path) -> np.ndarray:
    return _read_rows(path, HULL_HEADER)


def write_volume_csv(path, tube: ReachTube) -> Path:
    return _write_rows(path, VOLUME_HEADER, tube_volume_series(tube))


def read_volume_csv(path) -> np.ndarray:
    return _read_rows(path, VOLUME_HEADER)


def write_burns_csv(path, times, inputs, active_flags) -> Path:
    rows = [[t, *u, "1" if a else "0"] for t, u, a in zip(times, inputs, active_flags)]
    return _write_rows(path, BURN_HEADER, rows)


def read_burns_csv(path) -> np.ndarray:
    return _read_rows(path, BURN_HEADER)


def write_trajectory_csv(path, times, states) -> Path:
    return _write_rows(path, TRAJECTORY_HEADER, [[t, *x] for t, x in zip(times, states)])


def read_trajectory_csv(path) -> np.ndarray:
    return _read_rows(path, TRAJECTORY_HEADER)
