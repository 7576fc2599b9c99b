"""Planet positions from J2000 mean Keplerian elements.

Elements and their per-century rates follow the widely used approximate
planetary ephemeris (valid 1800-2050), heliocentric ecliptic J2000 frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import MU_SUN_KM3_S2

AU_KM = 1.495978707e8
JD_J2000 = 2451545.0
# 10 April 2007, 00:00 TDB
JD_DEPARTURE_2007_04_10 = 2454200.5


@dataclass(frozen=True)
class MeanElements:
    """a [AU], e, I [deg], L [deg], varpi [deg], Omega [deg] and rates per Julian century."""

    a: float
    e: float
    inc: float
    mean_longitude: float
    lon_perihelion: float
    lon_node: float
    rates: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def at(self, jd: float) -> np.ndarray:
        T = (jd - JD_J2000) / 36525.0
        base = np.array([self.a, self.e, self.inc, self.mean_longitude, self.lon_perihelion, self.lon_node])
        return base + T * np.asarray(self.rates, dtype=float)


MARS = MeanElements(
    1.52371034, 0.09339410, 1.84969142, -4.55343205, -23.94362959, 49.55953891,
    (0.00001847, 0.00007882, -0.00813131, 19140.30268499, 0.44441088, -0.29257343),
)
EARTH_MOON_BARYCENTER = MeanElements(
    1.00000261, 0.01671123, -0.00001531, 100.46457166, 102.93768193, 0.0,
    (0.00000562, -0.00004392, -0.01294668, 35999.37244981, 0.32327364, 0.0),
)
BODIES = {"mars": MARS, "earth": EARTH_MOON_BARYCENTER, "emb": EARTH_MOON_BARYCENTER}


def solve_kepler(M: float, e: float, tol: float = 1e-12, max_iter: int = 50) -> float:
    """Eccentric anomaly from mean anomaly (radians) by Newton iteration."""
    if not 0 <= e < 1:
        raise ValueError("elliptic orbits only")
    M = np.remainder(M + np.pi, 2 * np.pi) - np.pi
    E = M + e * np.sin(M) if e < 0.8 else np.pi * np.sign(M)
    for _ in range(max_iter):
        dE = (E - e * np.sin(E) - M) / (1.0 - e * np.cos(E))
        E -= dE
        if abs(dE) < tol:
            return float(E)
    raise RuntimeError("Kepler iteration did not converge")


def state_from_elements(el: MeanElements, jd: float, mu: float = MU_SUN_KM3_S2) -> np.ndarray:
    """Heliocentric ecliptic position [km] and velocity [km/s] at Julian date ``jd``."""
    a_au, e, inc, L, varpi, node = el.at(jd)
    a = a_au * AU_KM
    inc, L, varpi, node = np.radians([inc, L, varpi, node])
    omega = varpi - node
    E = solve_kepler(L - varpi, e)
    cosE, sinE = np.cos(E), np.sin(E)
    root = np.sqrt(1.0 - e * e)
    r_orb = a * np.array([cosE - e, root * sinE, 0.0])
    n = np.sqrt(mu / a**3)
    edot = n / (1.0 - e * cosE)
    v_orb = a * edot * np.array([-sinE, root * cosE, 0.0])
    R = _rot_z(node) @ _rot_x(inc) @ _rot_z(omega)
    return np.concatenate([R @ r_orb, R @ v_orb])


def body_position(name: str, jd: float) -> np.ndarray:
    return state_from_elements(BODIES[name.lower()], jd)[:3]


def _rot_z(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
