"""Small dense convex quadratic programs.

    minimise   0.5 x^T H x + f^T x
    subject to C x <= d

``solve_qp`` runs the Goldfarb-Idnani dual active-set method. It starts from
the unconstrained minimiser and adds the most violated constraint, so every
iterate is dual feasible. Problems here have at most a few hundred rows and a
few dozen variables, which makes plain dense linear algebra adequate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of C, zero when inactive
    status: str  # "optimal", "infeasible" or "max_iter"
    iterations: int
    active: list

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residual(H, f, C, d, res: QPResult) -> float:
    """Largest violation among stationarity, primal and dual feasibility and complementarity.

    Stationarity is measured relative to the size of the gradient terms so
    that the figure is scale free.
    """
    x, lam = res.x, res.multipliers
    grad = H @ x + f
    stat = grad + (C.T @ lam if C.size else 0.0)
    scale = 1.0 + np.abs(H @ x).max(initial=0.0) + np.abs(f).max(initial=0.0)
    out = np.abs(stat).max(initial=0.0) / scale
    if C.size:
        slack = d - C @ x
        row_scale = 1.0 + np.abs(C).sum(1) * (1.0 + np.abs(x).max()) + np.abs(d)
        out = max(out, np.max(-slack / row_scale, initial=0.0))
        out = max(out, np.max(-lam, initial=0.0))
        out = max(out, np.max(np.abs(lam * slack) / (scale * row_scale), initial=0.0))
    return float(out)


def solve_qp(H, f, C=None, d=None, tol: float = 1e-12, max_iter: int | None = None) -> QPResult:
    """Goldfarb-Idnani dual method for a strictly convex QP with inequalities.

    Constraints are handled in the form ``n_i^T x >= b_i`` with
    ``n_i = -C_i`` and ``b_i = -d_i``.
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    n = f.size
    C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    d = np.zeros(0) if d is None else np.asarray(d, dtype=float)
    if C.shape != (d.size, n):
        raise ValueError("constraint shapes do not match")
    m = d.size
    max_iter = max_iter or 10 * (m + n) + 50

    L = np.linalg.cholesky(H)
    Linv = np.linalg.solve(L, np.eye(n))
    Hinv = Linv.T @ Linv
    x = -Hinv @ f
    lam = np.zeros(m)
    active: list[int] = []
    u_act = np.zeros(0)
    row_norm = np.linalg.norm(C, axis=1) if m else np.zeros(0)
    row_norm[row_norm == 0] = 1.0

    def step_dirs(p):
        npv = -C[p]
        if not active:
            return Hinv @ npv, np.zeros(0)
        N = -C[active].T  # n x q
        HN = Hinv @ N
        S = N.T @ HN
        r = np.linalg.solve(S, HN.T @ npv)
        z = Hinv @ npv - HN @ r
        return z, r

    it = 0
    while True:
        # most violated constraint, measured in normalised rows
        viol = (C @ x - d) / row_norm if m else np.zeros(0)
        if active:
            viol[active] = -np.inf
        if m == 0 or viol.max() <= tol * (1.0 + np.abs(d / row_norm).max()):
            lam[:] = 0.0
            lam[active] = u_act
            return QPResult(x, lam, "optimal", it, list(active))
        p = int(np.argmax(viol))
        u_plus = np.append(u_act, 0.0)
        while True:
            it += 1
            if it > max_iter:
                lam[:] = 0.0
                lam[active] = u_act
                return QPResult(x, lam, "max_iter", it, list(active))
            z, r = step_dirs(p)
            # partial step: largest t keeping active multipliers nonnegative
            t1, k_drop = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 0:
                    tj = u_plus[j] / rj
                    if tj < t1:
                        t1, k_drop = tj, j
            nz = -C[p] @ z
            s_p = -C[p] @ x + d[p]
            t2 = np.inf if np.linalg.norm(z) <= 1e-14 * (1.0 + np.linalg.norm(x)) or nz <= 0 else -s_p / nz
            t = min(t1, t2)
            if not np.isfinite(t):
                lam[:] = 0.0
                lam[active] = u_act
                return QPResult(x, lam, "infeasible", it, list(active))
            if np.isfinite(t2):
                x = x + t * z
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t == t2:
                active.append(p)
                u_act = u_plus
                break
            # drop the blocking constraint and retry with the same p
            del active[k_drop]
            u_plus = np.delete(u_plus, k_drop)
            u_act = u_plus[:-1]


def solve_box_projected_gradient(H, f, lo, hi, x0=None, iters: int = 5000, tol: float = 1e-12) -> np.ndarray:
    """Projected gradient descent for ``lo <= x <= hi``; a fallback only."""
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    x = np.clip(np.zeros_like(f) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    step = 1.0 / np.linalg.eigvalsh(H).max()
    for _ in range(iters):
        x_new = np.clip(x - step * (H @ x + f), lo, hi)
        if np.abs(x_new - x).max() <= tol * (1.0 + np.abs(x).max()):
            return x_new
        x = x_new
    return x
