"""Small bounded Levenberg-Marquardt solver.

Sized for the two-parameter-per-channel backscatter curves: dense normal
equations, analytic Jacobian supplied by the caller, box bounds enforced by
projecting every trial point. Damping is divided by 3 after an accepted
step and doubled after a rejected one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericFailure(RuntimeError):
    """Every start diverged. ``trace`` holds the final cost of each start."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    start_costs: list = field(default_factory=list)


def levenberg_marquardt(residual, jacobian, x0, lower, upper, *, max_iter=200, step_tol=1e-10):
    """Minimise ``0.5 * ||residual(x)||^2`` inside ``[lower, upper]``.

    ``residual(x)`` returns an (m,) vector and ``jacobian(x)`` an (m, n)
    matrix. Stops once a proposed (projected) step is shorter than
    ``step_tol`` or after ``max_iter`` iterations.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    x = np.clip(np.asarray(x0, dtype=np.float64), lower, upper)
    r = residual(x)
    cost = 0.5 * float(r @ r)
    history = [cost]
    if not np.isfinite(cost):
        return LMResult(x, cost, 0, False, history)

    J = jacobian(x)
    JtJ = J.T @ J
    lam = 1e-3 * max(float(np.max(np.diag(JtJ))), 1e-12)
    eye = np.eye(len(x))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        try:
            step = np.linalg.solve(JtJ + lam * eye, -g)
        except np.linalg.LinAlgError:
            lam *= 2.0
            continue
        trial = np.clip(x + step, lower, upper)
        actual = trial - x
        if float(np.linalg.norm(actual)) < step_tol:
            converged = True
            break
        r_new = residual(trial)
        cost_new = 0.5 * float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new < cost:
            x, r, cost = trial, r_new, cost_new
            J = jacobian(x)
            JtJ = J.T @ J
            lam /= 3.0
            history.append(cost)
        else:
            lam *= 2.0
            if not np.isfinite(lam) or lam > 1e300:
                break
    return LMResult(x, cost, it, converged, history)


def multistart(residual, jacobian, starts, lower, upper, **kw) -> LMResult:
    """Run :func:`levenberg_marquardt` from each start; lowest cost wins.

    Starts are tried in the given order and ties keep the earliest, so the
    outcome is deterministic.
    """
    best = None
    trace = []
    for x0 in starts:
        res = levenberg_marquardt(residual, jacobian, x0, lower, upper, **kw)
        trace.append(res.cost)
        if np.isfinite(res.cost) and (best is None or res.cost < best.cost):
            best = res
    if best is None:
        raise NumericFailure("least-squares fit diverged from every start", trace)
    best.start_costs = trace
    return best
