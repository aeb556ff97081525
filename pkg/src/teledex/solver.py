"""Box-constrained Levenberg-Marquardt for small dense least-squares problems."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 50
    cost_tolerance: float = 1e-10
    step_tolerance: float = 1e-8
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    ridge: float = 1e-12
    # freeze coordinates sitting on a bound whose gradient points outward
    active_set: bool = False

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverOptions":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    accepted_steps: int
    converged: bool
    stop_reason: str
    cost_history: list[float] = field(default_factory=list)


def levenberg_marquardt(fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
                        x0: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                        options: SolverOptions = SolverOptions()) -> LMResult:
    """Minimise ``|r(x)|^2`` over the box ``[lower, upper]``.

    ``fun`` returns the residual vector and its Jacobian.  Each iteration
    solves ``(J'J + lam*diag(J'J) + ridge*I) dx = -J'r``, clamps ``x + dx``
    to the box and keeps the trial point only if the cost strictly drops.
    ``cost_history`` holds the cost at x0 followed by every accepted cost.

    With ``options.active_set`` the coordinates resting on a bound with the
    descent direction pointing out of the box are held fixed for the solve.
    Plain clamping otherwise crawls along a bound for many iterations.
    """
    x = np.array(x0, dtype=float)
    r, J = fun(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise NumericError(f"non-finite cost {cost} at initial point")
    history = [cost]
    lam = options.initial_damping
    n = x.size
    ridge = options.ridge * np.eye(n)
    accepted = 0
    it = 0
    if cost <= options.cost_tolerance:
        return LMResult(x, cost, 0, 0, True, "cost", history)
    reason = "max_iterations"
    converged = False
    A = J.T @ J
    g = J.T @ r
    while it < options.max_iterations:
        it += 1
        H = A + lam * np.diag(np.diag(A)) + ridge
        if options.active_set:
            free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
            dx = np.zeros(n)
            if free.any():
                dx[free] = _solve(H[np.ix_(free, free)], -g[free])
        else:
            dx = _solve(H, -g)
        x_new = np.clip(x + dx, lower, upper)
        step = x_new - x
        if np.linalg.norm(step) < options.step_tolerance:
            converged, reason = True, "step"
            break
        r_new, J_new = fun(x_new)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new < cost:
            x, r, J, cost = x_new, r_new, J_new, cost_new
            A = J.T @ J
            g = J.T @ r
            accepted += 1
            history.append(cost)
            lam *= options.damping_down
            if cost <= options.cost_tolerance:
                converged, reason = True, "cost"
                break
        else:
            lam *= options.damping_up
    return LMResult(x, cost, it, accepted, converged, reason, history)


def _solve(H, b):
    try:
        return np.linalg.solve(H, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, b, rcond=None)[0]
