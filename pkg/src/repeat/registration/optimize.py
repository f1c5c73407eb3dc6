"""Descent with Armijo backtracking; steepest or limited-memory BFGS directions."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from ..errors import NonFiniteCost

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
SHRINK = 0.5
MAX_HALVINGS = 30
LBFGS_MEMORY = 7
# a quasi-Newton trial may move a parameter at most this many initial steps
MAX_MOVE_FACTOR = 8.0


@dataclass
class DescentTrace:
    costs: List[float] = field(default_factory=list)
    extras: List[tuple] = field(default_factory=list)
    converged: bool = False


def _two_loop(grad: np.ndarray, pairs) -> np.ndarray:
    """``-H g`` from the stored ``(s, y, 1 / y.s)`` pairs, oldest first."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    s, y, _ = pairs[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def armijo_descent(fun: Callable[[np.ndarray], Tuple[float, np.ndarray, tuple]], x0: np.ndarray,
                   step: float, max_iters: int, rel_tol: float, min_step: float = 1e-3,
                   method: str = "lbfgs") -> Tuple[np.ndarray, DescentTrace]:
    """Minimize ``fun`` with a backtracking Armijo line search.

    ``fun(x)`` returns ``(cost, gradient, extra)``; ``extra`` is stored with
    each accepted cost.  ``method`` picks the search direction: ``"gd"`` is
    steepest descent, ``"lbfgs"`` the limited-memory BFGS direction (falling
    back to steepest descent whenever it is not a descent direction).

    A steepest-descent trial moves the largest parameter by ``step``
    (parameters are expected in mm-like units).  A quasi-Newton trial takes
    the unit step, capped so no parameter moves more than
    ``MAX_MOVE_FACTOR * step``.  Trials are halved until the Armijo condition
    holds.  Stops after ``max_iters`` accepted steps, when the relative
    decrease drops below ``rel_tol``, or when no move longer than
    ``min_step`` decreases the cost.  Accepted costs are non-increasing.
    """
    if method not in ("gd", "lbfgs"):
        raise ValueError(f"unknown descent method {method!r}")
    x = np.array(x0, dtype=float)
    cost, grad, extra = fun(x)
    if not np.isfinite(cost) or not np.all(np.isfinite(grad)):
        raise NonFiniteCost(f"cost or gradient not finite at the starting point (cost={cost})")
    trace = DescentTrace([cost], [extra])
    pairs = deque(maxlen=LBFGS_MEMORY)
    current = step
    for it in range(max_iters):
        if not np.any(grad):
            trace.converged = True
            break
        direction = None
        if method == "lbfgs" and pairs:
            direction = _two_loop(grad, list(pairs))
            if not float(direction @ grad) < 0:
                pairs.clear()
                direction = None
        if direction is None:
            direction = -grad
            length = current
            alpha = length / float(np.abs(direction).max())
        else:
            move = float(np.abs(direction).max())
            alpha = min(1.0, MAX_MOVE_FACTOR * step / move)
            length = alpha * move
        slope = float(direction @ grad)
        accepted = False
        for _ in range(MAX_HALVINGS):
            trial = x + alpha * direction
            t_cost, t_grad, t_extra = fun(trial)
            # +inf marks an inadmissible trial and is simply backtracked
            if np.isnan(t_cost) or t_cost == -np.inf:
                raise NonFiniteCost(
                    f"cost diverged at iteration {it} with step {length:.3g} mm")
            if t_cost <= cost + ARMIJO_C * alpha * slope:
                accepted = True
                break
            alpha *= SHRINK
            length *= SHRINK
            if length < min_step:
                break
        if not accepted:
            if pairs:
                # retry from steepest descent before giving up
                pairs.clear()
                continue
            trace.converged = True
            break
        decrease = (cost - t_cost) / max(abs(cost), 1e-300)
        s_vec, y_vec = trial - x, t_grad - grad
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            pairs.append((s_vec, y_vec, 1.0 / sy))
        x, cost, grad = trial, t_cost, t_grad
        trace.costs.append(cost)
        trace.extras.append(t_extra)
        log.debug("iter %d cost %.6g step %.3g mm", it, cost, length)
        current = min(step, 2.0 * length) if length >= current else length
        if decrease < rel_tol:
            trace.converged = True
            break
    return x, trace
