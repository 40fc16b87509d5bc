"""
Strong Wolfe line search (bracketing followed by zoom with safeguarded cubic
interpolation).

Iterates stay in the working precision of ``x``; step lengths, function values
and directional derivatives are compared as binary64 control variables.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

LossAndGrad = Callable[[np.ndarray], tuple]


@dataclass
class LineSearchResult:
    step: float
    x: np.ndarray
    loss: float
    grad: np.ndarray
    evaluations: int
    armijo: bool        # f(x + t d) <= f(x) + c1 t g^T d
    curvature: bool     # |g(x + t d)^T d| <= c2 |g(x)^T d|

    @property
    def success(self) -> bool:
        return self.armijo and self.curvature and self.step > 0.0


def directional(grad: np.ndarray, d: np.ndarray) -> float:
    return float(np.dot(np.asarray(grad, dtype=np.float64), np.asarray(d, dtype=np.float64)))


def _cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None) -> float:
    """Minimizer of the cubic through (x1, f1, g1) and (x2, f2, g2), clamped to ``bounds``."""
    if bounds is not None:
        lo, hi = bounds
    else:
        lo, hi = (x1, x2) if x1 <= x2 else (x2, x1)
    if not np.all(np.isfinite([x1, f1, g1, x2, f2, g2])) or x1 == x2:
        return (lo + hi) / 2.0
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2_square = d1 ** 2 - g1 * g2
    if d2_square < 0:
        return (lo + hi) / 2.0
    d2 = np.sqrt(d2_square)
    if x1 <= x2:
        denom = g2 - g1 + 2 * d2
        pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / denom) if denom != 0 else (lo + hi) / 2.0
    else:
        denom = g1 - g2 + 2 * d2
        pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / denom) if denom != 0 else (lo + hi) / 2.0
    return float(min(max(pos, lo), hi))


def strong_wolfe(fun: LossAndGrad, x: np.ndarray, d: np.ndarray, loss: float, grad: np.ndarray,
                 step: float = 1.0, c1: float = 1e-4, c2: float = 0.9, max_iters: int = 20,
                 max_evals: int = 25, tolerance_change: float = 1e-9) -> LineSearchResult:
    """
    Finds a step t along the descent direction ``d`` satisfying the strong Wolfe conditions.

    Args:
        fun: Returns (loss, gradient) at a point.
        x: Start point (working precision).
        d: Descent direction, g^T d < 0.
        loss, grad: Value and gradient at ``x``.
        step: Initial trial step.
        max_iters: Iteration cap of bracketing plus zoom.
        max_evals: Cap on calls of ``fun``.

    Returns:
        LineSearchResult at the accepted step. When the conditions could not be met
        within the budget, the lowest point seen is returned with the failed
        conditions flagged.
    """
    dtype = x.dtype
    loss = float(loss)
    gtd = directional(grad, d)
    d_norm = float(np.max(np.abs(d.astype(np.float64)))) if d.size else 0.0
    evals = 0

    def trial_point(t: float):
        nonlocal evals
        evals += 1
        with np.errstate(over="ignore", invalid="ignore"):
            x_t = (x + dtype.type(t) * d).astype(dtype)
        f_t, g_t = fun(x_t)
        f_t = float(f_t)
        if not np.isfinite(f_t):
            f_t = np.inf
        return f_t, g_t, directional(g_t, d)

    t = float(step)
    f_new, g_new, gtd_new = trial_point(t)
    t_prev, f_prev, g_prev, gtd_prev = 0.0, loss, grad, gtd
    done = False
    iters = 0
    bracket = None
    while iters < max_iters and evals < max_evals:
        if f_new > loss + c1 * t * gtd or (iters > 1 and f_new >= f_prev):
            bracket = [[t_prev, f_prev, g_prev, gtd_prev], [t, f_new, g_new, gtd_new]]
            break
        if abs(gtd_new) <= -c2 * gtd:
            bracket = [[t, f_new, g_new, gtd_new]]
            done = True
            break
        if gtd_new >= 0:
            bracket = [[t_prev, f_prev, g_prev, gtd_prev], [t, f_new, g_new, gtd_new]]
            break
        min_step = t + 0.01 * (t - t_prev)
        max_step = t * 10
        t_next = _cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(min_step, max_step))
        t_prev, f_prev, g_prev, gtd_prev = t, f_new, g_new, gtd_new
        t = t_next
        f_new, g_new, gtd_new = trial_point(t)
        iters += 1
    if bracket is None:
        bracket = [[0.0, loss, grad, gtd], [t, f_new, g_new, gtd_new]]

    insufficient_progress = False
    low, high = (0, 1) if bracket[0][1] <= bracket[-1][1] else (1, 0)
    while not done and iters < max_iters and evals < max_evals:
        if abs(bracket[1][0] - bracket[0][0]) * d_norm < tolerance_change:
            break
        t = _cubic_interpolate(bracket[0][0], bracket[0][1], bracket[0][3],
                               bracket[1][0], bracket[1][1], bracket[1][3])
        t_max = max(bracket[0][0], bracket[1][0])
        t_min = min(bracket[0][0], bracket[1][0])
        eps = 0.1 * (t_max - t_min)
        if min(t_max - t, t - t_min) < eps:
            if insufficient_progress or t >= t_max or t <= t_min:
                t = t_max - eps if abs(t - t_max) < abs(t - t_min) else t_min + eps
                insufficient_progress = False
            else:
                insufficient_progress = True
        else:
            insufficient_progress = False
        f_new, g_new, gtd_new = trial_point(t)
        iters += 1
        if f_new > loss + c1 * t * gtd or f_new >= bracket[low][1]:
            bracket[high] = [t, f_new, g_new, gtd_new]
            low, high = (0, 1) if bracket[0][1] <= bracket[1][1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * gtd:
                done = True
            elif gtd_new * (bracket[high][0] - bracket[low][0]) >= 0:
                bracket[high] = list(bracket[low])
            bracket[low] = [t, f_new, g_new, gtd_new]

    t, f_best, g_best, gtd_best = bracket[low] if len(bracket) > 1 else bracket[0]
    armijo = f_best <= loss + c1 * t * gtd
    curvature = abs(gtd_best) <= -c2 * gtd
    if not (armijo and curvature):
        logger.debug("strong Wolfe search stopped at t=%.3e without meeting both conditions", t)
    with np.errstate(over="ignore", invalid="ignore"):
        x_best = (x + dtype.type(t) * d).astype(dtype) if t > 0 else x.copy()
    return LineSearchResult(step=float(t), x=x_best, loss=float(f_best), grad=g_best, evaluations=evals,
                            armijo=bool(armijo), curvature=bool(curvature))
