"""
Training algorithms: SGD and Adam under cosine annealing, L-BFGS with a strong
Wolfe line search, and Gauss-Newton (natural gradient) with matrix-free CG.

Parameter vectors, moments and search directions live in the working
precision. Step lengths, curvature scalars and tolerances are binary64.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from surrogate_services.errors import NumericalFailure
from surrogate_services.numerics.linalg import cg_solve
from surrogate_services.numerics.precision import ScalarKind
from surrogate_services.training.line_search import LineSearchResult, directional, strong_wolfe

logger = logging.getLogger(__name__)

# protocol defaults per working precision
ADAM_EPSILON = {ScalarKind.binary16: 1e-4, ScalarKind.binary32: 1e-8, ScalarKind.binary64: 1e-16}
ETA_MIN = {ScalarKind.binary16: 1e-4, ScalarKind.binary32: 1e-6, ScalarKind.binary64: 1e-10}
LBFGS_TOLERANCE = {ScalarKind.binary16: 1e-4, ScalarKind.binary32: 1e-8, ScalarKind.binary64: 1e-12}
NGD_TOLERANCE = {ScalarKind.binary16: 1e-9, ScalarKind.binary32: 1e-12, ScalarKind.binary64: 1e-14}


class Problem(Protocol):
    """Objective seen by the optimizers; ``batch`` selects the parameter samples."""

    def loss_and_grad(self, theta: np.ndarray, batch) -> tuple: ...

    def residuals(self, theta: np.ndarray, batch) -> np.ndarray: ...

    def jvp(self, theta: np.ndarray, batch, direction: np.ndarray) -> np.ndarray: ...

    def vjp(self, theta: np.ndarray, batch, cotangent: np.ndarray) -> np.ndarray: ...


@dataclass
class StepOutcome:
    theta: np.ndarray
    loss: float
    grad: Optional[np.ndarray]
    evaluations: int = 1
    events: list = field(default_factory=list)


# --- first-order methods ---

@dataclass(frozen=True)
class CosineSchedule:
    eta0: float
    eta_min: float
    t_max: int = 5000

    def __post_init__(self):
        if self.eta_min > self.eta0:
            raise ValueError(f"eta_min {self.eta_min} exceeds eta0 {self.eta0}")


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    """eta_min + (eta0 - eta_min)(1 + cos(pi t / T_max)) / 2, held at eta_min for t >= T_max."""
    if t >= schedule.t_max:
        return schedule.eta_min
    return schedule.eta_min + 0.5 * (schedule.eta0 - schedule.eta_min) * (1.0 + np.cos(np.pi * t / schedule.t_max))


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """theta - lr * grad in the working precision (plain SGD, no momentum)."""
    with np.errstate(over="ignore", invalid="ignore"):
        return (theta - theta.dtype.type(lr) * grad).astype(theta.dtype)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, theta: np.ndarray, eps: float, beta1: float = 0.9, beta2: float = 0.999) -> "AdamState":
        return cls(m=np.zeros_like(theta), v=np.zeros_like(theta), eps=eps, beta1=beta1, beta2=beta2)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Bias-corrected Adam update; moments are updated in place."""
    t = theta.dtype.type
    state.step += 1
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        state.m = t(state.beta1) * state.m + t(1.0 - state.beta1) * grad
        state.v = t(state.beta2) * state.v + t(1.0 - state.beta2) * (grad * grad)
        m_hat = state.m / t(1.0 - state.beta1 ** state.step)
        v_hat = state.v / t(1.0 - state.beta2 ** state.step)
        return (theta - t(lr) * m_hat / (np.sqrt(v_hat) + t(state.eps))).astype(theta.dtype)


# --- L-BFGS ---

@dataclass
class LbfgsState:
    history_size: int = 100
    lr: float = 1.0
    max_iters: int = 20
    max_evals: int = 25
    tolerance_grad: float = 1e-8
    tolerance_change: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    pairs: deque = field(default_factory=deque)
    iterations: int = 0

    def remember(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Stores (s, y) if s^T y > 0; the oldest pair drops out beyond the capacity."""
        sy = directional(s, y)
        if not np.isfinite(sy) or sy <= 0.0:
            return False
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.history_size:
            self.pairs.popleft()
        return True


def two_loop_direction(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    """-H g from the stored pairs; identity scaling without history."""
    dtype = grad.dtype
    q = grad.astype(np.float64)
    alphas = []
    for s, y, rho in reversed(state.pairs):
        alpha = rho * float(np.dot(s.astype(np.float64), q))
        q = q - alpha * y.astype(np.float64)
        alphas.append(alpha)
    if state.pairs:
        s, y, _ = state.pairs[-1]
        y64 = y.astype(np.float64)
        q = q * (directional(s, y) / float(np.dot(y64, y64)))
    for (s, y, rho), alpha in zip(state.pairs, reversed(alphas)):
        beta = rho * float(np.dot(y.astype(np.float64), q))
        q = q + (alpha - beta) * s.astype(np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return (-q).astype(dtype)


def lbfgs_step(state: LbfgsState, loss_fn: Callable, theta: np.ndarray, loss: Optional[float] = None,
               grad: Optional[np.ndarray] = None, max_evals: Optional[int] = None) -> StepOutcome:
    """
    One L-BFGS iteration: two-loop direction, strong Wolfe step, history update.

    Returns the input unchanged at a stationary point. A non-descent direction is
    replaced by steepest descent; a failed line search keeps the best point seen.
    Both cases are reported in ``events``.
    """
    events = []
    evaluations = 0
    if loss is None or grad is None:
        loss, grad = loss_fn(theta)
        evaluations += 1
    loss = float(loss)
    if not np.any(grad):
        return StepOutcome(theta=theta, loss=loss, grad=grad, evaluations=evaluations)
    d = two_loop_direction(state, grad)
    gtd = directional(grad, d)
    if not np.isfinite(gtd) or gtd >= 0.0:
        events.append("lbfgs: direction is not a descent direction, using steepest descent")
        logger.warning(events[-1])
        d = (-grad).astype(grad.dtype)
    if state.iterations == 0 and not state.pairs:
        step = min(1.0, 1.0 / float(np.sum(np.abs(grad.astype(np.float64))))) * state.lr
    else:
        step = state.lr
    budget = state.max_evals if max_evals is None else max_evals
    result: LineSearchResult = strong_wolfe(loss_fn, theta, d, loss, grad, step=step, c1=state.c1, c2=state.c2,
                                            max_iters=state.max_iters, max_evals=max(1, budget),
                                            tolerance_change=state.tolerance_change)
    evaluations += result.evaluations
    state.iterations += 1
    if not result.success:
        events.append(f"lbfgs: line search failed (armijo={result.armijo}, curvature={result.curvature}), "
                      f"keeping best point t={result.step:.3e}")
        logger.warning(events[-1])
    if result.step > 0.0:
        s = (result.x.astype(np.float64) - theta.astype(np.float64)).astype(theta.dtype)
        y = (np.asarray(result.grad, dtype=np.float64) - grad.astype(np.float64)).astype(theta.dtype)
        state.remember(s, y)
    return StepOutcome(theta=result.x, loss=result.loss, grad=result.grad, evaluations=evaluations, events=events)


def lbfgs_epoch(state: LbfgsState, loss_fn: Callable, theta: np.ndarray) -> StepOutcome:
    """
    Up to ``max_iters`` L-BFGS iterations sharing ``max_evals`` function evaluations,
    stopping early on the gradient or change tolerance.
    """
    loss, grad = loss_fn(theta)
    evaluations = 1
    events = []
    for _ in range(state.max_iters):
        if float(np.max(np.abs(grad.astype(np.float64)))) <= state.tolerance_grad:
            break
        remaining = state.max_evals - evaluations
        if remaining <= 0:
            break
        outcome = lbfgs_step(state, loss_fn, theta, loss, grad, max_evals=remaining)
        evaluations += outcome.evaluations
        events += outcome.events
        change = float(np.max(np.abs(outcome.theta.astype(np.float64) - theta.astype(np.float64))))
        loss_change = abs(float(outcome.loss) - float(loss))
        theta, loss, grad = outcome.theta, outcome.loss, outcome.grad
        if not np.isfinite(loss) or change <= state.tolerance_change or loss_change < state.tolerance_change:
            break
    return StepOutcome(theta=theta, loss=float(loss), grad=grad, evaluations=evaluations, events=events)


# --- Gauss-Newton / natural gradient ---

@dataclass(frozen=True)
class NgdConfig:
    epsilon: float = 1e-12
    cg_tol: float = 1e-12
    cg_max_iters: int = 20
    step: float = 1.0
    line_search_iters: int = 20
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("NGD epsilon must be positive")


def gramian_operator(problem: Problem, theta: np.ndarray, batch, epsilon: float) -> Callable:
    """
    v -> J^T J v + eps v with J the residual Jacobian, never formed.

    J^T J v runs in the working precision; the shift is added in binary64 so that
    eps stays positive below the smallest subnormal of binary16. The result is binary64.
    """

    def apply(v):
        with np.errstate(over="ignore", invalid="ignore"):
            jv = problem.jvp(theta, batch, np.asarray(v).astype(theta.dtype))
            jtjv = np.asarray(problem.vjp(theta, batch, jv), dtype=np.float64)
            return jtjv + epsilon * np.asarray(v, dtype=np.float64)

    return apply


def ngd_step(config: NgdConfig, problem: Problem, batch, theta: np.ndarray) -> StepOutcome:
    """
    Solves (J^T J + eps I) d = -J^T r by CG for loss = ||r||^2, then a strong Wolfe
    search along d starting at ``config.step``.

    A CG breakdown doubles eps once; a second breakdown falls back to the gradient
    direction. Both are reported in ``events``.
    """
    events = []

    def loss_fn(x):
        return problem.loss_and_grad(x, batch)

    loss, grad = loss_fn(theta)
    if not np.any(grad):
        return StepOutcome(theta=theta, loss=float(loss), grad=grad)
    residual = problem.residuals(theta, batch)
    rhs = (-problem.vjp(theta, batch, residual)).astype(theta.dtype)
    epsilon = config.epsilon
    direction = None
    for attempt in range(2):
        try:
            result = cg_solve(gramian_operator(problem, theta, batch, epsilon), rhs,
                              tol=config.cg_tol, max_iters=config.cg_max_iters)
            direction = result.x
            logger.debug("ngd: CG %d iterations, residual %.3e", result.iterations, result.residual)
            break
        except NumericalFailure as e:
            if attempt == 0:
                epsilon *= 2.0
                events.append(f"ngd: CG breakdown ({e}), retrying with epsilon={epsilon:.3e}")
            else:
                events.append(f"ngd: CG breakdown ({e}), falling back to the gradient direction")
            logger.warning(events[-1])
    if direction is None or not np.isfinite(directional(grad, direction)) or directional(grad, direction) >= 0.0:
        if direction is not None:
            events.append("ngd: Gauss-Newton direction is not a descent direction, using the gradient")
            logger.warning(events[-1])
        direction = (-grad).astype(theta.dtype)
    result = strong_wolfe(loss_fn, theta, direction, loss, grad, step=config.step, c1=config.c1, c2=config.c2,
                          max_iters=config.line_search_iters, max_evals=config.line_search_iters + 5)
    if not result.success:
        events.append(f"ngd: line search failed, keeping best point t={result.step:.3e}")
        logger.warning(events[-1])
    return StepOutcome(theta=result.x, loss=result.loss, grad=result.grad,
                       evaluations=1 + result.evaluations, events=events)
