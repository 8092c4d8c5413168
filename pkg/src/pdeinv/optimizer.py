"""Inexact, globalized Gauss-Newton-Krylov solver.

The outer loop takes steps ``w <- w + alpha * dw`` where ``dw`` solves the
Gauss-Newton system ``H dw = -g`` inexactly with PCG, using the forcing term
``eta_k = min(0.5, sqrt(||g_k|| / ||g_0||))``, and ``alpha`` comes from an
Armijo backtracking line search.

Problems implement :class:`OptimizationProblem`; nothing here knows about
PDEs.
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

CONVERGED_REL = "converged_relative_gradient"
CONVERGED_ABS = "converged_absolute_gradient"
MAX_ITERATIONS = "max_iterations"
LINE_SEARCH_FAILURE = "line_search_failure"
INNER_SOLVER_FAILURE = "inner_solver_failure"

CONVERGED = (CONVERGED_REL, CONVERGED_ABS)


class LineSearchError(RuntimeError):
    """Backtracking reduced the step below the minimum without sufficient decrease."""


class InnerSolverError(RuntimeError):
    """A PDE solve inside an objective, gradient or Hessian evaluation failed."""


class ObjectiveValue(NamedTuple):
    value: float
    mismatch: float


class OptimizationProblem(ABC):
    """Callbacks the Gauss-Newton driver needs."""

    @abstractmethod
    def evaluate_objective(self, w: np.ndarray) -> ObjectiveValue:
        ...

    @abstractmethod
    def evaluate_gradient(self, w: np.ndarray) -> tuple[np.ndarray, Any]:
        """Return the gradient at ``w`` and the linearization used by ``hessian_matvec``."""

    @abstractmethod
    def hessian_matvec(self, linearization: Any, wt: np.ndarray) -> np.ndarray:
        ...

    def apply_preconditioner(self, r: np.ndarray) -> np.ndarray:
        return r.copy()

    def inner_product(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.vdot(a, b))


@dataclass(frozen=True)
class SolverOptions:
    rel_grad_tol: float = 5e-2
    abs_grad_tol: float = 1e-8
    max_newton: int = 50
    max_krylov: int = 100
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    forcing_cap: float = 0.5
    min_step: float = 1e-10

    def __post_init__(self) -> None:
        if not 0 < self.armijo_c1 < 1:
            raise ValueError("armijo_c1 must lie in (0, 1)")
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if self.rel_grad_tol <= 0 or self.abs_grad_tol <= 0:
            raise ValueError("gradient tolerances must be positive")
        if self.max_newton < 0 or self.max_krylov < 1:
            raise ValueError("iteration caps must be nonnegative (Krylov >= 1)")


@dataclass
class IterationRecord:
    """State after Newton iteration ``iteration``.

    ``eta``, ``pcg_iterations``, ``pcg_residuals`` and ``alpha`` describe the
    step that produced this iterate; they are empty for iteration 0.
    """

    iteration: int
    objective: float
    mismatch: float
    grad_norm: float
    alpha: float = math.nan
    eta: float = math.nan
    pcg_iterations: int = 0
    pcg_residuals: list[float] = field(default_factory=list)
    negative_curvature: bool = False


@dataclass
class ConvergenceLog:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = ""
    message: str = ""

    @property
    def iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def converged(self) -> bool:
        return self.status in CONVERGED

    @property
    def objectives(self) -> list[float]:
        return [r.objective for r in self.records]

    @property
    def grad_norms(self) -> list[float]:
        return [r.grad_norm for r in self.records]

    @property
    def pcg_counts(self) -> list[int]:
        return [r.pcg_iterations for r in self.records[1:]]

    @property
    def etas(self) -> list[float]:
        return [r.eta for r in self.records[1:]]


class PCGResult(NamedTuple):
    direction: np.ndarray
    residuals: list[float]
    iterations: int
    negative_curvature: bool
    converged: bool


def forcing_term(grad_norm: float, grad_norm0: float, cap: float = 0.5) -> float:
    """Superlinear forcing ``min(cap, sqrt(||g_k|| / ||g_0||))``."""
    return min(cap, math.sqrt(grad_norm / grad_norm0))


def pcg_solve(problem: OptimizationProblem, linearization: Any, rhs: np.ndarray,
              eta: float, max_iter: int) -> PCGResult:
    """Preconditioned CG on ``H x = rhs`` starting from ``x = 0``.

    Stops once ``||r|| < eta * ||rhs||``. On nonpositive curvature the current
    iterate is returned; at the first iteration the preconditioned right-hand
    side is returned instead.
    """
    inner = problem.inner_product
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rhs_norm = math.sqrt(max(inner(rhs, rhs), 0.0))
    residuals = [rhs_norm]
    if rhs_norm == 0.0:
        return PCGResult(x, residuals, 0, False, True)
    z = problem.apply_preconditioner(r)
    s = z.copy()
    rz = inner(r, z)
    for it in range(max_iter):
        hs = problem.hessian_matvec(linearization, s)
        curv = inner(s, hs)
        if curv <= 0.0:
            log.warning("PCG: nonpositive curvature at iteration %d", it)
            if it == 0:
                return PCGResult(z, residuals, 1, True, False)
            return PCGResult(x, residuals, it, True, False)
        step = rz / curv
        x = x + step * s
        r = r - step * hs
        rnorm = math.sqrt(max(inner(r, r), 0.0))
        residuals.append(rnorm)
        if rnorm < eta * rhs_norm:
            return PCGResult(x, residuals, it + 1, False, True)
        z = problem.apply_preconditioner(r)
        rz_new = inner(z, r)
        s = z + (rz_new / rz) * s
        rz = rz_new
    return PCGResult(x, residuals, max_iter, False, False)


class LineSearchResult(NamedTuple):
    alpha: float
    objective: ObjectiveValue
    evaluations: int


def armijo_backtrack(problem: OptimizationProblem, w: np.ndarray, direction: np.ndarray,
                     g: np.ndarray, f0: float, opts: SolverOptions = SolverOptions()) -> LineSearchResult:
    """Largest ``alpha`` in ``1, s, s^2, ...`` with ``J(w + alpha d) <= J(w) + c1 alpha <g, d>``."""
    slope = problem.inner_product(g, direction)
    if not slope < 0:
        raise ValueError(f"not a descent direction: <g, d> = {slope:g}")
    alpha = 1.0
    evals = 0
    while alpha >= opts.min_step:
        trial = problem.evaluate_objective(w + alpha * direction)
        evals += 1
        if trial.value <= f0 + opts.armijo_c1 * alpha * slope:
            return LineSearchResult(alpha, trial, evals)
        alpha *= opts.armijo_shrink
    raise LineSearchError(f"no sufficient decrease for step >= {opts.min_step:g} ({evals} evaluations)")


def gauss_newton_solve(problem: OptimizationProblem, w0: np.ndarray,
                       opts: SolverOptions = SolverOptions()) -> tuple[np.ndarray, ConvergenceLog]:
    """Minimize with the inexact Gauss-Newton-Krylov method.

    Returns the last accepted iterate (the best one, since every accepted step
    decreases the objective) and the convergence log, whose ``status`` tells
    convergence, iteration-cap exhaustion, line-search failure and inner
    solver failure apart.
    """
    w = np.array(w0, dtype=float, copy=True)
    history = ConvergenceLog()
    try:
        fval = problem.evaluate_objective(w)
        g, lin = problem.evaluate_gradient(w)
    except InnerSolverError as exc:
        history.status = INNER_SOLVER_FAILURE
        history.message = str(exc)
        return w, history
    gnorm = math.sqrt(problem.inner_product(g, g))
    gnorm0 = gnorm
    history.records.append(IterationRecord(0, fval.value, fval.mismatch, gnorm))
    log.info("GN it 0: J=%.6e mismatch=%.6e |g|=%.6e", fval.value, fval.mismatch, gnorm)

    k = 0
    while True:
        if gnorm <= opts.abs_grad_tol:
            history.status = CONVERGED_ABS
            break
        if gnorm <= opts.rel_grad_tol * gnorm0:
            history.status = CONVERGED_REL
            break
        if k >= opts.max_newton:
            history.status = MAX_ITERATIONS
            history.message = f"reached {opts.max_newton} Newton iterations"
            break
        eta = forcing_term(gnorm, gnorm0, opts.forcing_cap)
        try:
            pcg = pcg_solve(problem, lin, -g, eta, opts.max_krylov)
            direction = pcg.direction
            if problem.inner_product(g, direction) >= 0:
                log.warning("PCG direction is not a descent direction; using preconditioned gradient")
                direction = -problem.apply_preconditioner(g)
            ls = armijo_backtrack(problem, w, direction, g, fval.value, opts)
            w_next = w + ls.alpha * direction
            g, lin = problem.evaluate_gradient(w_next)
        except LineSearchError as exc:
            history.status = LINE_SEARCH_FAILURE
            history.message = str(exc)
            break
        except InnerSolverError as exc:
            history.status = INNER_SOLVER_FAILURE
            history.message = str(exc)
            break
        w = w_next
        fval = ls.objective
        gnorm = math.sqrt(problem.inner_product(g, g))
        k += 1
        history.records.append(IterationRecord(
            k, fval.value, fval.mismatch, gnorm, ls.alpha, eta,
            pcg.iterations, pcg.residuals, pcg.negative_curvature))
        log.info("GN it %d: J=%.6e mismatch=%.6e |g|/|g0|=%.3e alpha=%g pcg=%d",
                 k, fval.value, fval.mismatch, gnorm / gnorm0, ls.alpha, pcg.iterations)
    return w, history
