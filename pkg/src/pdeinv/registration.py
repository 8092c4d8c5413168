"""Velocity-based diffeomorphic registration with a transport constraint.

Minimizes ``1/2 ||m(1) - m_R||^2 + beta R[v]`` over stationary velocities
``v``, where ``m`` is the template transported by ``v``. All L2 quantities use
the trapezoidal rule on the periodic grid (weight ``prod(h)``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import spectral
from .grid import Grid
from .optimizer import (CONVERGED, ConvergenceLog, ObjectiveValue, OptimizationProblem,
                        SolverOptions, gauss_newton_solve)
from .spectral import RegularizationConfig
from .transport import (DEFAULT_NT, TransportOperators, detgrad_transport, solve_adjoint,
                        solve_incremental_adjoint_gn, solve_incremental_state, solve_state)

log = logging.getLogger(__name__)


@dataclass
class RegistrationProblem:
    m_R: np.ndarray
    m_T: np.ndarray
    reg: RegularizationConfig = field(default_factory=RegularizationConfig)
    incompressible: bool = False
    n_t: int = DEFAULT_NT

    def __post_init__(self) -> None:
        if self.m_R.shape != self.m_T.shape:
            raise ValueError("reference and template must share one grid")
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        self.grid = Grid(self.m_R.shape)
        self.initial_mismatch = 0.5 * self.grid.inner(self.m_T - self.m_R, self.m_T - self.m_R)

    def with_beta(self, beta: float) -> "RegistrationProblem":
        return replace(self, reg=self.reg.with_beta(beta))


class RegObjective(NamedTuple):
    objective: float
    mismatch: float
    regularization: float
    relative_mismatch: float


@dataclass
class RegistrationState:
    """Linearization point: velocity, state and adjoint trajectories."""

    v: np.ndarray
    state: np.ndarray
    adjoint: np.ndarray
    mismatch: float
    relative_mismatch: float
    objective: float
    gradient_norm: float
    ops: TransportOperators = field(repr=False)
    state_grad: np.ndarray = field(repr=False)


def _time_weights(n_t: int) -> np.ndarray:
    w = np.full(n_t + 1, 1.0 / n_t)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _time_integral(lam: np.ndarray, state_grad: np.ndarray) -> np.ndarray:
    """Trapezoidal rule for ``int_0^1 lam grad m dt`` over the nodal frames."""
    w = _time_weights(lam.shape[0] - 1)
    return np.einsum("t,t...,ti...->i...", w, lam, state_grad)


def _project(prob: RegistrationProblem, v: np.ndarray) -> np.ndarray:
    return spectral.leray_project(v) if prob.incompressible else v


def regularization_value(prob: RegistrationProblem, v: np.ndarray) -> float:
    grid = prob.grid
    cfg = prob.reg
    val = 0.5 * cfg.beta * grid.inner(spectral.apply_regop(v, cfg), v)
    if cfg.div_penalty > 0:
        dv = spectral.div(v)
        val += 0.5 * cfg.div_penalty * grid.inner(dv, dv)
    return val


def _objective_from_final(prob: RegistrationProblem, m1: np.ndarray, v: np.ndarray) -> RegObjective:
    r = m1 - prob.m_R
    mismatch = 0.5 * prob.grid.inner(r, r)
    reg = regularization_value(prob, v)
    if prob.initial_mismatch > 0:
        rel = mismatch / prob.initial_mismatch
    else:
        rel = 0.0 if mismatch == 0 else np.inf
    return RegObjective(mismatch + reg, mismatch, reg, rel)


def reg_objective(prob: RegistrationProblem, v: np.ndarray) -> RegObjective:
    """Objective, raw mismatch, regularization and mismatch relative to ``v = 0``."""
    m1 = solve_state(prob.m_T, v, prob.n_t)[-1]
    return _objective_from_final(prob, m1, v)


def linearize(prob: RegistrationProblem, v: np.ndarray,
              state: np.ndarray | None = None) -> tuple[np.ndarray, RegistrationState]:
    """Gradient at ``v`` together with the state/adjoint linearization."""
    ops = TransportOperators(v, prob.n_t)
    if state is None:
        state = solve_state(prob.m_T, v, prob.n_t, ops)
    obj = _objective_from_final(prob, state[-1], v)
    adjoint = solve_adjoint(prob.m_R - state[-1], v, prob.n_t, ops)
    state_grad = np.stack([spectral.grad(m) for m in state])
    g = spectral.apply_full_regop(v, prob.reg) + _time_integral(adjoint, state_grad)
    g = _project(prob, g)
    lin = RegistrationState(v=v, state=state, adjoint=adjoint, mismatch=obj.mismatch,
                            relative_mismatch=obj.relative_mismatch, objective=obj.objective,
                            gradient_norm=prob.grid.norm(g), ops=ops, state_grad=state_grad)
    return g, lin


def reg_gradient(prob: RegistrationProblem, v: np.ndarray) -> np.ndarray:
    """Reduced gradient ``beta A v + K int_0^1 lam grad m dt``."""
    return linearize(prob, v)[0]


def reg_hessian_matvec_gn(prob: RegistrationProblem, lin: RegistrationState,
                          vtilde: np.ndarray) -> np.ndarray:
    """Gauss-Newton Hessian applied to ``vtilde``."""
    mt = solve_incremental_state(vtilde, lin.state, lin.v, lin.ops, lin.state_grad)
    lt = solve_incremental_adjoint_gn(mt[-1], lin.v, prob.n_t, lin.ops)
    out = spectral.apply_full_regop(vtilde, prob.reg) + _time_integral(lt, lin.state_grad)
    return _project(prob, out)


class RegistrationObjective(OptimizationProblem):
    """Adapter exposing a :class:`RegistrationProblem` to the Gauss-Newton driver.

    Counts Hessian matvecs and PDE solves. The last state solve is cached so
    that the gradient at an accepted line-search point does not repeat it.
    """

    def __init__(self, prob: RegistrationProblem):
        self.prob = prob
        self.matvecs = 0
        self.pde_solves = 0
        self._cache_v: np.ndarray | None = None
        self._cache_state: np.ndarray | None = None

    def evaluate_objective(self, w: np.ndarray) -> ObjectiveValue:
        state = solve_state(self.prob.m_T, w, self.prob.n_t)
        self.pde_solves += 1
        self._cache_v = w.copy()
        self._cache_state = state
        obj = _objective_from_final(self.prob, state[-1], w)
        return ObjectiveValue(obj.objective, obj.relative_mismatch)

    def evaluate_gradient(self, w: np.ndarray):
        state = None
        if self._cache_v is not None and np.array_equal(self._cache_v, w):
            state = self._cache_state
        else:
            self.pde_solves += 1
        self.pde_solves += 1  # adjoint
        return linearize(self.prob, w, state)

    def hessian_matvec(self, linearization: RegistrationState, wt: np.ndarray) -> np.ndarray:
        self.matvecs += 1
        self.pde_solves += 2
        return reg_hessian_matvec_gn(self.prob, linearization, wt)

    def apply_preconditioner(self, r: np.ndarray) -> np.ndarray:
        return _project(self.prob, spectral.inv_full_regop(r, self.prob.reg))

    def inner_product(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.prob.grid.inner(a, b)


@dataclass(frozen=True)
class RegistrationOptions:
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(rel_grad_tol=5e-2))
    continuation: bool = False
    beta_start: float = 1.0
    beta_factor: float = 0.1


@dataclass
class RegistrationResult:
    state: RegistrationState
    log: ConvergenceLog
    stages: list[tuple[float, ConvergenceLog]]
    matvecs: int
    pde_solves: int

    @property
    def status(self) -> str:
        return self.log.status

    @property
    def converged(self) -> bool:
        return self.log.status in CONVERGED


def beta_schedule(target: float, start: float = 1.0, factor: float = 0.1) -> list[float]:
    """Geometric continuation ``start, start*factor, ...`` ending exactly at ``target``."""
    if target >= start:
        return [target]
    betas = []
    beta = start
    while beta > target * (1 + 1e-12):
        betas.append(beta)
        beta *= factor
    betas.append(target)
    return betas


def run_registration(prob: RegistrationProblem, opts: RegistrationOptions = RegistrationOptions(),
                     v0: np.ndarray | None = None) -> RegistrationResult:
    """Solve the registration problem, optionally with beta continuation."""
    v = prob.grid.zeros_vector() if v0 is None else _project(prob, np.array(v0, dtype=float))
    betas = (beta_schedule(prob.reg.beta, opts.beta_start, opts.beta_factor)
             if opts.continuation else [prob.reg.beta])
    stages: list[tuple[float, ConvergenceLog]] = []
    matvecs = solves = 0
    stage_prob = prob
    for beta in betas:
        stage_prob = prob.with_beta(beta)
        adapter = RegistrationObjective(stage_prob)
        v, history = gauss_newton_solve(adapter, v, opts.solver)
        matvecs += adapter.matvecs
        solves += adapter.pde_solves
        stages.append((beta, history))
        log.info("beta=%g: %s after %d iterations", beta, history.status, history.iterations)
        if history.status not in CONVERGED and beta != betas[-1]:
            log.warning("continuation stage beta=%g ended with %s", beta, history.status)
    _, state = linearize(stage_prob, v)
    return RegistrationResult(state, stages[-1][1], stages, matvecs, solves)


class DetGradReport(NamedTuple):
    psi: np.ndarray
    min: float
    max: float
    diffeomorphic: bool


def detgrad_report(v: np.ndarray, n_t: int = DEFAULT_NT) -> DetGradReport:
    """Determinant of the deformation gradient and whether it stays positive."""
    psi = detgrad_transport(v, n_t)
    lo, hi = float(psi.min()), float(psi.max())
    if lo <= 0:
        log.warning("deformation is not diffeomorphic: min det grad = %g", lo)
    return DetGradReport(psi, lo, hi, lo > 0)
