"""Tumor data assimilation: recover the initial tumor from later observations.

The initial condition is parametrized by a Gaussian basis, ``m(0) = Phi p``,
and the state follows the reaction-diffusion model of
:mod:`pdeinv.reaction_diffusion`. The objective is

    1/2 ||Q (m(1) - pi_T)||^2 + beta/2 ||p||^2  [+ 1/2 ||Q0 (Phi p - d0)||^2]

with an optional second observation ``d0`` of the initial state. Diffusion
coefficients ``(k_W, k_G)`` can be estimated in an outer loop.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .grid import Grid
from .optimizer import (CONVERGED, ConvergenceLog, InnerSolverError, ObjectiveValue,
                        OptimizationProblem, SolverOptions, gauss_newton_solve)
from .reaction_diffusion import (BrainMask, CrankNicolsonDiffusion, assemble_diffusion,
                                 growth_field, simulate, tumor_adjoint, tumor_tangent)

log = logging.getLogger(__name__)


class GaussianBasis:
    """Gaussians ``phi_l(x) = c exp(-1/2 (x - mu_l)^T S^{-1} (x - mu_l))`` on a periodic grid.

    ``c = 1 / (2 pi sqrt(det S))`` for every dimension; distances use the
    nearest periodic image. Basis values are evaluated directly and cached.
    """

    def __init__(self, grid: Grid, centers, covariance):
        self.grid = grid
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(grid.ndim)
        if self.centers.shape[1] != grid.ndim or cov.shape != (grid.ndim, grid.ndim):
            raise ValueError("centers and covariance must match the grid dimension")
        if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance must be symmetric positive definite")
        self.covariance = cov

    @classmethod
    def isotropic(cls, grid: Grid, centers, sigma: float) -> "GaussianBasis":
        return cls(grid, centers, sigma ** 2 * np.eye(grid.ndim))

    @property
    def n_p(self) -> int:
        return self.centers.shape[0]

    @property
    def peak(self) -> float:
        return 1.0 / (2.0 * np.pi * math.sqrt(np.linalg.det(self.covariance)))

    @cached_property
    def values(self) -> np.ndarray:
        """Basis functions sampled on the grid, shape ``(n_p, *dims)``."""
        prec = np.linalg.inv(self.covariance)
        out = np.empty((self.n_p, *self.grid.dims))
        for l, mu in enumerate(self.centers):
            diff = np.stack([np.mod(x - c + np.pi, 2 * np.pi) - np.pi
                             for x, c in zip(self.grid.coords, mu)])
            quad = np.einsum("i...,ij,j...->...", diff, prec, diff)
            out[l] = self.peak * np.exp(-0.5 * quad)
        return out

    @cached_property
    def gram_diagonal(self) -> np.ndarray:
        """Diagonal of ``Phi^T Phi`` in the grid inner product."""
        flat = self.values.reshape(self.n_p, -1)
        return np.einsum("ij,ij->i", flat, flat) * self.grid.cell_volume

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_p,):
            raise ValueError(f"expected {self.n_p} coefficients, got shape {p.shape}")
        return np.tensordot(p, self.values, axes=1)

    def transpose(self, f: np.ndarray) -> np.ndarray:
        """``<phi_l, f>`` for every ``l`` with the grid quadrature weight."""
        return self.values.reshape(self.n_p, -1) @ f.ravel() * self.grid.cell_volume


def apply_basis(basis: GaussianBasis, p) -> np.ndarray:
    return basis.apply(p)


def apply_basis_transpose(basis: GaussianBasis, f: np.ndarray) -> np.ndarray:
    return basis.transpose(f)


def regular_centers(lo, hi, per_axis: int) -> np.ndarray:
    """Centers on a regular ``per_axis^d`` lattice spanning the box ``[lo, hi]``."""
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class ObservationOp:
    """Pointwise masking ``Q f = f`` on ``mask_field`` and 0 elsewhere."""

    mask_field: np.ndarray

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return np.where(self.mask_field, f, 0.0)

    @property
    def count(self) -> int:
        return int(self.mask_field.sum())


def build_observation(pi_T: np.ndarray, threshold: float) -> ObservationOp:
    """Observe the points where the data reaches ``threshold`` (all points for 0)."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError("observation threshold must lie in [0, 1)")
    if threshold == 0.0:
        mask = np.ones(pi_T.shape, dtype=bool)
    else:
        mask = pi_T >= threshold
    if not mask.any():
        warnings.warn(f"observation mask is empty at threshold {threshold:g}", RuntimeWarning,
                      stacklevel=2)
    return ObservationOp(mask)


@dataclass
class TumorProblem:
    pi_W: np.ndarray
    pi_G: np.ndarray
    pi_T: np.ndarray
    mask: BrainMask
    basis: GaussianBasis
    k_W: float
    k_G: float
    rho: float
    beta: float = 1e-4
    obs_threshold: float = 0.0
    n_t: int = 16
    t0_data: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.grid = self.basis.grid
        for name in ("pi_W", "pi_G", "pi_T"):
            if getattr(self, name).shape != self.grid.dims:
                raise ValueError(f"{name} does not live on the basis grid")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        self.kappa = assemble_diffusion(self.pi_W, self.pi_G, self.k_W, self.k_G, self.mask)
        self.rho_field = growth_field(self.rho, self.mask, self.grid.dims)
        self.observe = build_observation(self.pi_T, self.obs_threshold)
        self.observe0 = (build_observation(self.t0_data, self.obs_threshold)
                         if self.t0_data is not None else None)
        self.diffusion = CrankNicolsonDiffusion(self.kappa, 1.0 / self.n_t)

    def with_coefficients(self, k_W: float, k_G: float) -> "TumorProblem":
        return replace(self, k_W=k_W, k_G=k_G)

    def forward(self, p, t_final: float = 1.0, return_stages: bool = False):
        """State trajectory from ``Phi p`` over ``[0, t_final]`` with ``n_t`` steps per unit time."""
        m0 = self.basis.apply(p)
        if t_final == 1.0:
            return simulate(m0, self.kappa, self.rho_field, self.n_t, diffusion=self.diffusion,
                            return_stages=return_stages)
        steps = max(1, int(round(self.n_t * t_final)))
        return simulate(m0, self.kappa, self.rho_field, steps, t_final, return_stages=return_stages)


class TumorObjective(NamedTuple):
    objective: float
    mismatch: float


def _objective_terms(prob: TumorProblem, p: np.ndarray, m1: np.ndarray) -> TumorObjective:
    r = prob.observe(m1 - prob.pi_T)
    mismatch = 0.5 * prob.grid.inner(r, r)
    if prob.observe0 is not None:
        r0 = prob.observe0(prob.basis.apply(p) - prob.t0_data)
        mismatch += 0.5 * prob.grid.inner(r0, r0)
    return TumorObjective(mismatch + 0.5 * prob.beta * float(p @ p), mismatch)


def tumor_objective(prob: TumorProblem, p) -> TumorObjective:
    """Objective and raw data mismatch at coefficients ``p``."""
    p = np.asarray(p, dtype=float)
    return _objective_terms(prob, p, prob.forward(p)[-1])


@dataclass
class TumorLinearization:
    p: np.ndarray
    state: np.ndarray
    stages: np.ndarray
    adjoint: np.ndarray
    objective: float
    mismatch: float


def linearize(prob: TumorProblem, p, forward=None):
    """Gradient ``beta p - Phi^T lam(0)`` (plus the initial-observation term) and the linearization.

    ``forward`` optionally supplies ``(state, stages)`` from an earlier solve at ``p``.
    """
    p = np.asarray(p, dtype=float)
    state, stages = prob.forward(p, return_stages=True) if forward is None else forward
    obj = _objective_terms(prob, p, state[-1])
    final = -prob.observe(state[-1] - prob.pi_T)
    adjoint = tumor_adjoint(final, state, prob.kappa, prob.rho_field, diffusion=prob.diffusion,
                            stages=stages)
    g = prob.beta * p - prob.basis.transpose(adjoint[0])
    if prob.observe0 is not None:
        g += prob.basis.transpose(prob.observe0(prob.basis.apply(p) - prob.t0_data))
    return g, TumorLinearization(p, state, stages, adjoint, obj.objective, obj.mismatch)


def tumor_gradient(prob: TumorProblem, p) -> np.ndarray:
    return linearize(prob, p)[0]


def tumor_hessian_matvec_gn(prob: TumorProblem, lin: TumorLinearization, ptilde) -> np.ndarray:
    """Gauss-Newton Hessian ``beta pt - Phi^T lt(0)`` with ``lt(1) = -Q mt(1)``."""
    ptilde = np.asarray(ptilde, dtype=float)
    mt0 = prob.basis.apply(ptilde)
    mt = tumor_tangent(mt0, lin.state, prob.kappa, prob.rho_field, diffusion=prob.diffusion,
                       stages=lin.stages)
    lt = tumor_adjoint(-prob.observe(mt[-1]), lin.state, prob.kappa, prob.rho_field,
                       diffusion=prob.diffusion, stages=lin.stages)
    out = prob.beta * ptilde - prob.basis.transpose(lt[0])
    if prob.observe0 is not None:
        out += prob.basis.transpose(prob.observe0(mt0))
    return out


class TumorOptimization(OptimizationProblem):
    """Adapter exposing a :class:`TumorProblem` to the Gauss-Newton driver.

    States that leave the admissible density range make the objective
    infinite, so the line search backtracks away from them.
    """

    def __init__(self, prob: TumorProblem):
        self.prob = prob
        self.matvecs = 0
        self._cache_p: np.ndarray | None = None
        self._cache_forward = None
        self._precond = 1.0 / (prob.beta + prob.basis.gram_diagonal)

    def evaluate_objective(self, w: np.ndarray) -> ObjectiveValue:
        try:
            forward = self.prob.forward(w, return_stages=True)
        except InnerSolverError:
            raise
        except ValueError as exc:
            log.info("rejecting trial coefficients: %s", exc)
            return ObjectiveValue(math.inf, math.inf)
        self._cache_p = w.copy()
        self._cache_forward = forward
        obj = _objective_terms(self.prob, w, forward[0][-1])
        return ObjectiveValue(obj.objective, obj.mismatch)

    def evaluate_gradient(self, w: np.ndarray):
        forward = None
        if self._cache_p is not None and np.array_equal(self._cache_p, w):
            forward = self._cache_forward
        return linearize(self.prob, w, forward)

    def hessian_matvec(self, linearization: TumorLinearization, wt: np.ndarray) -> np.ndarray:
        self.matvecs += 1
        return tumor_hessian_matvec_gn(self.prob, linearization, wt)

    def apply_preconditioner(self, r: np.ndarray) -> np.ndarray:
        return self._precond * r


@dataclass(frozen=True)
class TumorInversionOptions:
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(rel_grad_tol=1e-3))
    invert_coefficients: bool = False
    max_coefficient_updates: int = 8
    coefficient_tol: float = 1e-3
    fd_step: float = 1e-4


@dataclass
class CoefficientStep:
    k_W: float
    k_G: float
    objective: float
    alpha: float


@dataclass
class TumorInversionResult:
    p: np.ndarray
    k_W: float
    k_G: float
    rho: float
    log: ConvergenceLog
    coefficient_history: list[CoefficientStep] = field(default_factory=list)
    status: str = ""

    @property
    def converged(self) -> bool:
        return self.status in CONVERGED


def _solve_coefficients(prob: TumorProblem, p0, opts: TumorInversionOptions):
    adapter = TumorOptimization(prob)
    return gauss_newton_solve(adapter, p0, opts.solver)


def _weighted_residual(prob: TumorProblem, p) -> np.ndarray:
    """Data residual scaled so that half its squared norm is the time-1 mismatch."""
    m1 = prob.forward(p)[-1]
    return prob.observe(m1 - prob.pi_T).ravel() * math.sqrt(prob.grid.cell_volume)


def _coefficient_step(prob: TumorProblem, p, opts: TumorInversionOptions):
    """One Gauss-Newton step in ``log(k_W), log(k_G)`` with a forward-difference Jacobian.

    The step is backtracked on the objective with ``p`` fixed. Returns the
    updated problem and the accepted step record (``None`` when no decrease).
    """
    theta = np.log([prob.k_W, prob.k_G])
    r0 = _weighted_residual(prob, p)
    f0 = tumor_objective(prob, p).objective
    jac = np.empty((r0.size, 2))
    for i in range(2):
        th = theta.copy()
        th[i] += opts.fd_step
        trial = prob.with_coefficients(*np.exp(th))
        jac[:, i] = (_weighted_residual(trial, p) - r0) / opts.fd_step
    jtj = jac.T @ jac
    grad = jac.T @ r0
    damping = 1e-10 * max(np.trace(jtj), 1e-300)
    step = -np.linalg.solve(jtj + damping * np.eye(2), grad)
    alpha = 1.0
    slope = float(grad @ step)
    while alpha >= 1e-4:
        k_new = np.exp(theta + alpha * step)
        trial = prob.with_coefficients(*k_new)
        try:
            f = tumor_objective(trial, p).objective
        except ValueError:
            f = math.inf
        if f <= f0 + 1e-4 * alpha * slope:
            return trial, CoefficientStep(float(k_new[0]), float(k_new[1]), f, alpha), alpha * np.abs(step).max()
        alpha *= 0.5
    return prob, None, 0.0


def run_tumor_inversion(prob: TumorProblem, opts: TumorInversionOptions = TumorInversionOptions(),
                        p0=None) -> TumorInversionResult:
    """Invert for ``p``; optionally alternate with updates of ``(k_W, k_G)``.

    The coefficient loop alternates a Gauss-Newton solve for ``p`` with a
    finite-difference Gauss-Newton step on the log diffusion coefficients,
    warm-starting ``p`` each time, until the coefficient update falls below
    ``coefficient_tol`` (in log scale) or no decrease is found.
    """
    p = np.zeros(prob.basis.n_p) if p0 is None else np.asarray(p0, dtype=float).copy()
    p, history = _solve_coefficients(prob, p, opts)
    steps: list[CoefficientStep] = []
    if opts.invert_coefficients:
        for _ in range(opts.max_coefficient_updates):
            if history.status not in CONVERGED:
                break
            prob, step, change = _coefficient_step(prob, p, opts)
            if step is None:
                break
            steps.append(step)
            p, history = _solve_coefficients(prob, p, opts)
            log.info("coefficients k_W=%.5g k_G=%.5g (J=%.6e)", prob.k_W, prob.k_G, step.objective)
            if change < opts.coefficient_tol:
                break
    return TumorInversionResult(p, prob.k_W, prob.k_G, prob.rho, history, steps, history.status)


class LCurvePoint(NamedTuple):
    beta: float
    residual_norm: float
    solution_norm: float


def beta_sweep(prob: TumorProblem, betas, opts: TumorInversionOptions = TumorInversionOptions()):
    """Solve for each ``beta`` and collect ``(||Q(m(1) - pi_T)||, ||p||)`` pairs for an L-curve."""
    points = []
    for beta in betas:
        stage = replace(prob, beta=float(beta))
        res = run_tumor_inversion(stage, replace(opts, invert_coefficients=False))
        r = stage.observe(stage.forward(res.p)[-1] - stage.pi_T)
        points.append(LCurvePoint(float(beta), stage.grid.norm(r), float(np.linalg.norm(res.p))))
        log.info("beta=%g: residual %.4e, |p| %.4e", beta, points[-1].residual_norm, points[-1].solution_norm)
    return points


MULTIFOCAL_FOCI = ((2.5, 2.6), (3.8, 3.7))
MULTIFOCAL_AXES = (2.3, 2.8)


def multifocal_tumor(grid: Grid, seed: int = 0, k_W: float = 0.05, k_G: float = 0.01,
                     rho: float = 3.0, n_t: int = 16):
    """Two-focus synthetic tumor in an elliptic brain with smooth white/gray matter maps.

    Each focus carries a 2 x 2 block of Gaussians (spacing two cells, width two
    cells); the true coefficients are drawn from ``seed``. Noiseless states at
    ``t = 0, 1, 2`` are included.
    """
    from .fixtures import Fixture

    if grid.ndim != 2:
        raise ValueError("the multifocal tumor fixture is two-dimensional")
    x1, x2 = grid.coords
    radius = np.sqrt(((x1 - np.pi) / MULTIFOCAL_AXES[0]) ** 2 + ((x2 - np.pi) / MULTIFOCAL_AXES[1]) ** 2)
    inside = radius <= 1.0
    # tissue fades out before the brain boundary so the diffusivity has no jump there
    taper = 0.5 * (1.0 - np.tanh((radius - 0.85) / 0.05))
    white = 0.5 + 0.5 * np.tanh(3.0 * np.sin(x1) * np.cos(x2))
    pi_W = np.where(inside, taper * white, 0.0)
    pi_G = np.where(inside, taper * (1.0 - white), 0.0)
    h = grid.spacing[0]
    centers = np.concatenate([regular_centers(np.array(f) - h, np.array(f) + h, 2) for f in MULTIFOCAL_FOCI])
    sigma = 2.0 * h
    basis = GaussianBasis.isotropic(grid, centers, sigma)
    rng = np.random.default_rng(seed)
    p_true = rng.uniform(0.08, 0.16, basis.n_p) / basis.peak
    mask = BrainMask(inside)
    truth = TumorProblem(pi_W, pi_G, np.zeros(grid.dims), mask, basis, k_W, k_G, rho, n_t=n_t)
    traj = truth.forward(p_true, t_final=2.0)
    return Fixture("multifocal_tumor",
                   {"pi_W": pi_W, "pi_G": pi_G, "inside": inside.astype(float),
                    "m_t0": traj[0], "m_t1": traj[n_t], "m_t2": traj[2 * n_t]},
                   {"k_W": k_W, "k_G": k_G, "rho": rho, "n_t": n_t, "p_true": p_true,
                    "centers": centers, "sigma": sigma})


def fixture_problem(fx, pi_T: np.ndarray, t0_data: np.ndarray | None = None, threshold: float = 0.0,
                    beta: float = 1e-6, k_W: float | None = None, k_G: float | None = None) -> TumorProblem:
    """Tumor problem on a :func:`multifocal_tumor` fixture with the given observations."""
    grid = Grid(fx["pi_W"].shape)
    basis = GaussianBasis.isotropic(grid, fx["centers"], fx["sigma"])
    return TumorProblem(fx["pi_W"], fx["pi_G"], pi_T, BrainMask(fx["inside"] > 0.5), basis,
                        fx["k_W"] if k_W is None else k_W, fx["k_G"] if k_G is None else k_G,
                        fx["rho"], beta=beta, obs_threshold=threshold, n_t=fx["n_t"], t0_data=t0_data)


STUDY_COLUMNS = ("threshold", "noise", "coeff_err", "err_t0", "err_t1", "err_t2")


class StudyRow(NamedTuple):
    threshold: float
    noise: float
    coeff_err: float
    err_t0: float
    err_t1: float
    err_t2: float


def add_noise(m: np.ndarray, level: float, draw: np.ndarray) -> np.ndarray:
    """Additive Gaussian noise with standard deviation ``level * max(m)``, clipped to ``[0, 1]``."""
    return np.clip(m + level * float(m.max()) * draw, 0.0, 1.0)


def noise_threshold_study(fx, noise_levels=(0.01, 0.05, 0.1), thresholds=(0.1, 0.2, 0.3, 0.4),
                          seed: int = 0, beta: float = 1e-4, k_start=(0.5, 2.0),
                          opts: TumorInversionOptions | None = None,
                          realizations: int = 1) -> list[StudyRow]:
    """Invert noisy, thresholded observations at ``t = 0, 1`` for every (threshold, noise) cell.

    ``realizations`` pairs of standard-normal draws (from ``seed``) are shared
    by all cells and scaled by the noise level; reported errors are averages
    over the realizations. Each inversion recovers ``p`` and ``(k_W, k_G)``
    starting from the true coefficients scaled by ``k_start``. Errors are
    relative L2 distances to the noiseless states; ``t = 2`` is a pure
    prediction. ``coeff_err`` is the relative error of ``(k_W, k_G)``.
    """
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    opts = opts or TumorInversionOptions(invert_coefficients=True)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((realizations, 2, *fx["m_t0"].shape))
    k_true = np.array([fx["k_W"], fx["k_G"]])
    truth = [fx["m_t0"], fx["m_t1"], fx["m_t2"]]
    rows = []
    for thr in thresholds:
        for level in noise_levels:
            cell = np.zeros(4)
            for r in range(realizations):
                d0 = add_noise(fx["m_t0"], level, draws[r, 0])
                d1 = add_noise(fx["m_t1"], level, draws[r, 1])
                prob = fixture_problem(fx, d1, d0, thr, beta, k_true[0] * k_start[0], k_true[1] * k_start[1])
                res = run_tumor_inversion(prob, opts)
                fitted = prob.with_coefficients(res.k_W, res.k_G)
                traj = fitted.forward(res.p, t_final=2.0)
                n_t = fitted.n_t
                errs = [np.linalg.norm(traj[i * n_t] - t) / np.linalg.norm(t) for i, t in enumerate(truth)]
                coeff_err = np.linalg.norm([res.k_W, res.k_G] - k_true) / np.linalg.norm(k_true)
                cell += np.array([coeff_err, *errs]) / realizations
                log.info("threshold %.2f noise %.2f draw %d: %s", thr, level, r, res.status)
            rows.append(StudyRow(float(thr), float(level), *map(float, cell)))
    return rows
