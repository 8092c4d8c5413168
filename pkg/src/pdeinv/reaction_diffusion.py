"""Strang-splitting solvers for the reaction-diffusion tumor model.

Forward model ``dm/dt = div(kappa grad m) + rho m (1 - m)``. Each step of
size ``h`` takes a Crank-Nicolson half step of diffusion, an exact logistic
step of length ``h`` and another diffusion half step. The tangent and adjoint
models reuse the same splitting with the reaction step linearized, which
makes them exact transposes of each other.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from . import spectral
from .grid import wavenumbers
from .optimizer import InnerSolverError

log = logging.getLogger(__name__)

CN_RTOL = 1e-6
CN_MAXITER = 500
LOGISTIC_SLACK = 1e-12
LOGISTIC_NOTABLE = 5e-3
LOGISTIC_GROSS = 0.05


class DiffusionSolveError(InnerSolverError):
    """PCG failed to converge on a Crank-Nicolson half step."""


@dataclass(frozen=True)
class BrainMask:
    """Brain region ``inside`` and the penalty coefficients used outside it.

    ``penalty_k`` defaults to ``1e-3 * min(k_W, k_G)`` when diffusion is
    assembled; ``penalty_rho`` defaults to 0 (no growth outside).
    """

    inside: np.ndarray
    penalty_k: float | None = None
    penalty_rho: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "inside", np.asarray(self.inside, dtype=bool))
        if self.penalty_k is not None and self.penalty_k < 0:
            raise ValueError("penalty_k must be nonnegative")
        if self.penalty_rho < 0:
            raise ValueError("penalty_rho must be nonnegative")

    @classmethod
    def everywhere(cls, dims) -> "BrainMask":
        return cls(np.ones(tuple(dims), dtype=bool))


def assemble_diffusion(pi_W: np.ndarray, pi_G: np.ndarray, k_W: float, k_G: float,
                       mask: BrainMask | None = None) -> np.ndarray:
    """Isotropic diffusivity ``k_W pi_W + k_G pi_G`` inside the brain, ``penalty_k`` outside."""
    if k_W < 0 or k_G < 0:
        raise ValueError("diffusion coefficients must be nonnegative")
    kappa = k_W * pi_W + k_G * pi_G
    if mask is not None:
        pen = mask.penalty_k
        if pen is None:
            pen = 1e-3 * min(k_W, k_G)
        elif pen >= min(k_W, k_G):
            raise ValueError("penalty_k must be smaller than min(k_W, k_G)")
        kappa = np.where(mask.inside, kappa, pen)
    if np.any(kappa < 0):
        raise ValueError("diffusivity must be nonnegative (check tissue maps)")
    return kappa


def growth_field(rho: float, mask: BrainMask | None, dims) -> np.ndarray:
    """Proliferation rate ``rho`` inside the brain and ``penalty_rho`` outside."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if mask is None:
        return np.full(tuple(dims), float(rho))
    return np.where(mask.inside, float(rho), mask.penalty_rho)


def logistic_step(m: np.ndarray, rho_field, h: float) -> np.ndarray:
    """Exact solution of ``dm/dt = rho m (1 - m)`` after time ``h``.

    Densities slightly outside ``[0, 1]`` (solver round-off) are clamped; the
    clamp is logged, and warned about when it exceeds ``LOGISTIC_NOTABLE``.
    Gross violations raise ``ValueError``.
    """
    lo, hi = float(m.min()), float(m.max())
    if lo < -LOGISTIC_GROSS or hi > 1 + LOGISTIC_GROSS:
        raise ValueError(f"tumor density out of range [{lo:.3g}, {hi:.3g}]")
    if lo < -LOGISTIC_SLACK or hi > 1 + LOGISTIC_SLACK:
        msg = f"clamping tumor density from [{lo:.3g}, {hi:.3g}] to [0, 1]"
        if lo < -LOGISTIC_NOTABLE or hi > 1 + LOGISTIC_NOTABLE:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        else:
            log.debug(msg)
        m = np.clip(m, 0.0, 1.0)
    growth = np.exp(np.asarray(rho_field) * h)
    return m * growth / (1.0 - m + m * growth)


class CrankNicolsonDiffusion:
    """Solver for ``(I - h/4 L) x = (I + h/4 L) m`` with ``L = div(kappa grad)``.

    PCG runs on the equivalent system ``(I - h/4 L)(x - m) = h/2 L m`` to a
    relative residual of ``rtol``, preconditioned by the constant-coefficient
    operator ``I - h/4 mean(kappa) lap`` (diagonal in Fourier space).
    Iteration counts of every solve are appended to ``iterations``.
    """

    def __init__(self, kappa: np.ndarray, h_t: float, rtol: float = CN_RTOL,
                 maxiter: int = CN_MAXITER, precondition: bool = True):
        if not h_t > 0:
            raise ValueError("time step must be positive")
        self.kappa = kappa
        self.dims = kappa.shape
        self.a = 0.25 * h_t
        self.rtol = rtol
        self.maxiter = maxiter
        self.trivial = not np.any(kappa)
        self.iterations: list[int] = []
        n = kappa.size
        self._lhs = LinearOperator((n, n), matvec=self._lhs_matvec, dtype=float)
        self._prec = None
        if precondition:
            symbol = 1.0 + self.a * float(kappa.mean()) * wavenumbers(self.dims).ksq_odd
            inv_symbol = 1.0 / symbol
            self._prec = LinearOperator(
                (n, n), dtype=float,
                matvec=lambda r: spectral._ifft(inv_symbol * spectral._fft(r.reshape(self.dims)),
                                                self.dims).ravel())

    def apply_L(self, f: np.ndarray) -> np.ndarray:
        return spectral.div(self.kappa * spectral.grad(f))

    def _lhs_matvec(self, x):
        f = x.reshape(self.dims)
        return (f - self.a * self.apply_L(f)).ravel()

    def __call__(self, m: np.ndarray) -> np.ndarray:
        if self.trivial:
            return m.copy()
        # Solve for the increment x - m, whose right-hand side 2a L m is O(h).
        rhs = (2.0 * self.a * self.apply_L(m)).ravel()
        count = [0]

        def tick(_):
            count[0] += 1

        delta, info = cg(self._lhs, rhs, rtol=self.rtol, atol=0.0,
                         maxiter=self.maxiter, M=self._prec, callback=tick)
        self.iterations.append(count[0])
        if info != 0:
            raise DiffusionSolveError(f"PCG did not reach rtol={self.rtol:g} in {self.maxiter} iterations")
        return m + delta.reshape(self.dims)


def cn_diffusion_halfstep(m: np.ndarray, kappa: np.ndarray, h_t: float,
                          rtol: float = CN_RTOL, maxiter: int = CN_MAXITER) -> np.ndarray:
    """One Crank-Nicolson diffusion half step of a splitting step of length ``h_t``."""
    return CrankNicolsonDiffusion(kappa, h_t, rtol, maxiter)(m)


def simulate(m0: np.ndarray, kappa: np.ndarray, rho_field, n_t: int,
             t_final: float = 1.0, diffusion: CrankNicolsonDiffusion | None = None,
             return_stages: bool = False):
    """Strang-split forward solve over ``[0, t_final]``; trajectory of shape ``(n_t + 1, *dims)``.

    With ``return_stages`` the densities entering each reaction step (shape
    ``(n_t, *dims)``) are returned as well; the exact tangent model needs them.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    h = t_final / n_t
    diff = diffusion or CrankNicolsonDiffusion(kappa, h)
    traj = np.empty((n_t + 1, *m0.shape))
    stages = np.empty((n_t, *m0.shape)) if return_stages else None
    traj[0] = m0
    for j in range(n_t):
        m = diff(traj[j])
        if return_stages:
            stages[j] = m
        m = logistic_step(m, rho_field, h)
        traj[j + 1] = diff(m)
    return (traj, stages) if return_stages else traj


def tumor_forward(p: np.ndarray, basis, kappa: np.ndarray, rho: float, mask: BrainMask | None,
                  n_t: int, t_final: float = 1.0) -> np.ndarray:
    """Forward trajectory from the initial condition ``basis.apply(p)``."""
    m0 = basis.apply(p)
    return simulate(m0, kappa, growth_field(rho, mask, m0.shape), n_t, t_final)


def _reaction_factors(state: np.ndarray, rho_field, h: float, stages: np.ndarray | None) -> np.ndarray:
    """Per-step multipliers of the linearized reaction step.

    With ``stages`` this is the exact derivative of :func:`logistic_step` at
    the stage density, ``e / (1 - m + m e)^2`` with ``e = exp(rho h)``.
    Without it, ``exp(h rho (1 - 2 m_mid))`` with ``m_mid`` the mean of the
    adjacent frames.
    """
    rho_field = np.asarray(rho_field)
    if stages is not None:
        growth = np.exp(rho_field * h)
        m = np.clip(stages, 0.0, 1.0)
        return growth / (1.0 - m + m * growth) ** 2
    mid = 0.5 * (state[:-1] + state[1:])
    return np.exp(h * rho_field * (1.0 - 2.0 * mid))


def tumor_tangent(mt0: np.ndarray, state: np.ndarray, kappa: np.ndarray, rho_field,
                  t_final: float = 1.0, diffusion: CrankNicolsonDiffusion | None = None,
                  stages: np.ndarray | None = None) -> np.ndarray:
    """Linearized forward model ``dmt/dt = div(kappa grad mt) + rho (1 - 2m) mt``, ``mt(0) = mt0``.

    ``stages`` (from ``simulate(..., return_stages=True)``) selects the exact
    derivative of the discrete forward map; see :func:`_reaction_factors`.
    """
    n_t = state.shape[0] - 1
    h = t_final / n_t
    diff = diffusion or CrankNicolsonDiffusion(kappa, h)
    factors = _reaction_factors(state, rho_field, h, stages)
    traj = np.empty_like(state)
    traj[0] = mt0
    for j in range(n_t):
        traj[j + 1] = diff(factors[j] * diff(traj[j]))
    return traj


def tumor_adjoint(final: np.ndarray, state: np.ndarray, kappa: np.ndarray, rho_field,
                  t_final: float = 1.0, diffusion: CrankNicolsonDiffusion | None = None,
                  stages: np.ndarray | None = None) -> np.ndarray:
    """Adjoint ``-dl/dt = div(kappa grad l) + rho (1 - 2m) l`` backward from ``l(t_final) = final``.

    Each backward step is the transpose of the corresponding
    :func:`tumor_tangent` step (Crank-Nicolson half steps are symmetric).
    """
    n_t = state.shape[0] - 1
    h = t_final / n_t
    diff = diffusion or CrankNicolsonDiffusion(kappa, h)
    factors = _reaction_factors(state, rho_field, h, stages)
    traj = np.empty_like(state)
    traj[n_t] = final
    for j in range(n_t - 1, -1, -1):
        traj[j] = diff(factors[j] * diff(traj[j + 1]))
    return traj
