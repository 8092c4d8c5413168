"""Reduced-space Gauss-Newton-Krylov solvers for PDE-constrained inverse problems.

Two problems share one optimizer: diffeomorphic image registration under a
transport constraint, and tumor-growth data assimilation under a
reaction-diffusion constraint. Both live on periodic grids over ``[0, 2pi)^d``.
"""
from .grid import Grid
from .optimizer import ConvergenceLog, OptimizationProblem, SolverOptions, gauss_newton_solve
from .spectral import RegularizationConfig

__all__ = ["Grid", "ConvergenceLog", "OptimizationProblem", "SolverOptions",
           "gauss_newton_solve", "RegularizationConfig"]
__version__ = "0.1.0"
