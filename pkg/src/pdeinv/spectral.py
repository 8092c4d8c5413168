"""FFT-based differential operators on periodic grids.

All operators act on real arrays and use the real-to-complex layout of
``scipy.fft.rfftn``. First derivatives drop the Nyquist mode; even-order
operators (Laplacian, Sobolev operators, smoothing) keep it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .grid import field_dims, is_vector, wavenumbers

REG_MODELS = ("H1", "H2", "H1-div")


class SingularOperatorWarning(UserWarning):
    """An inverse was requested on a nonzero mean mode of a singular operator."""


def _fft(f: np.ndarray) -> np.ndarray:
    return sfft.rfftn(f, workers=-1)


def _ifft(fh: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    return sfft.irfftn(fh, s=dims, workers=-1)


def _per_component(v: np.ndarray, fn) -> np.ndarray:
    if is_vector(v):
        return np.stack([fn(c) for c in v])
    return fn(v)


def grad(f: np.ndarray) -> np.ndarray:
    """Spectral gradient of a scalar field, shape ``(d, *dims)``."""
    dims = f.shape
    kw = wavenumbers(dims)
    fh = _fft(f)
    return np.stack([_ifft(1j * k * fh, dims) for k in kw.k_odd])


def div(v: np.ndarray) -> np.ndarray:
    """Spectral divergence of a vector field."""
    dims = field_dims(v)
    kw = wavenumbers(dims)
    acc = np.zeros(kw.spectral_shape, dtype=complex)
    for k, comp in zip(kw.k_odd, v):
        acc += 1j * k * _fft(comp)
    return _ifft(acc, dims)


def laplacian(f: np.ndarray) -> np.ndarray:
    """Spectral Laplacian, applied componentwise to vector fields."""
    def lap(c):
        kw = wavenumbers(c.shape)
        return _ifft(-kw.ksq * _fft(c), c.shape)
    return _per_component(f, lap)


def inv_laplacian(f: np.ndarray) -> np.ndarray:
    """Pseudo-inverse of the Laplacian; the mean mode is set to zero."""
    def ilap(c):
        kw = wavenumbers(c.shape)
        sym = np.zeros_like(kw.ksq)
        nz = kw.ksq > 0
        sym[nz] = -1.0 / kw.ksq[nz]
        return _ifft(sym * _fft(c), c.shape)
    return _per_component(f, ilap)


def leray_project(v: np.ndarray) -> np.ndarray:
    """Project onto divergence-free fields, K = I - grad inv_lap div.

    Uses the same (Nyquist-free) symbols as :func:`grad` and :func:`div`, so
    ``div(leray_project(v))`` vanishes to rounding. Modes without a
    first-derivative symbol, including the mean, pass through unchanged.
    """
    dims = field_dims(v)
    kw = wavenumbers(dims)
    vh = [_fft(c) for c in v]
    kdotv = sum(k * c for k, c in zip(kw.k_odd, vh))
    scale = np.zeros_like(kw.ksq_odd)
    nz = kw.ksq_odd > 0
    scale[nz] = 1.0 / kw.ksq_odd[nz]
    kdotv = kdotv * scale
    return np.stack([_ifft(c - k * kdotv, dims) for k, c in zip(kw.k_odd, vh)])


def gaussian_smooth(f: np.ndarray, sigma_cells: float = 1.0) -> np.ndarray:
    """Gaussian smoothing with standard deviation ``sigma_cells`` voxels per axis."""
    def smooth(c):
        kw = wavenumbers(c.shape)
        expo = sum((sigma_cells * 2.0 * np.pi / n * k) ** 2 for n, k in zip(c.shape, kw.k))
        return _ifft(np.exp(-0.5 * expo) * _fft(c), c.shape)
    return _per_component(f, smooth)


@dataclass(frozen=True)
class RegularizationConfig:
    """Sobolev regularization ``R[v] = 1/2 <A v, v>`` with ``A = (-lap + gamma)^p``.

    The exponent ``p`` is 1 for ``H1`` and ``H1-div`` and ``2 * kappa`` for
    ``H2``. ``H1-div`` adds ``div_penalty / 2 * ||div v||^2`` to the objective.
    """

    model: str = "H2"
    beta: float = 1e-2
    gamma: float = 1.0
    kappa: int = 1
    div_penalty: float = 0.0

    def __post_init__(self) -> None:
        if self.model not in REG_MODELS:
            raise ValueError(f"unknown regularization model {self.model!r}; expected one of {REG_MODELS}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if int(self.kappa) != self.kappa or self.kappa < 1:
            raise ValueError("kappa must be a positive integer")
        if self.div_penalty < 0:
            raise ValueError("div_penalty must be nonnegative")

    @property
    def exponent(self) -> int:
        return 2 * int(self.kappa) if self.model == "H2" else 1

    def with_beta(self, beta: float) -> "RegularizationConfig":
        return RegularizationConfig(self.model, beta, self.gamma, self.kappa, self.div_penalty)


def regop_symbol(dims: tuple[int, ...], cfg: RegularizationConfig) -> np.ndarray:
    kw = wavenumbers(dims)
    return (kw.ksq + cfg.gamma) ** cfg.exponent


def apply_regop(v: np.ndarray, cfg: RegularizationConfig) -> np.ndarray:
    """Apply ``A`` componentwise (no ``beta`` factor)."""
    def a(c):
        return _ifft(regop_symbol(c.shape, cfg) * _fft(c), c.shape)
    return _per_component(v, a)


def inv_regop(v: np.ndarray, cfg: RegularizationConfig) -> np.ndarray:
    """Apply ``A^{-1}`` componentwise.

    With ``gamma == 0`` the mean mode is nulled; a
    :class:`SingularOperatorWarning` is issued if it was nonzero.
    """
    def ainv(c):
        sym = regop_symbol(c.shape, cfg)
        ch = _fft(c)
        inv = np.zeros_like(sym)
        nz = sym > 0
        inv[nz] = 1.0 / sym[nz]
        if not nz.flat[0] and abs(ch.flat[0]) > 1e-12 * max(1.0, float(np.abs(ch).max())):
            warnings.warn("A is singular at gamma=0; nulling the mean mode", SingularOperatorWarning,
                          stacklevel=3)
        return _ifft(inv * ch, c.shape)
    return _per_component(v, ainv)


def apply_full_regop(v: np.ndarray, cfg: RegularizationConfig) -> np.ndarray:
    """Gradient of ``beta R[v] + div_penalty/2 ||div v||^2``: ``beta A v - div_penalty grad div v``."""
    out = cfg.beta * apply_regop(v, cfg)
    if cfg.div_penalty > 0:
        out -= cfg.div_penalty * grad(div(v))
    return out


def inv_full_regop(v: np.ndarray, cfg: RegularizationConfig) -> np.ndarray:
    """Inverse of :func:`apply_full_regop` (Sherman-Morrison per Fourier mode)."""
    if cfg.div_penalty == 0:
        return inv_regop(v, cfg) / cfg.beta
    dims = field_dims(v)
    kw = wavenumbers(dims)
    a = cfg.beta * regop_symbol(dims, cfg)
    vh = [_fft(c) for c in v]
    kdotv = sum(k * c for k, c in zip(kw.k_odd, vh))
    with np.errstate(divide="ignore", invalid="ignore"):
        ia = np.where(a > 0, 1.0 / a, 0.0)
        coef = np.where(a > 0, cfg.div_penalty / (a * (a + cfg.div_penalty * kw.ksq_odd)), 0.0)
    return np.stack([_ifft(ia * c - coef * k * kdotv, dims) for k, c in zip(kw.k_odd, vh)])
