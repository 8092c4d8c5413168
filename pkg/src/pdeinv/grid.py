"""Periodic regular grids on [0, 2*pi)^d.

Fields are plain NumPy arrays. A scalar field has shape ``grid.dims``; a
vector field has shape ``(d, *grid.dims)``. Grid dimensions are at least 4,
so a leading axis of length 2 or 3 always marks a vector field.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Grid:
    """Regular periodic grid with ``dims[i]`` points along axis ``i``."""

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got dims={dims}")
        for n in dims:
            if n < 4 or n % 2:
                raise ValueError(f"grid sizes must be even and >= 4, got {dims}")

    @classmethod
    def of(cls, field: np.ndarray) -> "Grid":
        """Grid of a scalar or vector field array."""
        return cls(field_dims(field))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(TWO_PI / n for n in self.dims)

    @property
    def cell_volume(self) -> float:
        """Quadrature weight of the trapezoidal rule on the periodic grid."""
        return float(np.prod(self.spacing))

    @property
    def vector_shape(self) -> tuple[int, ...]:
        return (self.ndim, *self.dims)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(d, *dims)``."""
        axes = [TWO_PI * np.arange(n) / n for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    @cached_property
    def index_coords(self) -> np.ndarray:
        """Node coordinates in index units (exact integers), shape ``(d, *dims)``."""
        axes = [np.arange(n, dtype=float) for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dims)

    def zeros_vector(self) -> np.ndarray:
        return np.zeros(self.vector_shape)

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Discrete L2 inner product (sum over all components)."""
        return float(np.vdot(a, b).real) * self.cell_volume

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))


def field_dims(field: np.ndarray) -> tuple[int, ...]:
    shape = field.shape
    if shape and shape[0] in (2, 3) and len(shape) == shape[0] + 1:
        return tuple(shape[1:])
    return tuple(shape)


def is_vector(field: np.ndarray) -> bool:
    shape = field.shape
    return bool(shape) and shape[0] in (2, 3) and len(shape) == shape[0] + 1


@lru_cache(maxsize=32)
def wavenumbers(dims: tuple[int, ...]) -> "Wavenumbers":
    return Wavenumbers(dims)


class Wavenumbers:
    """Integer wavenumbers laid out for ``rfftn`` over all axes.

    ``k`` holds the full wavenumbers (used by even-order operators), ``k_odd``
    the same with the Nyquist mode zeroed (used by first derivatives).
    """

    def __init__(self, dims: Sequence[int]):
        dims = tuple(dims)
        d = len(dims)
        self.dims = dims
        self.spectral_shape = (*dims[:-1], dims[-1] // 2 + 1)
        k, k_odd = [], []
        for axis, n in enumerate(dims):
            if axis == d - 1:
                ki = np.arange(n // 2 + 1, dtype=float)
            else:
                ki = np.fft.fftfreq(n, d=1.0 / n)
            ko = ki.copy()
            ko[np.abs(ki) == n // 2] = 0.0
            shape = [1] * d
            shape[axis] = ki.size
            k.append(ki.reshape(shape))
            k_odd.append(ko.reshape(shape))
        self.k = k
        self.k_odd = k_odd
        self.ksq = sum(ki**2 for ki in k)
        self.ksq_odd = sum(ki**2 for ki in k_odd)
