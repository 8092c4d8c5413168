"""Deterministic synthetic inputs for the registration and tumor problems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .grid import Grid
from .transport import solve_state

FIXTURES = ("sphere_bowl", "smooth_synthetic", "multifocal_tumor", "checker")

SPHERE_RADIUS = 1.2
BOWL_RADIUS = 1.6
BOWL_CAVITY_RADIUS = 1.3
BOWL_CAVITY_OFFSET = 0.9


@dataclass
class Fixture:
    """Named arrays produced by :func:`make_fixture`.

    ``fields`` holds grid-shaped arrays (images, velocities, tissue maps,
    observations); ``params`` holds scalars and small vectors.
    """

    name: str
    fields: dict[str, np.ndarray] = field(default_factory=dict)
    params: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key):
        if key in self.fields:
            return self.fields[key]
        return self.params[key]


def ball_indicator(grid: Grid, center, radius: float) -> np.ndarray:
    dist2 = sum((x - c) ** 2 for x, c in zip(grid.coords, center))
    return (dist2 <= radius ** 2).astype(float)


def smooth_synthetic_template(grid: Grid) -> np.ndarray:
    return sum(np.sin(x) ** 2 for x in grid.coords) / grid.ndim


def smooth_synthetic_velocity(grid: Grid) -> np.ndarray:
    if grid.ndim != 3:
        raise ValueError("the smooth synthetic velocity is defined in 3D")
    x1, x2, x3 = grid.coords
    return 0.5 * np.stack([np.sin(x3) * np.cos(x2) * np.sin(x2),
                           np.sin(x1) * np.cos(x3) * np.sin(x3),
                           np.sin(x2) * np.cos(x1) * np.sin(x1)])


def _smooth_sharp(f: np.ndarray) -> np.ndarray:
    return np.clip(spectral.gaussian_smooth(f, 1.0), 0.0, 1.0)


def sphere_bowl(grid: Grid) -> Fixture:
    """Ball template and bowl reference (a ball with an off-center cavity), smoothed by one voxel."""
    c = np.full(grid.ndim, np.pi)
    sphere = ball_indicator(grid, c, SPHERE_RADIUS)
    shift = np.zeros(grid.ndim)
    shift[-1] = BOWL_CAVITY_OFFSET
    bowl = ball_indicator(grid, c, BOWL_RADIUS) * (1 - ball_indicator(grid, c + shift, BOWL_CAVITY_RADIUS))
    return Fixture("sphere_bowl", {"m_T": _smooth_sharp(sphere), "m_R": _smooth_sharp(bowl)})


def smooth_synthetic(grid: Grid, n_t: int = 4) -> Fixture:
    """Smooth template, known velocity, and the reference obtained by transporting the template."""
    m_T = smooth_synthetic_template(grid)
    v_true = smooth_synthetic_velocity(grid)
    m_R = solve_state(m_T, v_true, n_t)[-1]
    return Fixture("smooth_synthetic", {"m_T": m_T, "m_R": m_R, "v_true": v_true})


def checker(grid: Grid, seed: int = 0, squares: int = 4) -> Fixture:
    """Smoothed checkerboard template and a randomly warped reference."""
    parity = sum(np.floor(x * squares / (2 * np.pi)) for x in grid.coords) % 2
    m_T = _smooth_sharp(parity)
    rng = np.random.default_rng(seed)
    amp = 0.3 * rng.uniform(-1, 1, size=(grid.ndim, grid.ndim))
    phase = rng.uniform(0, 2 * np.pi, size=grid.ndim)
    v = np.stack([sum(amp[i, j] * np.sin(x + phase[j]) for j, x in enumerate(grid.coords) if j != i)
                  for i in range(grid.ndim)])
    m_R = solve_state(m_T, v, 4)[-1]
    return Fixture("checker", {"m_T": m_T, "m_R": m_R, "v_true": v})


def make_fixture(name: str, dims, seed: int = 0) -> Fixture:
    """Build a named fixture on a grid of shape ``dims``."""
    grid = Grid(tuple(dims))
    if name == "sphere_bowl":
        return sphere_bowl(grid)
    if name == "smooth_synthetic":
        return smooth_synthetic(grid)
    if name == "checker":
        return checker(grid, seed)
    if name == "multifocal_tumor":
        from .tumor import multifocal_tumor
        return multifocal_tumor(grid, seed)
    raise ValueError(f"unknown fixture {name!r}; expected one of {FIXTURES}")
