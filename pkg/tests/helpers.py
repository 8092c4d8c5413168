"""Shared builders for registration tests."""
import numpy as np

from pdeinv.grid import Grid
from pdeinv.registration import reg_gradient, reg_objective
from pdeinv.transport import solve_state


def low_frequency_field(grid: Grid, rng, components: int | None = None) -> np.ndarray:
    """Random trigonometric polynomial with wavenumbers in {-1, 0, 1} per axis."""
    x = grid.coords
    shifts = np.stack(np.meshgrid(*[[-1, 0, 1]] * grid.ndim, indexing="ij")).reshape(grid.ndim, -1).T
    comps = []
    for _ in range(components or grid.ndim):
        f = np.zeros(grid.dims)
        for k in shifts:
            f += rng.standard_normal() * np.cos(sum(ki * xi for ki, xi in zip(k, x)) + rng.uniform(0, 2 * np.pi))
        comps.append(f / len(shifts))
    return np.stack(comps)


def low_frequency_problem(n: int, seed: int, n_t: int = 4):
    """Band-limited template, a reference warped by a known velocity, and a perturbed start."""
    grid = Grid((n,) * 3)
    rng = np.random.default_rng(seed)
    x = grid.coords
    m_T = (3 + np.sin(x[0]) + np.cos(x[1]) + np.sin(x[2] + 0.5)) / 6
    v_star = 0.3 * low_frequency_field(grid, rng)
    m_R = solve_state(m_T, v_star, n_t)[-1]
    v = 0.5 * v_star + 0.1 * low_frequency_field(grid, rng)
    direction = low_frequency_field(grid, rng)
    return m_T, m_R, v_star, v, direction


def taylor_slope(prob, v, direction, eps=(1e-1, 1e-2, 1e-3)):
    """Log-log slope of the first-order Taylor remainder of the objective."""
    eps = np.asarray(eps)
    j0 = reg_objective(prob, v).objective
    dj = prob.grid.inner(reg_gradient(prob, v), direction)
    rem = [abs(reg_objective(prob, v + e * direction).objective - j0 - e * dj) for e in eps]
    return float(np.polyfit(np.log(eps), np.log(rem), 1)[0]), rem
