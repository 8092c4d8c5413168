"""Semi-Lagrangian solvers for the transport equations of registration.

The velocity is stationary, so a single characteristic map per direction is
traced (two-stage RK2) and reused in every time step. Trajectories are arrays
of shape ``(n_t + 1, *dims)`` indexed by time node ``t_j = j / n_t``.
"""
from __future__ import annotations

import numpy as np

from . import spectral
from ._interp import interp_index, scatter_index
from .grid import TWO_PI, Grid

DEFAULT_NT = 4


class CharacteristicMap:
    """Departure points of one semi-Lagrangian step.

    Stored as a displacement ``y - x`` so that a zero displacement gives
    integral query indices and nodal-exact interpolation.
    """

    def __init__(self, grid: Grid, displacement: np.ndarray):
        self.grid = grid
        self.displacement = displacement
        h = np.array(grid.spacing).reshape((-1,) + (1,) * grid.ndim)
        self._query = grid.index_coords + displacement / h

    @property
    def departure_points(self) -> np.ndarray:
        return np.mod(self.grid.coords + self.displacement, TWO_PI)

    def interpolate(self, f: np.ndarray) -> np.ndarray:
        if f.ndim == self.grid.ndim + 1:
            return np.stack([interp_index(c, self._query) for c in f])
        return interp_index(f, self._query)

    def interpolate_transpose(self, g: np.ndarray) -> np.ndarray:
        """Apply the transpose of :meth:`interpolate` to a scalar field."""
        return scatter_index(g, self._query, self.grid.dims)


def interpolate_cubic(f: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Periodic cubic Lagrange interpolation of ``f`` at physical points ``pts`` (shape ``(d, ...)``)."""
    grid = Grid(f.shape)
    h = np.array(grid.spacing).reshape((-1,) + (1,) * (pts.ndim - 1))
    return interp_index(f, np.asarray(pts, dtype=float) / h)


def trace_characteristics(v: np.ndarray, h_t: float) -> CharacteristicMap:
    """Heun departure points ``y = x - h_t/2 (v(x - h_t v) + v)`` for one step."""
    if not h_t > 0:
        raise ValueError("time step must be positive")
    grid = Grid.of(v)
    euler = CharacteristicMap(grid, -h_t * v)
    v_dep = euler.interpolate(v)
    return CharacteristicMap(grid, -0.5 * h_t * (v_dep + v))


class TransportOperators:
    """Characteristic maps and ``div v`` for one stationary velocity, cached for reuse."""

    def __init__(self, v: np.ndarray, n_t: int = DEFAULT_NT):
        if n_t < 1:
            raise ValueError("n_t must be >= 1")
        self.v = v
        self.n_t = int(n_t)
        self.h_t = 1.0 / self.n_t
        self.grid = Grid.of(v)
        self._forward = None
        self._backward = None
        self._divv = None
        self._divv_back = None
        self._divv_fwd = None

    @property
    def forward(self) -> CharacteristicMap:
        if self._forward is None:
            self._forward = trace_characteristics(self.v, self.h_t)
        return self._forward

    @property
    def backward(self) -> CharacteristicMap:
        if self._backward is None:
            self._backward = trace_characteristics(-self.v, self.h_t)
        return self._backward

    @property
    def divv(self) -> np.ndarray:
        if self._divv is None:
            self._divv = spectral.div(self.v)
        return self._divv

    @property
    def divv_at_backward(self) -> np.ndarray:
        if self._divv_back is None:
            self._divv_back = self.backward.interpolate(self.divv)
        return self._divv_back

    @property
    def divv_at_forward(self) -> np.ndarray:
        if self._divv_fwd is None:
            self._divv_fwd = self.forward.interpolate(self.divv)
        return self._divv_fwd


def _ops(v, n_t, ops):
    if ops is None:
        return TransportOperators(v, n_t)
    if ops.n_t != n_t:
        raise ValueError("cached transport operators use a different n_t")
    return ops


def solve_state(m_T: np.ndarray, v: np.ndarray, n_t: int = DEFAULT_NT,
                ops: TransportOperators | None = None) -> np.ndarray:
    """Solve ``dm/dt + v . grad m = 0``, ``m(0) = m_T`` forward in time."""
    ops = _ops(v, n_t, ops)
    traj = np.empty((n_t + 1, *m_T.shape))
    traj[0] = m_T
    for j in range(n_t):
        traj[j + 1] = ops.forward.interpolate(traj[j])
    return traj


def solve_adjoint(residual: np.ndarray, v: np.ndarray, n_t: int = DEFAULT_NT,
                  ops: TransportOperators | None = None) -> np.ndarray:
    """Solve ``-dl/dt - div(v l) = 0``, ``l(1) = residual`` backward in time.

    In reversed time this is transport with ``-v`` and source ``l div v``;
    the source is integrated along the characteristic with Heun's rule.
    """
    ops = _ops(v, n_t, ops)
    h = ops.h_t
    traj = np.empty((n_t + 1, *residual.shape))
    traj[n_t] = residual
    div_arr = ops.divv
    div_dep = ops.divv_at_backward
    for j in range(n_t, 0, -1):
        lam_dep = ops.backward.interpolate(traj[j])
        src_dep = lam_dep * div_dep
        lam_pred = lam_dep + h * src_dep
        traj[j - 1] = lam_dep + 0.5 * h * (src_dep + lam_pred * div_arr)
    return traj


def solve_incremental_state(vtilde: np.ndarray, state: np.ndarray, v: np.ndarray,
                            ops: TransportOperators | None = None,
                            state_grad: np.ndarray | None = None) -> np.ndarray:
    """Solve ``dmt/dt + v . grad mt = -grad m . vt``, ``mt(0) = 0``.

    ``state_grad`` optionally holds precomputed gradients of every state frame,
    shape ``(n_t + 1, d, *dims)``. The source is integrated with the
    trapezoidal rule along characteristics.
    """
    n_t = state.shape[0] - 1
    ops = _ops(v, n_t, ops)
    h = ops.h_t
    if state_grad is None:
        state_grad = np.stack([spectral.grad(m) for m in state])
    traj = np.zeros_like(state)
    src_prev = -np.einsum("i...,i...->...", state_grad[0], vtilde)
    for j in range(n_t):
        src_next = -np.einsum("i...,i...->...", state_grad[j + 1], vtilde)
        traj[j + 1] = ops.forward.interpolate(traj[j] + 0.5 * h * src_prev) + 0.5 * h * src_next
        src_prev = src_next
    return traj


def solve_incremental_adjoint_gn(mtilde_final: np.ndarray, v: np.ndarray, n_t: int = DEFAULT_NT,
                                 ops: TransportOperators | None = None) -> np.ndarray:
    """Gauss-Newton incremental adjoint with final condition ``-mt(1)``.

    Each backward step applies the transpose of the forward interpolation, a
    mass-conserving discretization of ``-dl/dt - div(v l) = 0``. Paired with
    :func:`solve_incremental_state` this makes the Gauss-Newton Hessian an
    exactly symmetric positive semidefinite matrix.
    """
    ops = _ops(v, n_t, ops)
    traj = np.empty((n_t + 1, *mtilde_final.shape))
    traj[n_t] = -mtilde_final
    for j in range(n_t, 0, -1):
        traj[j - 1] = ops.forward.interpolate_transpose(traj[j])
    return traj


def detgrad_transport(v: np.ndarray, n_t: int = DEFAULT_NT,
                      ops: TransportOperators | None = None) -> np.ndarray:
    """Determinant of the deformation gradient at ``t = 1``.

    Solves ``dpsi/dt + v . grad psi = psi div v``, ``psi(0) = 1`` with an
    exponential update so that ``psi`` stays positive.
    """
    ops = _ops(v, n_t, ops)
    grid = ops.grid
    psi = np.ones(grid.dims)
    growth = np.exp(0.5 * ops.h_t * (ops.divv_at_forward + ops.divv))
    for _ in range(n_t):
        psi = ops.forward.interpolate(psi) * growth
    return psi
