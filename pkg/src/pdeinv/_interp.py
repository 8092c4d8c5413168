"""Periodic cubic Lagrange interpolation kernels (2D bicubic, 3D tricubic).

Query points are given in index units: ``q = x / h``. The four-point stencil
``floor(q) - 1 .. floor(q) + 2`` wraps periodically, so integral queries
reproduce the nodal values exactly. The scatter kernels apply the exact
transpose of the interpolation matrix.
"""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _weights(s):
    sm1 = s - 1.0
    sm2 = s - 2.0
    sp1 = s + 1.0
    return (-s * sm1 * sm2 / 6.0,
            sp1 * sm1 * sm2 / 2.0,
            -sp1 * s * sm2 / 2.0,
            sp1 * s * sm1 / 6.0)


@njit(cache=True)
def _interp2(f, q0, q1, out):
    n0, n1 = f.shape
    for p in range(q0.size):
        a = np.floor(q0[p])
        b = np.floor(q1[p])
        w0 = _weights(q0[p] - a)
        w1 = _weights(q1[p] - b)
        i0 = int(a) % n0
        j0 = int(b) % n1
        acc = 0.0
        for i in range(4):
            ii = (i0 - 1 + i) % n0
            row = 0.0
            for j in range(4):
                row += w1[j] * f[ii, (j0 - 1 + j) % n1]
            acc += w0[i] * row
        out[p] = acc


@njit(cache=True)
def _interp3(f, q0, q1, q2, out):
    n0, n1, n2 = f.shape
    for p in range(q0.size):
        a = np.floor(q0[p])
        b = np.floor(q1[p])
        c = np.floor(q2[p])
        w0 = _weights(q0[p] - a)
        w1 = _weights(q1[p] - b)
        w2 = _weights(q2[p] - c)
        i0 = int(a) % n0
        j0 = int(b) % n1
        k0 = int(c) % n2
        kk0 = (k0 - 1) % n2
        kk1 = k0
        kk2 = (k0 + 1) % n2
        kk3 = (k0 + 2) % n2
        acc = 0.0
        for i in range(4):
            ii = (i0 - 1 + i) % n0
            plane = 0.0
            for j in range(4):
                jj = (j0 - 1 + j) % n1
                line = (w2[0] * f[ii, jj, kk0] + w2[1] * f[ii, jj, kk1]
                        + w2[2] * f[ii, jj, kk2] + w2[3] * f[ii, jj, kk3])
                plane += w1[j] * line
            acc += w0[i] * plane
        out[p] = acc


@njit(cache=True)
def _scatter2(g, q0, q1, out):
    n0, n1 = out.shape
    for p in range(q0.size):
        a = np.floor(q0[p])
        b = np.floor(q1[p])
        w0 = _weights(q0[p] - a)
        w1 = _weights(q1[p] - b)
        i0 = int(a) % n0
        j0 = int(b) % n1
        val = g[p]
        for i in range(4):
            ii = (i0 - 1 + i) % n0
            for j in range(4):
                out[ii, (j0 - 1 + j) % n1] += w0[i] * w1[j] * val


@njit(cache=True)
def _scatter3(g, q0, q1, q2, out):
    n0, n1, n2 = out.shape
    for p in range(q0.size):
        a = np.floor(q0[p])
        b = np.floor(q1[p])
        c = np.floor(q2[p])
        w0 = _weights(q0[p] - a)
        w1 = _weights(q1[p] - b)
        w2 = _weights(q2[p] - c)
        i0 = int(a) % n0
        j0 = int(b) % n1
        k0 = int(c) % n2
        val = g[p]
        for i in range(4):
            ii = (i0 - 1 + i) % n0
            for j in range(4):
                jj = (j0 - 1 + j) % n1
                wij = w0[i] * w1[j] * val
                for k in range(4):
                    out[ii, jj, (k0 - 1 + k) % n2] += wij * w2[k]


def interp_index(f: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Interpolate ``f`` at index-unit points ``q`` of shape ``(d, *pts_shape)``."""
    f = np.ascontiguousarray(f, dtype=np.float64)
    pts_shape = q.shape[1:]
    flat = [np.ascontiguousarray(qi, dtype=np.float64).ravel() for qi in q]
    out = np.empty(flat[0].size)
    if f.ndim == 2:
        _interp2(f, flat[0], flat[1], out)
    elif f.ndim == 3:
        _interp3(f, flat[0], flat[1], flat[2], out)
    else:
        raise ValueError("interpolation supports 2D and 3D fields only")
    return out.reshape(pts_shape)


def scatter_index(g: np.ndarray, q: np.ndarray, dims) -> np.ndarray:
    """Transpose of :func:`interp_index`: spread values ``g`` at points ``q`` onto a grid of ``dims``."""
    flat = [np.ascontiguousarray(qi, dtype=np.float64).ravel() for qi in q]
    vals = np.ascontiguousarray(g, dtype=np.float64).ravel()
    out = np.zeros(tuple(dims))
    if len(dims) == 2:
        _scatter2(vals, flat[0], flat[1], out)
    elif len(dims) == 3:
        _scatter3(vals, flat[0], flat[1], flat[2], out)
    else:
        raise ValueError("interpolation supports 2D and 3D fields only")
    return out
