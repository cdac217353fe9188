"""Dense-array primitives: layout ops, pivoted solves, the finite-difference
Jacobian oracle, and bilinear upsampling.

Activations and maps are plain float64 ``numpy.ndarray`` values in row-major
(channel-first) layout; 32-bit precision exists only on disk. All functions
here are pure.
"""
from __future__ import annotations

import warnings
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NonFinite, SingularMatrix

# Relative pivot magnitude below which a matrix is reported singular.
PIVOT_RTOL = 1e-10


def flatten(t: np.ndarray) -> np.ndarray:
    """Row-major flattening; exact inverse of ``reshape`` back to t.shape."""
    return np.ascontiguousarray(t, dtype=np.float64).reshape(-1)


def check_finite(t: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFinite(f"non-finite values in {context}")
    return t


def lu_factor(a: np.ndarray):
    """Partial-pivoting LU of a square matrix.

    Raises SingularMatrix when any pivot magnitude falls below
    PIVOT_RTOL * max|a|.
    """
    a = np.asarray(a, dtype=np.float64)
    n, m = a.shape
    if n != m:
        raise ValueError(f"lu_factor expects a square matrix, got {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if scale == 0.0 or np.any(pivots < PIVOT_RTOL * scale):
        raise SingularMatrix(
            f"pivot below {PIVOT_RTOL:g} * max|a| in {n}x{n} factorization"
        )
    return lu, piv


def lu_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b with partial pivoting."""
    b = np.asarray(b, dtype=np.float64)
    factors = lu_factor(a)
    x = scipy.linalg.lu_solve(factors, b, check_finite=False)
    return check_finite(x, "lu_solve result")


def fd_jacobian(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    h: float = 1e-3,
) -> np.ndarray:
    """Central-difference Jacobian J[i, j] = (f(x + h e_j) - f(x - h e_j))_i / 2h.

    Exact (to rounding) for affine maps; the independent oracle for every
    analytically assembled Jacobian in the engine.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        hi = np.asarray(f(x + e), dtype=np.float64).reshape(-1)
        lo = np.asarray(f(x - e), dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise NonFinite("f returned NaN/Inf during finite differencing")
        cols.append((hi - lo) / (2.0 * h))
    return np.stack(cols, axis=1)


def bilinear_upsample(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resampling of a rank-2 map.

    Source coordinate = dst_index * (src_extent - 1) / (dst_extent - 1);
    single-pixel extents broadcast.
    """
    m = np.asarray(m, dtype=np.float64)
    src_h, src_w = m.shape

    def axis_coords(src: int, dst: int) -> np.ndarray:
        if dst == 1 or src == 1:
            return np.zeros(dst)
        return np.arange(dst) * (src - 1) / (dst - 1)

    ys = axis_coords(src_h, out_h)
    xs = axis_coords(src_w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, src_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = m[np.ix_(y0, x0)] * (1 - wx) + m[np.ix_(y0, x1)] * wx
    bot = m[np.ix_(y1, x0)] * (1 - wx) + m[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy
