"""Pure numpy implementations of the forward-model kernels.

These are the reference versions; ``_ckernels`` must agree with them to
rounding. Grids are uniform on [0, 1]: ``n`` parameter cells and ``m`` FEM
intervals. Breakpoints are compared on the integer scale ``n*m`` so that
coincident cell/interval boundaries are detected exactly.
"""
import numpy as np
from scipy.linalg import solve_banded


def tridiag_solve(lower, diag, upper, rhs):
    """Solve a tridiagonal system given its three diagonals."""
    k = len(diag)
    if k == 0:
        return np.empty(0)
    ab = np.zeros((3, k))
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    return solve_banded((1, 1), ab, np.asarray(rhs, dtype=float))


def _overlay(n, m):
    """Cell index, interval index and length (scaled by n*m) of each overlay piece."""
    cuts = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    left, right = cuts[:-1], cuts[1:]
    return left // m, left // n, right - left


def overlap_means(coeffs, m):
    """Mean of the piecewise-constant function ``coeffs`` over each FEM interval."""
    coeffs = np.asarray(coeffs, dtype=float)
    n = len(coeffs)
    cell, elem, length = _overlay(n, m)
    return np.bincount(elem, weights=coeffs[cell] * length, minlength=m) / n


def overlap_accumulate(q, n):
    """Integral over each parameter cell of the interval-wise constant ``q``."""
    q = np.asarray(q, dtype=float)
    m = len(q)
    cell, elem, length = _overlay(n, m)
    return np.bincount(cell, weights=q[elem] * length, minlength=n) / (n * m)
