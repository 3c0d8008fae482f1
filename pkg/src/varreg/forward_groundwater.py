"""Forward model of the 1-D groundwater filtration problem.

``F(a) = u`` solves ``-(a u')' = f`` on ``(0, 1)`` with ``u(0) = u(1) = 0``.
``F_m`` is its Galerkin approximation with linear splines on ``m`` uniform
intervals; the exact map is replaced by ``F_{m_ref}`` with ``m_ref = 2**14``.

The diffusion coefficient ``a`` is piecewise constant on ``n`` uniform
cells. Stiffness integrals are computed exactly on the overlay of the
parameter cells and the FEM intervals.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from typing import Callable, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import ConstraintError, DomainError, SolverError
from .mesh_fields import GAUSS_POINTS, ParallelepipedMesh, PiecewiseConstantField, composite_gauss

M_REF = 2**14


@dataclass(frozen=True)
class DiffusionProblem:
    """Load ``f`` and the admissibility bound ``a >= c_lower``.

    ``f`` is a constant, a list of polynomial coefficients ``[c0, c1, ...]``
    in ``x``, or a vectorized callable.
    """

    f: Union[float, Sequence[float], Callable] = 1.0
    c_lower: float = 0.5

    def __post_init__(self):
        if not self.c_lower > 0:
            raise DomainError(f"c_lower must be positive, got {self.c_lower}")
        if isinstance(self.f, (list, np.ndarray)):
            object.__setattr__(self, "f", tuple(float(c) for c in self.f))

    def load(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if callable(self.f):
            return np.asarray(self.f(x), dtype=float)
        if isinstance(self.f, tuple):
            return np.polynomial.polynomial.polyval(x, self.f)
        return np.full_like(x, float(self.f))


@dataclass(frozen=True, eq=False)
class FemSolution:
    """Linear spline on ``m`` uniform intervals vanishing at 0 and 1."""

    m: int
    nodal_values: np.ndarray

    def __post_init__(self):
        v = np.array(self.nodal_values, dtype=float).ravel()
        if len(v) != self.m - 1:
            raise DomainError(f"expected {self.m - 1} interior values, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise SolverError("non-finite nodal values")
        v.flags.writeable = False
        object.__setattr__(self, "nodal_values", v)

    @property
    def full_values(self) -> np.ndarray:
        return np.r_[0.0, self.nodal_values, 0.0]

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.m + 1)

    def evaluate(self, x) -> np.ndarray:
        return np.interp(x, self.nodes, self.full_values)

    def on_grid(self, m_fine: int) -> "FemSolution":
        """Exact representation on a grid refining this one."""
        if m_fine % self.m:
            raise DomainError(f"{m_fine} is not a multiple of {self.m}")
        return FemSolution(m_fine, prolongation(self.m, m_fine) @ self.nodal_values)

    def __add__(self, other):
        a, b = _common(self, other)
        return FemSolution(a.m, a.nodal_values + b.nodal_values)

    def __sub__(self, other):
        a, b = _common(self, other)
        return FemSolution(a.m, a.nodal_values - b.nodal_values)

    def __mul__(self, t):
        return FemSolution(self.m, float(t) * self.nodal_values)

    __rmul__ = __mul__


def _common(u: FemSolution, v: FemSolution):
    L = u.m * v.m // gcd(u.m, v.m)
    return (u if u.m == L else u.on_grid(L)), (v if v.m == L else v.on_grid(L))


@lru_cache(maxsize=128)
def mass_matrix(m: int) -> sp.csr_matrix:
    """L2 Gram matrix of the interior hat functions on ``m`` intervals."""
    h = 1.0 / m
    k = m - 1
    return sp.diags([np.full(k - 1, h / 6), np.full(k, 2 * h / 3), np.full(k - 1, h / 6)],
                    [-1, 0, 1], format="csr")


@lru_cache(maxsize=128)
def prolongation(m: int, m_fine: int) -> sp.csr_matrix:
    """Interior coarse coefficients -> interior fine coefficients (exact embedding)."""
    if m_fine % m:
        raise DomainError(f"{m_fine} is not a multiple of {m}")
    x = np.arange(1, m_fine) / m_fine
    t = x * m
    left = np.floor(t).astype(int)
    frac = t - left
    rows, cols, vals = [], [], []
    fine = np.arange(m_fine - 1)
    for node, wt in ((left, 1.0 - frac), (left + 1, frac)):
        ok = (node >= 1) & (node <= m - 1) & (wt > 0)
        rows.append(fine[ok])
        cols.append(node[ok] - 1)
        vals.append(wt[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m_fine - 1, m - 1))


def cross_load(w: FemSolution, m: int) -> np.ndarray:
    """``g_i = int phi_i^{(m)} w`` for the interior hats of grid ``m``."""
    L = m * w.m // gcd(m, w.m)
    wf = w.nodal_values if w.m == L else prolongation(w.m, L) @ w.nodal_values
    g = mass_matrix(L) @ wf
    return g if m == L else prolongation(m, L).T @ g


def l2_inner(u: FemSolution, v: FemSolution) -> float:
    a, b = _common(u, v)
    return float(a.nodal_values @ (mass_matrix(a.m) @ b.nodal_values))


def l2_norm(u: FemSolution) -> float:
    return float(np.sqrt(max(l2_inner(u, u), 0.0)))


@dataclass(frozen=True, eq=False)
class ObservedData:
    """Noisy data ``y_delta`` with ``||y_delta - y_exact||_L2 = delta``."""

    y_delta: FemSolution
    delta: float
    seed: int
    y_exact: FemSolution

    @property
    def m(self) -> int:
        return self.y_delta.m


# ---------------------------------------------------------------------------
# assembly


def _coeffs(a) -> np.ndarray:
    if isinstance(a, PiecewiseConstantField):
        if not (isinstance(a.mesh, ParallelepipedMesh) and a.mesh.dim == 1):
            raise DomainError("the diffusion coefficient lives on a 1-D parallelepiped mesh")
        return np.ascontiguousarray(a.coeffs, dtype=float)
    return np.ascontiguousarray(np.asarray(a, dtype=float).ravel())


def _check_admissible(a: np.ndarray, problem: DiffusionProblem):
    if not np.all(np.isfinite(a)):
        raise ConstraintError("diffusion coefficient has non-finite values")
    low = float(np.min(a))
    if low < problem.c_lower:
        raise ConstraintError(f"min(a) = {low:g} violates a >= c_lower = {problem.c_lower:g}")


def stiffness_diagonals(a, m: int):
    """``(lower, diag, upper)`` of ``K_ij = int a phi_i' phi_j'`` on interior nodes."""
    abar = kernels.overlap_means(_coeffs(a), m)
    diag = m * (abar[:-1] + abar[1:])
    off = -m * abar[1:-1]
    return off, diag, off


def load_vector(problem: DiffusionProblem, m: int) -> np.ndarray:
    return _load_vector(problem, m)


@lru_cache(maxsize=64)
def _load_vector(problem: DiffusionProblem, m: int) -> np.ndarray:
    if not callable(problem.f) and not isinstance(problem.f, tuple):
        b = np.full(m - 1, float(problem.f) / m)
        b.flags.writeable = False
        return b
    x, w = composite_gauss(np.linspace(0.0, 1.0, m + 1), GAUSS_POINTS)
    fx = problem.load(x) * w
    elem = np.repeat(np.arange(m), GAUSS_POINTS)
    s = x * m - elem  # local coordinate in [0, 1]
    # element e carries phi_e (falling, 1 - s) and phi_{e+1} (rising, s); interior nodes 1..m-1
    b = np.bincount(elem, weights=fx * (1 - s), minlength=m + 1)
    b += np.bincount(elem + 1, weights=fx * s, minlength=m + 1)
    b = b[1:m]
    b.flags.writeable = False
    return b


def _spd_solve(lower, diag, upper, rhs):
    x = kernels.tridiag_solve(np.ascontiguousarray(lower), np.ascontiguousarray(diag),
                              np.ascontiguousarray(upper), np.ascontiguousarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SolverError("singular stiffness system")
    return np.asarray(x)


def assemble_and_solve(a, problem: DiffusionProblem, m: int) -> FemSolution:
    """Galerkin solution ``u_m(a)`` on ``m`` intervals."""
    if m < 2:
        raise DomainError("m must be at least 2")
    coeffs = _coeffs(a)
    _check_admissible(coeffs, problem)
    lo, d, up = stiffness_diagonals(coeffs, m)
    return FemSolution(m, _spd_solve(lo, d, up, load_vector(problem, m)))


def reference_forward(a, problem: DiffusionProblem, m_ref: int = M_REF) -> FemSolution:
    """Surrogate for the exact ``F(a)``."""
    return assemble_and_solve(a, problem, m_ref)


def _apply_stiffness(h, m, u):
    lo, d, up = stiffness_diagonals(h, m)
    out = d * u
    out[:-1] += up * u[1:]
    out[1:] += lo * u[:-1]
    return out


def frechet_apply(a, h, problem: DiffusionProblem, m: int, u: FemSolution = None) -> FemSolution:
    """``F_m'(a) h``: solves ``K(a) w = -K(h) u_m(a)``."""
    coeffs = _coeffs(a)
    if u is None:
        u = assemble_and_solve(coeffs, problem, m)
    hc = _coeffs(h)
    if len(hc) != len(coeffs):
        raise DomainError("perturbation and coefficient must share the parameter mesh")
    rhs = -_apply_stiffness(hc, m, u.nodal_values)
    lo, d, up = stiffness_diagonals(coeffs, m)
    return FemSolution(m, _spd_solve(lo, d, up, rhs))


def _adjoint_from_load(coeffs, g, u: FemSolution, m: int) -> np.ndarray:
    lo, d, up = stiffness_diagonals(coeffs, m)
    z = np.r_[0.0, _spd_solve(lo, d, up, g), 0.0]
    uf = u.full_values
    q = -(np.diff(uf) * np.diff(z)) * (m * m)
    return np.asarray(kernels.overlap_accumulate(np.ascontiguousarray(q), len(coeffs)))


def adjoint_apply(a, w: FemSolution, problem: DiffusionProblem, m: int,
                  u: FemSolution = None) -> np.ndarray:
    """Dual coefficients of ``F_m'(a)^* w``: ``-int_{cell j} u_m' z'`` per cell.

    ``z`` solves ``K(a) z = (int phi_i w)_i``, so that
    ``<F_m'(a) h, w>_L2 = sum_j h_j (F_m'(a)^* w)_j``.
    """
    coeffs = _coeffs(a)
    if u is None:
        u = assemble_and_solve(coeffs, problem, m)
    return _adjoint_from_load(coeffs, cross_load(w, m), u, m)


def make_observed_data(a_true, problem: DiffusionProblem, m: int, delta: float, seed: int,
                       m_ref: int = M_REF) -> ObservedData:
    """Reference data on ``Y_m`` plus seeded nodal noise rescaled to L2 norm ``delta``."""
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    ref = reference_forward(a_true, problem, m_ref)
    x = np.arange(1, m) / m
    y_exact = FemSolution(m, ref.evaluate(x))
    if delta == 0:
        return ObservedData(y_exact, 0.0, int(seed), y_exact)
    rng = np.random.default_rng(seed)
    eta = FemSolution(m, rng.standard_normal(m - 1))
    noise = eta * (delta / l2_norm(eta))
    return ObservedData(y_exact + noise, float(delta), int(seed), y_exact)


@dataclass(frozen=True, eq=False)
class GroundwaterModel:
    """Operator bundle ``(F_m, F_m', F_m'^*)`` at a fixed state resolution."""

    problem: DiffusionProblem
    m: int
    m_ref: int = M_REF

    def forward(self, a) -> FemSolution:
        return assemble_and_solve(a, self.problem, self.m)

    def reference(self, a) -> FemSolution:
        return reference_forward(a, self.problem, self.m_ref)

    def derivative(self, a, h) -> FemSolution:
        return frechet_apply(a, h, self.problem, self.m)

    def adjoint(self, a, w: FemSolution) -> np.ndarray:
        return adjoint_apply(a, w, self.problem, self.m)

    def misfit(self, y: FemSolution) -> "DataMisfit":
        return DataMisfit(self, y)


class DataMisfit:
    """``J(a) = ||F_m(a) - y||^2_L2`` with gradient in dual coefficients."""

    def __init__(self, model: GroundwaterModel, y: FemSolution):
        self.model = model
        self.y = y
        self._g = cross_load(y, model.m)
        self._yy = l2_inner(y, y)
        self._M = mass_matrix(model.m)

    def value(self, a) -> float:
        u = self.model.forward(a).nodal_values
        return float(max(u @ (self._M @ u) - 2 * u @ self._g + self._yy, 0.0))

    def value_and_gradient(self, a):
        coeffs = _coeffs(a)
        m = self.model.m
        sol = self.model.forward(coeffs)
        u = sol.nodal_values
        Mu = self._M @ u
        value = float(max(u @ Mu - 2 * u @ self._g + self._yy, 0.0))
        grad = 2.0 * _adjoint_from_load(coeffs, Mu - self._g, sol, m)
        return value, grad
