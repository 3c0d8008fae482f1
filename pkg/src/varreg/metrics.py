"""Strict-convergence pseudometrics and Bregman distances.

``d(u, v) = ||u - v||_Z + |R(u) - R(v)|`` where ``Z`` is ``L^1`` (BV, BD) or
``L^p`` (sup-norm regularization).  Piecewise-constant fields of different
resolutions are compared exactly on their least common refinement.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, PreconditionError
from .forward_groundwater import GroundwaterModel, FemSolution, l2_norm
from .mesh_fields import (GAUSS_POINTS, NodalSplineField, ParallelepipedMesh,
                          PiecewiseConstantField, TriangulationMesh)
from .regularizers import RegularizerSpec, SubgradientElement, coefficient_vector, evaluate


@dataclass(frozen=True)
class StrictMetricSpec:
    """``p = 1`` is the ``L^1`` metric; ``p > 1`` the ``L^p`` variant."""

    reg: RegularizerSpec
    p: float = 1.0

    def __post_init__(self):
        if not 1.0 <= self.p < math.inf:
            raise DomainError(f"p must lie in [1, inf), got {self.p}")
        if self.reg.smoothing_eps != 0:
            object.__setattr__(self, "reg", self.reg.with_eps(0.0))


def refine(field: PiecewiseConstantField, n: int) -> PiecewiseConstantField:
    """Exact re-expansion of a grid field on ``n`` cells per axis (``field.mesh.n | n``)."""
    mesh = field.mesh
    if n % mesh.n:
        raise DomainError(f"{n} does not refine {mesh.n}")
    r = n // mesh.n
    c = field.coeffs.reshape(mesh.cell_shape)
    for axis in range(mesh.dim):
        c = np.repeat(c, r, axis=axis)
    return PiecewiseConstantField(ParallelepipedMesh(mesh.dim, n), c.ravel())


def common_refinement(u: PiecewiseConstantField, v: PiecewiseConstantField):
    if u.mesh.dim != v.mesh.dim:
        raise DomainError("fields live in different dimensions")
    L = math.lcm(u.mesh.n, v.mesh.n)
    return refine(u, L), refine(v, L)


def _pc_distance(u, v, p):
    if isinstance(u.mesh, TriangulationMesh) or isinstance(v.mesh, TriangulationMesh):
        same = u.mesh is v.mesh or (
            isinstance(u.mesh, TriangulationMesh) and isinstance(v.mesh, TriangulationMesh)
            and u.mesh.triangles.shape == v.mesh.triangles.shape
            and np.array_equal(u.mesh.vertices, v.mesh.vertices)
            and np.array_equal(u.mesh.triangles, v.mesh.triangles))
        if not same:
            raise DomainError("triangulated fields must share their triangulation")
        diff, vol = u.coeffs - v.coeffs, np.asarray(u.mesh.areas)
    else:
        ur, vr = common_refinement(u, v)
        diff, vol = ur.coeffs - vr.coeffs, ur.mesh.cell_volume
    return float(np.sum(np.abs(diff) ** p * vol) ** (1.0 / p))


def _nodal_distance(u: NodalSplineField, v: NodalSplineField, p):
    if u.mesh.dim != v.mesh.dim or u.components != v.components:
        raise DomainError("nodal fields differ in dimension or components")
    mesh = ParallelepipedMesh(u.mesh.dim, math.lcm(u.mesh.n, v.mesh.n))
    x, w = mesh.quadrature(GAUSS_POINTS)
    d = np.linalg.norm(u.evaluate(x) - v.evaluate(x), axis=1)
    return float(np.sum(w * d**p) ** (1.0 / p))


def lp_distance(u, v, p: float = 1.0) -> float:
    """``||u - v||_{L^p}``; the pointwise vector norm is Euclidean."""
    if isinstance(u, NodalSplineField) and isinstance(v, NodalSplineField):
        return _nodal_distance(u, v, p)
    if isinstance(u, PiecewiseConstantField) and isinstance(v, PiecewiseConstantField):
        return _pc_distance(u, v, p)
    raise DomainError("cannot compare fields of different kinds")


def lp_distance_to_function(field, f, p: float = 1.0, points: int = GAUSS_POINTS) -> float:
    """``||field - f||_{L^p}`` by per-cell Gauss quadrature on the field's mesh.

    ``f`` is a vectorized callable returning ``(P,)`` for scalar fields and
    ``(P, components)`` for nodal vector fields.
    """
    x, w = field.mesh.quadrature(points)
    if isinstance(field, NodalSplineField):
        fx = np.asarray(f(x), dtype=float).reshape(len(x), field.components)
        d = np.linalg.norm(field.evaluate(x) - fx, axis=1)
    else:
        cells = np.repeat(np.arange(field.mesh.n_cells), len(x) // field.mesh.n_cells)
        d = np.abs(field.coeffs[cells] - np.asarray(f(x), dtype=float).reshape(-1))
    return float(np.sum(w * d**p) ** (1.0 / p))


def strict_metric(spec: StrictMetricSpec, u, v) -> float:
    """``||u - v||_Z + |R(u) - R(v)|`` with the exact (unsmoothed) penalty."""
    return lp_distance(u, v, spec.p) + abs(evaluate(spec.reg, u) - evaluate(spec.reg, v))


def strict_distance_to_function(spec: StrictMetricSpec, field, f, reg_of_f: float,
                                points: int = GAUSS_POINTS) -> float:
    """``d(field, f)`` for a target given as a callable with known ``R(f)``."""
    return lp_distance_to_function(field, f, spec.p, points) + abs(evaluate(spec.reg, field) - reg_of_f)


def _same_field(a, b) -> bool:
    if a is b:
        return True
    return (type(a) is type(b) and a.mesh == b.mesh
            and np.array_equal(coefficient_vector(a), coefficient_vector(b)))


def pairing(xi, v) -> float:
    """``<xi, v>`` in coefficient space."""
    xi = np.asarray(getattr(xi, "coeffs", xi), dtype=float)
    c = coefficient_vector(v) if hasattr(v, "coeffs") else np.asarray(v, dtype=float).ravel()
    if xi.size != c.size:
        raise DomainError("dual and primal coefficient counts differ")
    return float(xi @ c)


def bregman_distance(reg: RegularizerSpec, v, u, xi: SubgradientElement) -> float:
    """``D_R^xi(v, u) = R(v) - R(u) - <xi, v - u>`` (exact penalty)."""
    if not _same_field(xi.at_field, u):
        raise DomainError("the subgradient was not taken at u")
    reg = reg.with_eps(0.0)
    dv = coefficient_vector(v) - coefficient_vector(u)
    return evaluate(reg, v) - evaluate(reg, u) - pairing(xi, dv)


@dataclass
class RateQuantities:
    gamma_n: float
    lambda_n: float
    beta_n: float
    zeta_n: float
    rho_m: float
    delta: float
    c_nonlin: float
    omega_norm: float

    def as_row(self, **extra) -> dict:
        row = dict(extra)
        row.update(asdict(self))
        return row


RATE_CSV_COLUMNS = ("delta", "rho_m", "n", "m", "alpha", "gamma_n", "lambda_n",
                    "beta_n", "zeta_n", "bregman", "strict_d")


def _as_1d_pair(u_bar: PiecewiseConstantField, v_n: PiecewiseConstantField):
    if u_bar.mesh == v_n.mesh:
        return u_bar, v_n
    return common_refinement(u_bar, v_n)


def compute_rate_quantities(model: GroundwaterModel, u_bar: PiecewiseConstantField,
                            v_n: PiecewiseConstantField, omega: FemSolution,
                            reg: RegularizerSpec, xi: SubgradientElement, delta: float,
                            rho_m: float, c_nonlin: float,
                            solution: Optional[PiecewiseConstantField] = None,
                            y_exact: Optional[FemSolution] = None) -> RateQuantities:
    """``gamma_n = ||F'(u_bar)(v_n - u_bar)||``, ``lambda_n = D_R(v_n, u_bar)``, ``beta_n``.

    ``zeta_n = ||F_m(solution) - y||`` is filled in when both ``solution``
    and ``y_exact`` are given, NaN otherwise.
    """
    omega_norm = l2_norm(omega) if omega is not None else 0.0
    if c_nonlin * omega_norm >= 1.0:
        raise PreconditionError(
            f"source condition needs c*||omega|| < 1, got {c_nonlin * omega_norm:g}")
    ub, vn = _as_1d_pair(u_bar, v_n)
    if ub is not u_bar and not _same_field(xi.at_field, u_bar):
        raise DomainError("the subgradient was not taken at u_bar")
    diff = vn.coeffs - ub.coeffs
    if np.any(diff):
        gamma = l2_norm(model.derivative(ub, diff))
    else:
        gamma = 0.0
    if ub is u_bar:
        lam = bregman_distance(reg, vn, u_bar, xi)
    else:
        # xi lives on the coarser u_bar mesh; both sides refine exactly
        lam = bregman_distance(reg, vn, ub, SubgradientElement(_refine_dual(xi, u_bar, ub), ub))
    zeta = math.nan
    if solution is not None and y_exact is not None:
        zeta = l2_norm(model.forward(solution) - y_exact)
    beta = (rho_m + c_nonlin * lam + gamma + delta) ** 2
    return RateQuantities(gamma, lam, beta, zeta, rho_m, delta, c_nonlin, omega_norm)


def _refine_dual(xi, coarse: PiecewiseConstantField, fine: PiecewiseConstantField):
    """Spread dual coefficients evenly over sub-cells (pairing is preserved)."""
    r = fine.mesh.n // coarse.mesh.n
    c = np.asarray(xi.coeffs).reshape(coarse.mesh.cell_shape)
    for axis in range(coarse.mesh.dim):
        c = np.repeat(c, r, axis=axis) / r
    return c.ravel()


def estimate_c_nonlin(model: GroundwaterModel, u_bar: PiecewiseConstantField, samples,
                      reg: RegularizerSpec, xi: SubgradientElement) -> float:
    """Empirical ``max ||F(u) - F(u_bar) - F'(u_bar)(u - u_bar)|| / D_R(u, u_bar)``.

    Reporting only: a sampled lower bound of the true constant.
    """
    fu_bar = model.forward(u_bar)
    best = 0.0
    for u in samples:
        dr = bregman_distance(reg, u, u_bar, xi)
        if dr <= 1e-14:
            continue
        rem = model.forward(u) - fu_bar - model.derivative(u_bar, u.coeffs - u_bar.coeffs)
        best = max(best, l2_norm(rem) / dr)
    return best
