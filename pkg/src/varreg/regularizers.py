"""Penalty functionals, their smoothed versions and subgradients.

Apart from the sup-norm, every penalty here has the form

    R(u) = sum_r w_r |(B u)_r|

for a sparse difference operator ``B`` acting on the coefficient vector of
a field: cell jumps across grid faces (anisotropic TV), across triangle edges
(isotropic TV of piecewise constants), the per-cell symmetric-gradient sums
of a hat-spline field (BD), or the identity (l1).  Smoothing replaces
``|t|`` by ``sqrt(t^2 + eps^2) - eps``.

Subgradients are returned as dual coefficients paired with the primal
coefficient vector by the plain dot product, so ``<xi, u> = R(u)`` holds for
the selection ``sign(0) := 0``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import lsq_linear, nnls
from scipy.special import logsumexp

from .errors import DomainError, NonconvexError
from .mesh_fields import (NodalSplineField, ParallelepipedMesh,
                          PiecewiseConstantField, TriangulationMesh)


class Kind(str, enum.Enum):
    TV_L1 = "TV_L1"
    TV_L2 = "TV_L2"
    BD = "BD"
    SUP_NORM = "SUP_NORM"
    SPARSITY = "SPARSITY"


@dataclass(frozen=True)
class RegularizerSpec:
    kind: Kind
    p: Optional[float] = None
    smoothing_eps: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.SPARSITY:
            if self.p is None:
                object.__setattr__(self, "p", 1.0)
            if not 0.0 < self.p <= 1.0:
                raise DomainError(f"sparsity exponent must lie in (0, 1], got {self.p}")
        elif self.p is not None:
            raise DomainError("p is only defined for SPARSITY")
        if self.smoothing_eps < 0:
            raise DomainError("smoothing_eps must be nonnegative")

    @property
    def convex(self) -> bool:
        return not (self.kind is Kind.SPARSITY and self.p < 1.0)

    @property
    def homogeneity(self) -> float:
        return self.p if self.kind is Kind.SPARSITY else 1.0

    def with_eps(self, eps: float) -> "RegularizerSpec":
        return RegularizerSpec(self.kind, self.p, eps)


@dataclass(frozen=True, eq=False)
class SubgradientElement:
    coeffs: np.ndarray
    at_field: object


def coefficient_vector(field) -> np.ndarray:
    """Primal coefficients of a field as one flat vector."""
    return np.asarray(field.coeffs, dtype=float).ravel()


# ---------------------------------------------------------------------------
# difference operators


@lru_cache(maxsize=64)
def _grid_jump_operator(mesh: ParallelepipedMesh):
    rows, cols, vals = [], [], []
    offset = 0
    for axis in range(mesh.dim):
        lo, hi = mesh.face_pairs(axis)
        r = offset + np.arange(len(lo))
        rows += [r, r]
        cols += [hi, lo]
        vals += [np.ones(len(lo)), -np.ones(len(lo))]
        offset += len(lo)
    B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(offset, mesh.n_cells))
    w = np.full(offset, mesh.face_measure)
    return B, w


_tri_cache: dict = {}


def _edge_jump_operator(mesh: TriangulationMesh):
    key = id(mesh)
    hit = _tri_cache.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    t = mesh.edge_triangles
    r = np.arange(len(t))
    B = sp.csr_matrix((np.r_[np.ones(len(t)), -np.ones(len(t))], (np.r_[r, r], np.r_[t[:, 1], t[:, 0]])),
                      shape=(len(t), mesh.n_cells))
    out = (B, np.asarray(mesh.edge_lengths, dtype=float))
    _tri_cache[key] = (mesh, out)
    return out


@lru_cache(maxsize=64)
def _bd_operator(mesh: ParallelepipedMesh):
    """Rows: for each cell alpha and ordered pair (k, l), the signed edge sums.

    For ``k == l`` the row is ``sum_{beta in A_alpha^k} (u^k_{beta+e_k} - u^k_beta)``
    with weight ``(h/2)^(N-1)``; for ``k != l`` it is the sum of the two
    cross terms with weight ``(h/2)^(N-1) / 2``.  ``A_alpha^k`` is the set of
    cell vertices whose k-th index equals ``alpha_k``.
    """
    N = mesh.dim
    n_nodes = mesh.n_nodes
    node_grid = np.arange(n_nodes).reshape(mesh.node_shape)
    alphas = mesh.cell_multi_indices

    def edge_sum(comp, direction):
        # sum over beta in A_alpha^direction of u^comp_{beta+e_dir} - u^comp_beta
        r_cols, r_vals = [], []
        others = [i for i in range(N) if i != direction]
        for offs in itertools.product((0, 1), repeat=N - 1):
            shift = np.zeros(N, dtype=int)
            shift[others] = offs
            beta = alphas + shift
            beta_up = beta.copy()
            beta_up[:, direction] += 1
            r_cols += [comp * n_nodes + node_grid[tuple(beta_up.T)],
                       comp * n_nodes + node_grid[tuple(beta.T)]]
            r_vals += [np.ones(len(alphas)), -np.ones(len(alphas))]
        return r_cols, r_vals

    blocks, weights = [], []
    base = (mesh.h / 2.0) ** (N - 1)
    cell_rows = np.arange(len(alphas))
    for k in range(N):
        for l in range(N):
            if k == l:
                cols, vals = edge_sum(k, k)
                wt = base
            else:
                c1, v1 = edge_sum(k, l)
                c2, v2 = edge_sum(l, k)
                cols, vals = c1 + c2, v1 + v2
                wt = 0.5 * base
            rows = np.concatenate([cell_rows] * len(cols))
            blocks.append(sp.csr_matrix((np.concatenate(vals), (rows, np.concatenate(cols))),
                                        shape=(len(alphas), N * n_nodes)))
            weights.append(np.full(len(alphas), wt))
    return sp.vstack(blocks).tocsr(), np.concatenate(weights)


def penalty_operator(spec: RegularizerSpec, field):
    """``(B, w)`` with ``R(u) = sum w |B u|``; raises for the sup-norm and p < 1."""
    kind = spec.kind
    if kind is Kind.TV_L1:
        if not (isinstance(field, PiecewiseConstantField) and isinstance(field.mesh, ParallelepipedMesh)):
            raise DomainError("anisotropic TV needs a piecewise-constant field on a parallelepiped mesh")
        return _grid_jump_operator(field.mesh)
    if kind is Kind.TV_L2:
        if not (isinstance(field, PiecewiseConstantField) and isinstance(field.mesh, TriangulationMesh)):
            raise DomainError("isotropic TV needs a piecewise-constant field on a triangulation")
        return _edge_jump_operator(field.mesh)
    if kind is Kind.BD:
        if not isinstance(field, NodalSplineField):
            raise DomainError("BD needs a nodal spline field")
        if field.components != field.mesh.dim:
            raise DomainError("BD needs as many components as space dimensions")
        return _bd_operator(field.mesh)
    if kind is Kind.SPARSITY:
        size = coefficient_vector(field).size
        return sp.identity(size, format="csr"), np.ones(size)
    raise DomainError(f"{kind.value} has no difference-operator form")


# ---------------------------------------------------------------------------
# named penalties


def tv_anisotropic(field: PiecewiseConstantField) -> float:
    """Sum over interior faces of |jump| times face measure."""
    B, w = penalty_operator(RegularizerSpec(Kind.TV_L1), field)
    return float(w @ np.abs(B @ field.coeffs))


def tv_isotropic(field: PiecewiseConstantField) -> float:
    """Sum over interior edges of |jump| times edge length."""
    B, w = penalty_operator(RegularizerSpec(Kind.TV_L2), field)
    return float(w @ np.abs(B @ field.coeffs))


def bd_total_deformation(field: NodalSplineField) -> float:
    """Discrete total deformation of a hat-spline field from its nodal values.

    Per cell and per ordered index pair the contribution is ``|int_cell E_kl u|``,
    computed from signed edge differences of the coefficients.
    """
    B, w = penalty_operator(RegularizerSpec(Kind.BD), field)
    return float(w @ np.abs(B @ coefficient_vector(field)))


def sup_norm(field) -> float:
    c = coefficient_vector(field)
    if c.size == 0:
        raise DomainError("sup-norm of an empty field")
    return float(np.max(np.abs(c)))


def sparsity_penalty(coeffs, p: float) -> float:
    if not 0.0 < p <= 1.0:
        raise DomainError(f"p must lie in (0, 1], got {p}")
    return float(np.sum(np.abs(np.asarray(coeffs, dtype=float)) ** p))


def _smooth_abs(t, eps):
    return np.sqrt(t * t + eps * eps) - eps


def evaluate(spec: RegularizerSpec, field) -> float:
    """``R(field)``, smoothed when ``spec.smoothing_eps > 0``."""
    eps = spec.smoothing_eps
    if spec.kind is Kind.SUP_NORM:
        if eps == 0:
            return sup_norm(field)
        c = coefficient_vector(field)
        if c.size == 0:
            raise DomainError("sup-norm of an empty field")
        s = _smooth_abs(c, eps)
        return float(eps * (logsumexp(s / eps) - np.log(c.size)))
    if spec.kind is Kind.SPARSITY and spec.p < 1.0:
        c = coefficient_vector(field)
        if eps == 0:
            return sparsity_penalty(c, spec.p)
        return float(np.sum((c * c + eps * eps) ** (spec.p / 2) - eps**spec.p))
    B, w = penalty_operator(spec, field)
    t = B @ coefficient_vector(field)
    if eps == 0:
        return float(w @ np.abs(t))
    return float(w @ _smooth_abs(t, eps))


def gradient(spec: RegularizerSpec, field) -> np.ndarray:
    """Coefficient gradient of the smoothed penalty (``smoothing_eps > 0``)."""
    eps = spec.smoothing_eps
    if eps <= 0:
        raise DomainError("gradient needs smoothing_eps > 0; use subgradient for eps = 0")
    c = coefficient_vector(field)
    if spec.kind is Kind.SUP_NORM:
        s = _smooth_abs(c, eps)
        soft = np.exp(s / eps - logsumexp(s / eps))
        return soft * c / np.sqrt(c * c + eps * eps)
    if spec.kind is Kind.SPARSITY and spec.p < 1.0:
        return spec.p * c * (c * c + eps * eps) ** (spec.p / 2 - 1)
    B, w = penalty_operator(spec, field)
    t = B @ c
    return B.T @ (w * t / np.sqrt(t * t + eps * eps))


def subgradient(spec: RegularizerSpec, field) -> SubgradientElement:
    """Minimal-norm-type selection from ``dR(field)`` with ``sign(0) := 0``."""
    if not spec.convex:
        raise NonconvexError(f"l^p with p = {spec.p} < 1 is not convex; no subgradient")
    c = coefficient_vector(field)
    if spec.kind is Kind.SUP_NORM:
        xi = np.zeros_like(c)
        top = np.max(np.abs(c)) if c.size else 0.0
        if top > 0:
            ties = np.abs(c) == top
            xi[ties] = np.sign(c[ties]) / np.count_nonzero(ties)
        return SubgradientElement(xi, field)
    B, w = penalty_operator(spec, field)
    xi = B.T @ (w * np.sign(B @ c))
    return SubgradientElement(np.asarray(xi, dtype=float), field)


def subgradient_membership_residual(spec: RegularizerSpec, field, xi) -> float:
    """Euclidean distance from the dual vector ``xi`` to ``dR(field)``."""
    xi = np.asarray(getattr(xi, "coeffs", xi), dtype=float)
    c = coefficient_vector(field)
    if spec.kind is Kind.SUP_NORM:
        top = np.max(np.abs(c))
        if top == 0:
            # unit ball of the l1 dual norm
            excess = max(np.sum(np.abs(xi)) - 1.0, 0.0)
            return float(excess / np.sqrt(xi.size))
        ties = np.flatnonzero(np.abs(c) == top)
        A = np.zeros((c.size + 1, len(ties)))
        A[ties, np.arange(len(ties))] = np.sign(c[ties])
        A[-1] = 1e6
        b = np.r_[xi, 1e6]
        _, res = nnls(A, b)
        return float(res)
    if not spec.convex:
        raise NonconvexError("membership is only defined for convex penalties")
    B, w = penalty_operator(spec, field)
    t = B @ c
    active = t != 0
    fixed = np.where(active, np.sign(t), 0.0)
    rhs = xi - B.T @ (w * fixed)
    free = np.flatnonzero(~active)
    if free.size == 0:
        return float(np.linalg.norm(rhs))
    M = (B.T @ sp.diags(w)).tocsc()[:, free]
    sol = lsq_linear(M, rhs, bounds=(-1.0, 1.0), lsmr_tol="auto", tol=1e-14, max_iter=10000)
    return float(np.linalg.norm(M @ sol.x - rhs))
