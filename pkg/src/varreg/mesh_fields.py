"""Meshes of the unit cube, finite-dimensional fields and approximation operators.

Two discretizations of ``(0, 1)^N`` are provided:

* :class:`ParallelepipedMesh` -- the uniform grid of ``n^N`` cubes of edge
  ``h = 1/n``.  Cells and nodes are enumerated in C order over their
  multi-indices, axis ``k`` of a multi-index being coordinate ``x_k``.
* :class:`TriangulationMesh` -- a 2-D triangulation; the criss-cross family
  (each square split into four triangles through its centroid) is built by
  :func:`build_crisscross_triangulation`.

Functions enter either as vectorized callbacks ``f(x)`` with ``x`` of shape
``(P, N)`` or, for discontinuous data, as :class:`BoxIndicator` descriptors
whose jump positions are known exactly.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np

from .errors import DomainError

GAUSS_POINTS = 5
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(GAUSS_POINTS)


def gauss_legendre(a, b, points=GAUSS_POINTS):
    """Nodes and weights of the Gauss-Legendre rule on ``[a, b]``."""
    if points == GAUSS_POINTS:
        t, w = _GL_NODES, _GL_WEIGHTS
    else:
        t, w = np.polynomial.legendre.leggauss(points)
    half = 0.5 * (b - a)
    return a + half * (t + 1.0), half * w


def composite_gauss(breaks, points=GAUSS_POINTS):
    """Composite Gauss-Legendre rule over consecutive intervals of ``breaks``."""
    breaks = np.asarray(breaks, dtype=float)
    t, w = np.polynomial.legendre.leggauss(points)
    a, b = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (b - a)
    return (a + half * (t + 1.0)).ravel(), (half * w).ravel()


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class ParallelepipedMesh:
    """Uniform partition of ``(0,1)^dim`` into ``n^dim`` cubes."""

    dim: int
    n: int

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError(f"dim must be a positive integer, got {self.dim}")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")

    @property
    def cells_per_axis(self) -> int:
        return self.n

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def cell_shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def node_shape(self) -> tuple:
        return (self.n + 1,) * self.dim

    @property
    def n_cells(self) -> int:
        return self.n**self.dim

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def face_measure(self) -> float:
        return self.h ** (self.dim - 1)

    @cached_property
    def cell_multi_indices(self) -> np.ndarray:
        idx = np.indices(self.cell_shape).reshape(self.dim, -1).T
        idx.flags.writeable = False
        return idx

    @cached_property
    def node_multi_indices(self) -> np.ndarray:
        idx = np.indices(self.node_shape).reshape(self.dim, -1).T
        idx.flags.writeable = False
        return idx

    @cached_property
    def centroids(self) -> np.ndarray:
        c = (self.cell_multi_indices + 0.5) * self.h
        c.flags.writeable = False
        return c

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.node_multi_indices * self.h
        x.flags.writeable = False
        return x

    def face_pairs(self, axis: int):
        """Flat indices ``(lower, upper)`` of cells sharing a face normal to ``axis``."""
        grid = np.arange(self.n_cells).reshape(self.cell_shape)
        lo = np.take(grid, np.arange(self.n - 1), axis=axis).ravel()
        hi = np.take(grid, np.arange(1, self.n), axis=axis).ravel()
        return lo, hi

    @property
    def n_interior_faces(self) -> int:
        return self.dim * self.n ** (self.dim - 1) * (self.n - 1)

    def locate(self, x) -> np.ndarray:
        """Flat index of the cell containing each point (closed on the right at 1)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.clip(np.floor(x * self.n).astype(int), 0, self.n - 1)
        return np.ravel_multi_index(tuple(idx.T), self.cell_shape)

    def quadrature(self, points=GAUSS_POINTS):
        """Tensor Gauss rule, ``points`` per axis per cell, over the whole cube."""
        t, w = gauss_legendre(0.0, self.h, points)
        local = np.array(list(itertools.product(t, repeat=self.dim)))
        lw = np.prod(np.array(list(itertools.product(w, repeat=self.dim))), axis=1)
        origins = self.cell_multi_indices * self.h
        x = (origins[:, None, :] + local[None, :, :]).reshape(-1, self.dim)
        weights = np.tile(lw, self.n_cells)
        return x, weights


def build_uniform_mesh(dim: int, n: int) -> ParallelepipedMesh:
    return ParallelepipedMesh(dim, n)


def _signed_area(p0, p1, p2):
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p2[..., 0] - p0[..., 0]) * (p1[..., 1] - p0[..., 1]))


class TriangulationMesh:
    """A conforming triangulation of the unit square.

    Edges are derived from the triangle list; an edge used by two triangles
    is interior, an edge used by one lies on the boundary.
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.array(vertices, dtype=float)
        self.triangles = np.array(triangles, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise DomainError("vertices must be an array of 2-D points")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise DomainError("triangles must be index triples")
        p = self.vertices[self.triangles]
        self.areas = _signed_area(p[:, 0], p[:, 1], p[:, 2])
        if np.any(self.areas <= 0):
            raise DomainError("triangles must be positively oriented")
        self.centroids = p.mean(axis=1)

        owners = {}
        for t, tri in enumerate(self.triangles):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                owners.setdefault((min(a, b), max(a, b)), []).append(t)
        interior, pairs, boundary = [], [], []
        for edge, ts in sorted(owners.items()):
            if len(ts) == 2:
                interior.append(edge)
                pairs.append(ts)
            elif len(ts) == 1:
                boundary.append(edge)
            else:
                raise DomainError(f"edge {edge} is shared by {len(ts)} triangles")
        self.interior_edges = np.array(interior, dtype=int).reshape(-1, 2)
        self.edge_triangles = np.array(pairs, dtype=int).reshape(-1, 2)
        self.boundary_edges = np.array(boundary, dtype=int).reshape(-1, 2)
        d = self.vertices[self.interior_edges[:, 1]] - self.vertices[self.interior_edges[:, 0]]
        self.edge_lengths = np.hypot(d[:, 0], d[:, 1])
        for arr in (self.vertices, self.triangles, self.areas, self.centroids,
                    self.interior_edges, self.edge_triangles, self.boundary_edges,
                    self.edge_lengths):
            arr.flags.writeable = False

    dim = 2

    @property
    def n_cells(self) -> int:
        return len(self.triangles)

    def locate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.vertices[self.triangles]
        out = np.empty(len(x), dtype=int)
        for i, pt in enumerate(x):
            l0 = _signed_area(pt, p[:, 1], p[:, 2])
            l1 = _signed_area(p[:, 0], pt, p[:, 2])
            l2 = _signed_area(p[:, 0], p[:, 1], pt)
            inside = np.minimum(np.minimum(l0, l1), l2) / self.areas
            out[i] = int(np.argmax(inside))
            if inside[out[i]] < -1e-12:
                raise DomainError(f"point {pt} lies outside the triangulation")
        return out

    def quadrature(self, points=GAUSS_POINTS):
        """Collapsed (Duffy) tensor Gauss rule on every triangle."""
        t, w = gauss_legendre(0.0, 1.0, points)
        s, r = np.meshgrid(t, t, indexing="ij")
        ws = np.outer(w, w)
        # (s, r) in unit square -> reference triangle, Jacobian (1 - s)
        b1 = s.ravel()
        b2 = (r * (1.0 - s)).ravel()
        wr = (ws * (1.0 - s)).ravel()
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        x = p[:, None, 0] + b1[None, :, None] * e1[:, None] + b2[None, :, None] * e2[:, None]
        weights = (2.0 * self.areas[:, None]) * wr[None, :]
        return x.reshape(-1, 2), weights.ravel()


def build_crisscross_triangulation(n: int) -> TriangulationMesh:
    """Split each of the ``n^2`` squares into 4 triangles through its centroid.

    Triangle ``4*(ix*n + iy) + t`` belongs to square ``(ix, iy)`` with
    ``t`` = 0 bottom, 1 right, 2 top, 3 left.
    """
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    h = 1.0 / n
    ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    grid = np.column_stack([ix.ravel() * h, iy.ravel() * h])
    sx, sy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    centers = np.column_stack([(sx.ravel() + 0.5) * h, (sy.ravel() + 0.5) * h])
    vertices = np.vstack([grid, centers])

    def node(i, j):
        return i * (n + 1) + j

    triangles = []
    for i in range(n):
        for j in range(n):
            c = (n + 1) ** 2 + i * n + j
            v00, v10, v11, v01 = node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)
            triangles += [(v00, v10, c), (v10, v11, c), (v11, v01, c), (v01, v00, c)]
    return TriangulationMesh(vertices, triangles)


Mesh = Union[ParallelepipedMesh, TriangulationMesh]


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class PiecewiseConstantField:
    """One real value per cell of a mesh."""

    mesh: Mesh
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if len(c) != self.mesh.n_cells:
            raise DomainError(
                f"expected {self.mesh.n_cells} coefficients, got {len(c)}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def evaluate(self, x) -> np.ndarray:
        return self.coeffs[self.mesh.locate(x)]

    def with_coeffs(self, coeffs) -> "PiecewiseConstantField":
        return PiecewiseConstantField(self.mesh, coeffs)

    def __repr__(self):
        return f"PiecewiseConstantField({self.mesh!r}, coeffs={self.coeffs!r})"


@dataclass(frozen=True, eq=False)
class NodalSplineField:
    """Vector field ``sum_alpha sum_k u^k_alpha Delta((x - xi_alpha)/h) e_k``.

    ``coeffs[k, a]`` is component ``k`` at node ``a`` (flat C-order node index).
    """

    mesh: ParallelepipedMesh
    components: int
    coeffs: np.ndarray

    def __post_init__(self):
        if not isinstance(self.mesh, ParallelepipedMesh):
            raise DomainError("nodal splines live on parallelepiped meshes")
        c = np.array(self.coeffs, dtype=float)
        expected = (self.components, self.mesh.n_nodes)
        if c.shape != expected:
            raise DomainError(f"coeffs must have shape {expected}, got {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def nodal_grid(self) -> np.ndarray:
        """Coefficients reshaped to ``(components, n+1, ..., n+1)``."""
        return self.coeffs.reshape((self.components,) + self.mesh.node_shape)

    def _local(self, x):
        mesh = self.mesh
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != mesh.dim:
            raise DomainError(f"points must have {mesh.dim} coordinates")
        cell = np.clip(np.floor(x * mesh.n).astype(int), 0, mesh.n - 1)
        s = x * mesh.n - cell
        return cell, s

    def evaluate(self, x) -> np.ndarray:
        """Values at points ``x``, shape ``(P, components)``."""
        cell, s = self._local(x)
        grid = self.nodal_grid()
        out = np.zeros((len(s), self.components))
        for corner in itertools.product((0, 1), repeat=self.mesh.dim):
            corner = np.array(corner)
            weight = np.prod(np.where(corner == 1, s, 1.0 - s), axis=1)
            idx = tuple((cell + corner).T)
            out += weight[:, None] * grid[(slice(None),) + idx].T
        return out

    def jacobian(self, x) -> np.ndarray:
        """``J[p, k, j] = D_j u^k`` at points ``x`` (one-sided inside each cell)."""
        cell, s = self._local(x)
        grid = self.nodal_grid()
        dim = self.mesh.dim
        out = np.zeros((len(s), self.components, dim))
        for corner in itertools.product((0, 1), repeat=dim):
            corner = np.array(corner)
            factors = np.where(corner == 1, s, 1.0 - s)
            vals = grid[(slice(None),) + tuple((cell + corner).T)].T
            for j in range(dim):
                others = np.prod(np.delete(factors, j, axis=1), axis=1)
                sign = 1.0 if corner[j] == 1 else -1.0
                out[:, :, j] += (sign * self.mesh.n * others)[:, None] * vals
        return out


# ---------------------------------------------------------------------------
# function descriptors and approximation operators


@dataclass(frozen=True)
class BoxIndicator:
    """Sum of characteristic functions of axis-aligned boxes, times ``value``.

    ``boxes`` is a sequence of boxes, each a sequence of ``(lo, hi)`` pairs per
    axis. Evaluation uses half-open boxes ``[lo, hi)``.
    """

    boxes: tuple
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(
            self, "boxes", tuple(tuple((float(lo), float(hi)) for lo, hi in b) for b in self.boxes))

    @property
    def dim(self) -> int:
        return len(self.boxes[0])

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(len(x))
        for box in self.boxes:
            inside = np.ones(len(x), dtype=bool)
            for k, (lo, hi) in enumerate(box):
                inside &= (x[:, k] >= lo) & (x[:, k] < hi)
            out += inside
        return self.value * out

    def breakpoints(self, axis: int) -> list:
        return sorted({v for box in self.boxes for v in box[axis]})


ScalarFunction = Callable[[np.ndarray], np.ndarray]


def sample_gravity_centers(f: ScalarFunction, mesh: Mesh) -> PiecewiseConstantField:
    """Piecewise-constant field with ``coeffs[j] = f(centroid_j)``."""
    values = np.asarray(f(np.asarray(mesh.centroids)), dtype=float).reshape(-1)
    return PiecewiseConstantField(mesh, values)


def interpolate_nodal(f: Callable, mesh: ParallelepipedMesh, components: int) -> NodalSplineField:
    """Hat-spline field whose coefficients are the values of ``f`` at the nodes."""
    values = np.asarray(f(np.asarray(mesh.nodes)), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (mesh.n_nodes, components):
        raise DomainError(
            f"f returned shape {values.shape}, expected {(mesh.n_nodes, components)}")
    return NodalSplineField(mesh, components, values.T)


def hat_partition_sum(mesh: ParallelepipedMesh, x) -> np.ndarray:
    """``sum_alpha Delta((x - xi_alpha)/h)`` at points ``x``."""
    ones = NodalSplineField(mesh, 1, np.ones((1, mesh.n_nodes)))
    return ones.evaluate(x)[:, 0]


# ---------------------------------------------------------------------------
# mollification


@dataclass(frozen=True)
class MollifierSpec:
    """Product bump kernel ``C (1 - (t/eps)^2)^4`` per axis, unit mass."""

    epsilon: float
    dim: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.dim < 1:
            raise DomainError("dim must be >= 1")

    @property
    def normalization(self) -> float:
        # int_{-1}^{1} (1 - s^2)^4 ds = 256/315
        return 315.0 / (256.0 * self.epsilon)

    def kernel_1d(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=float) / self.epsilon
        return np.where(np.abs(s) <= 1.0, self.normalization * (1.0 - s * s) ** 4, 0.0)

    def kernel(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return np.prod(self.kernel_1d(y), axis=1)


def _axis_rule(x_k, eps, jumps, pieces):
    """Quadrature in the shift variable ``t`` over ``[-eps, eps]`` for one axis.

    Breaks are placed where ``x_k - t`` crosses the domain boundary or a jump
    of the integrand, so every sub-interval sees a polynomial kernel times a
    smooth (or constant) factor.
    """
    cuts = {-eps, eps}
    for b in (0.0, 1.0, *jumps):
        t = x_k - b
        if -eps < t < eps:
            cuts.add(t)
    cuts = np.array(sorted(cuts))
    fine = np.concatenate([np.linspace(a, b, pieces + 1)[:-1] for a, b in zip(cuts[:-1], cuts[1:])]
                          + [cuts[-1:]])
    return composite_gauss(fine)


def mollify(f, spec: MollifierSpec, x, pieces: int = 4) -> float:
    """``(J_eps * f)(x)`` with ``f`` extended by zero outside ``(0,1)^N``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(x) != spec.dim:
        raise DomainError(f"x must have {spec.dim} coordinates")
    rules = []
    for k in range(spec.dim):
        jumps = f.breakpoints(k) if isinstance(f, BoxIndicator) else ()
        if isinstance(f, BoxIndicator):
            pieces_k = 1
        else:
            pieces_k = pieces
        rules.append(_axis_rule(x[k], spec.epsilon, jumps, pieces_k))
    shifts = np.array(list(itertools.product(*(r[0] for r in rules))))
    weights = np.prod(np.array(list(itertools.product(*(r[1] for r in rules)))), axis=1)
    points = x[None, :] - shifts
    inside = np.all((points > 0.0) & (points < 1.0), axis=1)
    values = np.zeros(len(points))
    if inside.any():
        values[inside] = np.asarray(f(points[inside]), dtype=float).reshape(-1)
    return float(np.sum(weights * spec.kernel(shifts) * values))


# ---------------------------------------------------------------------------
# CSV dumps


def write_field_csv(field_, path) -> None:
    """One row per cell (piecewise constant) or node (nodal spline), with header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(field_, NodalSplineField):
            mesh = field_.mesh
            writer.writerow([f"i{k}" for k in range(mesh.dim)]
                            + [f"x{k}" for k in range(mesh.dim)]
                            + [f"u{k}" for k in range(field_.components)])
            for a in range(mesh.n_nodes):
                writer.writerow(list(mesh.node_multi_indices[a]) + [repr(float(v)) for v in mesh.nodes[a]]
                                + [repr(float(v)) for v in field_.coeffs[:, a]])
        elif isinstance(field_.mesh, ParallelepipedMesh):
            mesh = field_.mesh
            writer.writerow([f"i{k}" for k in range(mesh.dim)]
                            + [f"x{k}" for k in range(mesh.dim)] + ["value"])
            for j in range(mesh.n_cells):
                writer.writerow(list(mesh.cell_multi_indices[j])
                                + [repr(float(v)) for v in mesh.centroids[j]]
                                + [repr(float(field_.coeffs[j]))])
        else:
            writer.writerow(["triangle", "x0", "x1", "value"])
            for j in range(field_.mesh.n_cells):
                cx, cy = field_.mesh.centroids[j]
                writer.writerow([j, repr(float(cx)), repr(float(cy)), repr(float(field_.coeffs[j]))])


def write_mesh_csv(mesh: Mesh, path) -> None:
    """Node table of a mesh: index, coordinates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(mesh, ParallelepipedMesh):
            writer.writerow([f"i{k}" for k in range(mesh.dim)] + [f"x{k}" for k in range(mesh.dim)])
            for a in range(mesh.n_nodes):
                writer.writerow(list(mesh.node_multi_indices[a]) + [repr(float(v)) for v in mesh.nodes[a]])
        else:
            writer.writerow(["vertex", "x0", "x1"])
            for i, (x0, x1) in enumerate(mesh.vertices):
                writer.writerow([i, repr(float(x0)), repr(float(x1))])


def sample_square_centers(f: ScalarFunction, n: int) -> PiecewiseConstantField:
    """Criss-cross field taking ``f`` at the centre of each square on all 4 of its triangles.

    Jumps then sit only on axis-parallel edges, which the fixed criss-cross
    family measures with the exact isotropic length.
    """
    mesh = build_crisscross_triangulation(n)
    square = ParallelepipedMesh(2, n)
    values = np.asarray(f(np.asarray(square.centroids)), dtype=float).reshape(-1)
    return PiecewiseConstantField(mesh, np.repeat(values, 4))
