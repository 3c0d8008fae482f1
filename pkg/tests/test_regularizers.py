import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import bd_quadrature_2d, tv_l1_loop, tv_l2_edges
from varreg.errors import DomainError, NonconvexError
from varreg.mesh_fields import (NodalSplineField, ParallelepipedMesh, PiecewiseConstantField,
                                build_crisscross_triangulation, interpolate_nodal)
from varreg.regularizers import (Kind, RegularizerSpec, bd_total_deformation, evaluate, gradient,
                                 penalty_operator, sparsity_penalty, subgradient,
                                 subgradient_membership_residual, sup_norm, tv_anisotropic,
                                 tv_isotropic)

coeff_lists = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=1)


def grid_field(dim, n, seed):
    rng = np.random.default_rng(seed)
    return PiecewiseConstantField(ParallelepipedMesh(dim, n), rng.standard_normal(n**dim))


# -- anisotropic TV --------------------------------------------------------

@pytest.mark.parametrize("dim,n", [(1, 7), (2, 5), (3, 3)])
def test_tv_anisotropic_matches_loop(dim, n):
    u = grid_field(dim, n, dim)
    assert tv_anisotropic(u) == pytest.approx(tv_l1_loop(u.coeffs, dim, n), rel=1e-13)


def test_tv_of_step_is_jump_height():
    u = PiecewiseConstantField(ParallelepipedMesh(1, 4), [1, 1, 3, 3])
    assert tv_anisotropic(u) == 2.0
    v = PiecewiseConstantField(ParallelepipedMesh(2, 2), [0, 0, 1, 1])  # jump across x = 1/2
    assert tv_anisotropic(v) == pytest.approx(1.0)


@given(seed=st.integers(0, 10_000), t=st.floats(-4, 4), s=st.floats(-3, 3))
def test_tv_homogeneous_and_shift_invariant(seed, t, s):
    u = grid_field(2, 4, seed)
    scaled = u.with_coeffs(t * u.coeffs + s)
    assert tv_anisotropic(scaled) == pytest.approx(abs(t) * tv_anisotropic(u), rel=1e-12, abs=1e-12)


@given(s1=st.integers(0, 1000), s2=st.integers(0, 1000))
def test_tv_triangle_inequality(s1, s2):
    u, v = grid_field(2, 3, s1), grid_field(2, 3, s2)
    assert tv_anisotropic(u.with_coeffs(u.coeffs + v.coeffs)) <= tv_anisotropic(u) + tv_anisotropic(v) + 1e-12


# -- isotropic TV on triangles ------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3])
def test_tv_isotropic_matches_edge_search(n):
    mesh = build_crisscross_triangulation(n)
    c = np.random.default_rng(n).standard_normal(mesh.n_cells)
    u = PiecewiseConstantField(mesh, c)
    assert tv_isotropic(u) == pytest.approx(tv_l2_edges(mesh, c), rel=1e-13)


def test_tv_isotropic_of_diagonal_halfplane():
    # 1 above the diagonal y = x: the jump set has length sqrt(2)
    mesh = build_crisscross_triangulation(4)
    c = (mesh.centroids[:, 1] > mesh.centroids[:, 0]).astype(float)
    assert tv_isotropic(PiecewiseConstantField(mesh, c)) == pytest.approx(np.sqrt(2), rel=1e-12)


def test_operator_kind_checked():
    with pytest.raises(DomainError):
        tv_isotropic(grid_field(2, 2, 0))
    with pytest.raises(DomainError):
        penalty_operator(RegularizerSpec(Kind.SUP_NORM), grid_field(1, 3, 0))


# -- BD -----------------------------------------------------------------------

def vec_field(f, n=4):
    return interpolate_nodal(f, ParallelepipedMesh(2, n), 2)


@pytest.mark.parametrize("f,expected", [
    (lambda x: np.ones_like(x), 0.0),
    (lambda x: np.column_stack([x[:, 0], 0 * x[:, 0]]), 1.0),
    (lambda x: np.column_stack([x[:, 1], x[:, 0]]), 2.0),
])
def test_bd_exact_values(f, expected):
    for n in (1, 3, 8):
        assert bd_total_deformation(vec_field(f, n)) == pytest.approx(expected, abs=1e-12)


def test_bd_rotation_has_no_deformation():
    assert bd_total_deformation(vec_field(lambda x: np.column_stack([-x[:, 1], x[:, 0]]))) == pytest.approx(0, abs=1e-13)


def test_bd_matches_quadrature_on_sign_definite_fields():
    # all E_kl are of one sign inside every cell: the cell-sum formula is exact
    f = lambda x: np.column_stack([x[:, 0] ** 2 + x[:, 1], x[:, 0] * x[:, 1] + 2 * x[:, 1]])  # noqa: E731
    u = vec_field(f, 6)
    assert bd_total_deformation(u) == pytest.approx(bd_quadrature_2d(u), abs=1e-12)


@given(seed=st.integers(0, 10_000), n=st.integers(1, 5))
def test_bd_formula_bounded_by_quadrature(seed, n):
    # |int E| <= int |E| on every cell
    rng = np.random.default_rng(seed)
    mesh = ParallelepipedMesh(2, n)
    u = NodalSplineField(mesh, 2, rng.standard_normal((2, mesh.n_nodes)))
    assert bd_total_deformation(u) <= bd_quadrature_2d(u) + 1e-12


def test_bd_needs_matching_components():
    mesh = ParallelepipedMesh(2, 2)
    with pytest.raises(DomainError):
        bd_total_deformation(NodalSplineField(mesh, 1, np.zeros((1, 9))))


# -- sup-norm and sparsity ----------------------------------------------------

def test_sup_and_sparsity_values():
    u = PiecewiseConstantField(ParallelepipedMesh(1, 3), [-3, 1, 2])
    assert sup_norm(u) == 3.0
    assert sparsity_penalty(u.coeffs, 1.0) == 6.0
    assert sparsity_penalty(u.coeffs, 0.5) == pytest.approx(np.sqrt(3) + 1 + np.sqrt(2))
    with pytest.raises(DomainError):
        sparsity_penalty(u.coeffs, 1.5)


def test_spec_validation():
    assert RegularizerSpec(Kind.SPARSITY).p == 1.0
    with pytest.raises(DomainError):
        RegularizerSpec(Kind.TV_L1, p=0.5)
    with pytest.raises(DomainError):
        RegularizerSpec(Kind.SPARSITY, p=0.0)
    with pytest.raises(DomainError):
        RegularizerSpec(Kind.TV_L1, smoothing_eps=-1)
    assert not RegularizerSpec(Kind.SPARSITY, p=0.5).convex


# -- smoothing, gradients, subgradients --------------------------------------

SPECS = [RegularizerSpec(Kind.TV_L1), RegularizerSpec(Kind.SUP_NORM), RegularizerSpec(Kind.SPARSITY),
         RegularizerSpec(Kind.SPARSITY, p=0.5)]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind.value}-{s.p}")
@given(seed=st.integers(0, 10_000))
def test_smoothing_below_exact_and_converging(spec, seed):
    u = grid_field(1, 6, seed)
    exact = evaluate(spec, u)
    prev = None
    for eps in (1e-1, 1e-2, 1e-3, 1e-4):
        val = evaluate(spec.with_eps(eps), u)
        assert val <= exact + 1e-12
        if prev is not None:
            assert val >= prev - 1e-12
        prev = val
    # resolution at eps = 1e-4: n*eps for the convex penalties, n*eps^p for l^p
    assert prev == pytest.approx(exact, abs=u.coeffs.size * 1e-4 ** spec.homogeneity * 2)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind.value}-{s.p}")
def test_gradient_matches_finite_differences(spec):
    u = grid_field(1, 6, 3)
    s = spec.with_eps(0.05)
    g = gradient(s, u)
    h = 1e-6
    fd = np.array([(evaluate(s, u.with_coeffs(u.coeffs + h * e)) - evaluate(s, u.with_coeffs(u.coeffs - h * e)))
                   / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_gradient_needs_smoothing():
    with pytest.raises(DomainError):
        gradient(RegularizerSpec(Kind.TV_L1), grid_field(1, 3, 0))


@pytest.mark.parametrize("spec", SPECS[:3], ids=lambda s: s.kind.value)
@given(seed=st.integers(0, 10_000))
def test_subgradient_inequality(spec, seed):
    u, v = grid_field(1, 5, seed), grid_field(1, 5, seed + 1)
    xi = subgradient(spec, u)
    assert evaluate(spec, v) >= evaluate(spec, u) + xi.coeffs @ (v.coeffs - u.coeffs) - 1e-12
    # one-homogeneous penalties: <xi, u> = R(u)
    assert xi.coeffs @ u.coeffs == pytest.approx(evaluate(spec, u), abs=1e-12)


def test_subgradient_sign_zero_convention():
    u = PiecewiseConstantField(ParallelepipedMesh(1, 3), [1, 1, 1])
    assert np.all(subgradient(RegularizerSpec(Kind.TV_L1), u).coeffs == 0)


def test_sup_norm_ties_averaged():
    u = PiecewiseConstantField(ParallelepipedMesh(1, 3), [2, -2, 1])
    np.testing.assert_allclose(subgradient(RegularizerSpec(Kind.SUP_NORM), u).coeffs, [0.5, -0.5, 0])


def test_nonconvex_has_no_subgradient():
    with pytest.raises(NonconvexError):
        subgradient(RegularizerSpec(Kind.SPARSITY, p=0.5), grid_field(1, 3, 0))


def test_membership_residual():
    spec = RegularizerSpec(Kind.TV_L1)
    u = PiecewiseConstantField(ParallelepipedMesh(1, 4), [1, 1, 2, 2])
    xi = subgradient(spec, u)
    assert subgradient_membership_residual(spec, u, xi) < 1e-12
    # face duals with |s| <= 1 on the flat faces stay inside
    B, w = penalty_operator(spec, u)
    inside = B.T @ (w * np.array([0.7, 1.0, -0.3]))
    assert subgradient_membership_residual(spec, u, inside) < 1e-10
    # too large a flat-face dual is outside
    outside = B.T @ (w * np.array([1.5, 1.0, 0.0]))
    assert subgradient_membership_residual(spec, u, outside) > 1e-3
    sup = RegularizerSpec(Kind.SUP_NORM)
    assert subgradient_membership_residual(sup, u, [0, 0, 0.3, 0.7]) < 1e-9
    assert subgradient_membership_residual(sup, u, [0.5, 0, 0, 0.5]) > 1e-3
