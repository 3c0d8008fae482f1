import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_galerkin, piecewise_closed_form
from varreg.errors import ConstraintError, DomainError
from varreg.forward_groundwater import (DiffusionProblem, FemSolution, GroundwaterModel,
                                        adjoint_apply, assemble_and_solve, frechet_apply,
                                        l2_inner, l2_norm, load_vector, make_observed_data,
                                        mass_matrix, prolongation, reference_forward)
from varreg.mesh_fields import ParallelepipedMesh, PiecewiseConstantField

P = DiffusionProblem(f=1.0, c_lower=0.5)


def test_constant_coefficient_nodally_exact():
    m = 16
    u = assemble_and_solve(np.array([1.0]), P, m)
    x = np.arange(1, m) / m
    np.testing.assert_allclose(u.nodal_values, x * (1 - x) / 2, atol=1e-15)


def test_piecewise_coefficient_nodally_exact_when_grids_nest():
    a = np.array([1.0, 3.0, 0.7, 2.0])
    m = 32
    u = assemble_and_solve(a, P, m)
    np.testing.assert_allclose(u.nodal_values, piecewise_closed_form(a, 1.0, np.arange(1, m) / m), atol=1e-14)


@given(n=st.integers(1, 9), m=st.integers(2, 40), seed=st.integers(0, 1000))
def test_matches_dense_galerkin(n, m, seed):
    a = np.random.default_rng(seed).uniform(0.5, 3, n)
    np.testing.assert_allclose(assemble_and_solve(a, P, m).nodal_values, dense_galerkin(a, 1.0, m),
                               rtol=1e-10, atol=1e-14)


def test_accepts_field_and_checks_constraint():
    field = PiecewiseConstantField(ParallelepipedMesh(1, 2), [1.0, 2.0])
    assert assemble_and_solve(field, P, 8).m == 8
    with pytest.raises(ConstraintError):
        assemble_and_solve(np.array([1.0, 0.4]), P, 8)
    with pytest.raises(DomainError):
        assemble_and_solve(np.array([1.0]), P, 1)
    with pytest.raises(DomainError):
        DiffusionProblem(c_lower=0.0)


def test_polynomial_and_callable_loads_agree():
    a = np.array([1.0, 2.0])
    p1 = DiffusionProblem(f=[1.0, 2.0])
    p2 = DiffusionProblem(f=lambda x: 1.0 + 2.0 * x)
    np.testing.assert_allclose(load_vector(p1, 16), load_vector(p2, 16), rtol=1e-13)
    np.testing.assert_allclose(assemble_and_solve(a, p1, 16).nodal_values,
                               assemble_and_solve(a, p2, 16).nodal_values, rtol=1e-12)


def test_mass_matrix_and_l2_on_different_grids():
    M = mass_matrix(4).toarray()
    assert M.sum() == pytest.approx(np.sum(np.ones(3) @ M))
    u = FemSolution(4, np.array([1.0, 2.0, 1.0]))
    # exact: piecewise linear hat-like profile, integrate on a finer grid too
    fine = u.on_grid(12)
    assert l2_norm(u) == pytest.approx(l2_norm(fine), rel=1e-14)
    v = FemSolution(3, np.array([0.3, -0.2]))
    x = np.linspace(0, 1, 200_001)
    brute = np.trapezoid(u.evaluate(x) * v.evaluate(x), x)
    assert l2_inner(u, v) == pytest.approx(brute, rel=1e-6)
    P_ = prolongation(4, 8).toarray()
    np.testing.assert_allclose(P_ @ u.nodal_values, u.on_grid(8).nodal_values)


def test_fem_solution_arithmetic():
    u = FemSolution(4, np.array([1.0, 2.0, 3.0]))
    v = u * 2.0 - u
    np.testing.assert_allclose(v.nodal_values, u.nodal_values)
    np.testing.assert_allclose(u.full_values, [0, 1, 2, 3, 0])


@pytest.mark.parametrize("n,m", [(4, 32), (3, 10), (8, 8)])
def test_adjoint_duality(n, m):
    rng = np.random.default_rng(n * m)
    for _ in range(10):
        a = rng.uniform(0.5, 2, n)
        h = rng.standard_normal(n)
        w = FemSolution(m, rng.standard_normal(m - 1))
        lhs = l2_inner(frechet_apply(a, h, P, m), w)
        rhs = h @ adjoint_apply(a, w, P, m)
        assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-15)


def test_derivative_matches_finite_difference():
    rng = np.random.default_rng(7)
    a, h, m = rng.uniform(0.5, 2, 5), rng.standard_normal(5), 40
    u0 = assemble_and_solve(a, P, m)
    lin = frechet_apply(a, h, P, m)
    rem = [l2_norm(assemble_and_solve(a + t * h, P, m) - u0 - lin * t) / t for t in (1e-2, 1e-3, 1e-4)]
    assert rem[1] / rem[0] == pytest.approx(0.1, rel=0.05)
    assert rem[2] / rem[1] == pytest.approx(0.1, rel=0.05)


def test_reference_convergence_order_two():
    a = np.array([1.0, 2.0, 1.5])
    ref = reference_forward(a, P, 2**12)
    e = [l2_norm(assemble_and_solve(a, P, m) - ref) for m in (12, 24, 48)]
    assert np.log2(e[0] / e[1]) == pytest.approx(2, abs=0.1)
    assert np.log2(e[1] / e[2]) == pytest.approx(2, abs=0.1)


def test_observed_data_noise_level_and_determinism():
    a = np.array([1.0, 2.0])
    d1 = make_observed_data(a, P, 16, 0.01, seed=3, m_ref=256)
    d2 = make_observed_data(a, P, 16, 0.01, seed=3, m_ref=256)
    assert l2_norm(d1.y_delta - d1.y_exact) == pytest.approx(0.01, rel=1e-12)
    np.testing.assert_array_equal(d1.y_delta.nodal_values, d2.y_delta.nodal_values)
    d0 = make_observed_data(a, P, 16, 0.0, seed=3, m_ref=256)
    np.testing.assert_array_equal(d0.y_delta.nodal_values, d0.y_exact.nodal_values)
    with pytest.raises(DomainError):
        make_observed_data(a, P, 16, -1.0, seed=0)


def test_misfit_gradient_against_finite_differences():
    model = GroundwaterModel(P, 16, 256)
    y = make_observed_data(np.array([1.0, 2.0, 1.0]), P, 16, 0.001, 0, 256).y_delta
    J = model.misfit(y)
    a = np.array([1.2, 1.5, 0.9])
    val, g = J.value_and_gradient(a)
    assert val == pytest.approx(J.value(a))
    h = 1e-6
    fd = [(J.value(a + h * e) - J.value(a - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-12)
