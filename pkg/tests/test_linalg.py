import numpy as np
import pytest

from surrogate_services.discretization.mesh_fem import DiffusionField, assemble_energy, build_mesh
from surrogate_services.errors import NumericalFailure, UsageError
from surrogate_services.numerics.linalg import (
    adjoint_mismatch, cg_solve, condition_number, densify, make_operator, singular_value_ratio,
    sym_eig_extremal, symmetric_eigenpairs,
)


def _matrix_operator(m: np.ndarray):
    return make_operator(m.shape[1], m.shape[0], lambda x: x @ m.T, lambda v: v @ m)


def test_cg_identity_converges_in_one_iteration():
    result = cg_solve(_matrix_operator(np.eye(5)), np.ones(5), tol=1e-12, max_iters=10)
    np.testing.assert_allclose(result.x, np.ones(5))
    assert result.iterations == 1
    assert result.converged


def test_cg_small_diagonal():
    result = cg_solve(lambda x: np.array([2.0, 1.0]) * x, np.array([2.0, 1.0]), tol=1e-12, max_iters=10)
    np.testing.assert_allclose(result.x, [1.0, 1.0])


def test_cg_diagonal_finite_termination():
    d = np.arange(1.0, 11.0)
    result = cg_solve(_matrix_operator(np.diag(d)), np.ones(10), tol=1e-10, max_iters=50)
    assert result.iterations <= 10
    np.testing.assert_allclose(result.x, 1.0 / d, rtol=1e-8)


def test_cg_energy_error_is_monotone(rng):
    q = rng.standard_normal((12, 12))
    m = q @ q.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    exact = np.linalg.solve(m, b)
    errors = []

    def record(x):
        e = x - exact
        errors.append(float(e @ m @ e))

    cg_solve(_matrix_operator(m), b, tol=1e-8, max_iters=30, callback=record)
    assert all(later <= earlier * (1 + 1e-12) for earlier, later in zip(errors, errors[1:]))


def test_cg_keeps_rhs_dtype():
    rhs = np.ones(4, dtype=np.float32)
    result = cg_solve(lambda x: 3 * x, rhs, tol=1e-6, max_iters=5)
    assert result.x.dtype == np.float32


def test_cg_zero_rhs_returns_zero():
    result = cg_solve(lambda x: x, np.zeros(3), tol=1e-12, max_iters=5)
    assert result.iterations == 0
    np.testing.assert_array_equal(result.x, np.zeros(3))


def test_cg_dimension_mismatch():
    with pytest.raises(UsageError):
        cg_solve(_matrix_operator(np.eye(3)), np.ones(4), tol=1e-8, max_iters=5)


def test_cg_reports_nan_residual():
    with pytest.raises(NumericalFailure):
        cg_solve(lambda x: np.full_like(x, np.nan), np.ones(3), tol=1e-8, max_iters=5)


def test_cg_reports_indefinite_operator():
    with pytest.raises(NumericalFailure):
        cg_solve(lambda x: -x, np.ones(3), tol=1e-8, max_iters=5)


def test_cg_rejects_non_finite_rhs():
    with pytest.raises(NumericalFailure):
        cg_solve(lambda x: x, np.array([1.0, np.nan, 2.0]), tol=1e-8, max_iters=5)


def test_cg_curvature_is_taken_before_rounding():
    # A p underflows to zero in binary16, p^T A p is still positive in binary64
    rhs = np.full(2, 1e-3, dtype=np.float16)
    result = cg_solve(lambda x: 2e-5 * x.astype(np.float64), rhs, tol=1e-8, max_iters=1)
    assert result.iterations == 1
    np.testing.assert_allclose(result.x.astype(np.float64), rhs.astype(np.float64) / 2e-5, rtol=2e-3)


@pytest.mark.parametrize("m, expected", [
    (np.eye(3), (1.0, 1.0)),
    (np.diag([1.0, 4.0]), (1.0, 4.0)),
    (np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]]), (2 - np.sqrt(2), 2 + np.sqrt(2))),
])
def test_sym_eig_extremal(m, expected):
    np.testing.assert_allclose(sym_eig_extremal(m), expected, rtol=1e-12)


def test_sym_eig_rejects_non_symmetric():
    with pytest.raises(UsageError):
        sym_eig_extremal(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_eigenpair_residuals(rng):
    q = rng.standard_normal((20, 20))
    m = q + q.T
    values, vectors = symmetric_eigenpairs(m)
    scale = np.linalg.norm(m, 2)
    for k in (0, -1):
        residual = np.linalg.norm(m @ vectors[:, k] - values[k] * vectors[:, k])
        assert residual <= 1e-8 * scale


def test_condition_number_simple_cases():
    assert condition_number(np.eye(4)) == pytest.approx(1.0)
    assert condition_number(np.diag([1.0, 100.0])) == pytest.approx(100.0)


def test_condition_number_rejects_singular_matrix():
    with pytest.raises(NumericalFailure):
        condition_number(np.diag([0.0, 1.0]))


def test_condition_number_on_nonzero_spectrum():
    assert condition_number(np.diag([0.0, 2.0, 8.0]), nonzero_only=True) == pytest.approx(4.0)


def test_stiffness_condition_grows_like_h_squared(unit_field):
    field = DiffusionField(unit_field)
    conds = [condition_number(assemble_energy(build_mesh(J), field).toarray()) for J in (4, 5)]
    assert conds[1] / conds[0] == pytest.approx(4.0, rel=0.05)


def test_singular_value_ratio_ignores_kernel():
    m = np.diag([3.0, 1.0, 0.0])
    assert singular_value_ratio(m) == pytest.approx(3.0)


def test_densify_and_adjoint_consistency(rng):
    m = rng.standard_normal((7, 5))
    op = _matrix_operator(m)
    np.testing.assert_allclose(densify(op), m)
    assert adjoint_mismatch(op, trials=100, seed=3) <= 1e-12
