import numpy as np
import pytest

from surrogate_services.discretization.frames import GAUSS_OFFSETS
from surrogate_services.discretization.mesh_fem import (
    DiffusionField, assemble_energy, assemble_fosls, assemble_load, build_mesh, coefficient_values,
    exact_solution_oracle, fosls_element_blocks, fosls_functional, interpolate_exact, local_blocks_fosls,
    local_stiffness_energy, solve_reference, solve_reference_energy,
)
from surrogate_services.errors import UsageError
from surrogate_services.experiments.sampling import sample_parameters


def test_build_mesh_level_one():
    mesh = build_mesh(1)
    assert mesh.n_elements == 2
    np.testing.assert_allclose(mesh.nodes, [0.0, 0.5, 1.0])


def test_build_mesh_level_ten():
    mesh = build_mesh(10)
    assert mesh.n_elements == 1024
    assert mesh.h == pytest.approx(9.765625e-4)


@pytest.mark.parametrize("J", [0, 17, 2.5])
def test_build_mesh_rejects_invalid_levels(J):
    with pytest.raises(UsageError):
        build_mesh(J)


def test_quadrature_points_inside_elements_and_weights_sum_to_h():
    mesh = build_mesh(3)
    points = mesh.gauss_points.reshape(-1, 2)
    left = mesh.nodes[:-1, None]
    assert np.all(points > left) and np.all(points < left + mesh.h)
    np.testing.assert_allclose(mesh.gauss_weights.reshape(-1, 2).sum(axis=1), mesh.h)


def test_field_is_constant_on_quarter_level_elements(rng):
    mesh = build_mesh(2)
    y = tuple(rng.uniform(0.5, 1.5, 4))
    field = DiffusionField(y)
    np.testing.assert_allclose(field.on_elements(mesh), y)
    points = field.at_gauss_points(mesh).reshape(-1, 2)
    np.testing.assert_array_equal(points[:, 0], points[:, 1])


def test_coefficient_values_batched(parameters):
    x = np.array([0.1, 0.3, 0.6, 1.0])
    values = coefficient_values(parameters, x)
    assert values.shape == (3, 4)
    np.testing.assert_array_equal(values, parameters)


def test_diffusion_field_validation():
    with pytest.raises(UsageError):
        DiffusionField((1.0, 1.0, 1.0))
    with pytest.raises(UsageError):
        DiffusionField((1.0, -1.0, 1.0, 1.0))
    assert DiffusionField((1.0, 1.0, 1.0, 1.0)).in_parameter_box
    assert not DiffusionField((3.0, 1.0, 1.0, 1.0)).in_parameter_box


def test_local_stiffness_energy(unit_field):
    np.testing.assert_allclose(local_stiffness_energy(build_mesh(1), DiffusionField(unit_field), 0),
                               [[2.0, -2.0], [-2.0, 2.0]])
    np.testing.assert_allclose(local_stiffness_energy(build_mesh(10), DiffusionField(unit_field), 5),
                               1024.0 * np.array([[1.0, -1.0], [-1.0, 1.0]]))
    np.testing.assert_allclose(local_stiffness_energy(build_mesh(2), DiffusionField((0.5, 1, 1, 1)), 0),
                               2.0 * np.array([[1.0, -1.0], [-1.0, 1.0]]))


def test_local_stiffness_rejects_bad_element(unit_field):
    with pytest.raises(UsageError):
        local_stiffness_energy(build_mesh(2), DiffusionField(unit_field), 4)


def _fosls_block_oracle(h: float, a: float) -> np.ndarray:
    """Exact element integrals of (sigma')^2 + (sigma/a - u')^2 on (u_l, u_r, s_l, s_r)."""
    mass = h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    grad = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    # int phi_i * phi_j' over the element, phi = (1 - t, t)
    mixed = 0.5 * np.array([[-1.0, 1.0], [-1.0, 1.0]])
    block = np.zeros((4, 4))
    block[:2, :2] = grad
    block[2:, 2:] = grad + mass / a ** 2
    block[2:, :2] = -mixed / a
    block[:2, 2:] = -mixed.T / a
    return block


def test_fosls_block_matches_exact_integrals(rng):
    mesh = build_mesh(3)
    y = tuple(rng.uniform(0.5, 1.5, 4))
    field = DiffusionField(y)
    block = local_blocks_fosls(mesh, field, 5)
    np.testing.assert_allclose(block, _fosls_block_oracle(mesh.h, field.on_elements(mesh)[5]), rtol=1e-12)
    x = rng.standard_normal(4)
    assert x @ block @ x >= 0.0


def test_local_blocks_agree_with_the_batched_assembly(parameters):
    mesh = build_mesh(3)
    field = DiffusionField(parameters[0])
    batched = fosls_element_blocks(mesh, field)
    for n in range(mesh.n_elements):
        np.testing.assert_array_equal(local_blocks_fosls(mesh, field, n), batched[n])
        assert local_stiffness_energy(mesh, field, n)[0, 0] == field.on_elements(mesh)[n] / mesh.h


def test_fosls_block_annihilates_matching_flux(unit_field):
    mesh = build_mesh(2)
    block = local_blocks_fosls(mesh, DiffusionField(unit_field), 1)
    # u slope 1 and sigma = a u' = 1: both residuals vanish
    x = np.array([0.0, mesh.h, 1.0, 1.0])
    assert x @ block @ x == pytest.approx(0.0, abs=1e-12)
    assert np.zeros(4) @ block @ np.zeros(4) == 0.0


def test_assemble_load():
    np.testing.assert_allclose(assemble_load(build_mesh(2), 1.0, "H10"), [0.25, 0.25, 0.25])
    np.testing.assert_allclose(assemble_load(build_mesh(2), 1.0, "H1"), [0.125, 0.25, 0.25, 0.25, 0.125])
    np.testing.assert_array_equal(assemble_load(build_mesh(2), 0.0, "H10"), np.zeros(3))


def test_assembled_fosls_matches_functional(rng, parameters):
    mesh = build_mesh(4)
    field = DiffusionField(tuple(parameters[0]))
    K, b, c = assemble_fosls(mesh, field, 1.0)
    u = rng.standard_normal(mesh.n_elements - 1)
    sigma = rng.standard_normal(mesh.n_elements + 1)
    x = np.concatenate([u, sigma])
    assert float(x @ (K @ x) + 2 * b @ x + c) == pytest.approx(float(fosls_functional(mesh, field, u, sigma)),
                                                               rel=1e-12)


def test_reference_for_unit_field_matches_analytic_solution(unit_field):
    mesh = build_mesh(5)
    u, sigma = solve_reference(DiffusionField(unit_field), 5)
    x = mesh.nodes
    np.testing.assert_allclose(u, (x * (1 - x) / 2)[1:-1], atol=5 * mesh.h ** 2)
    np.testing.assert_allclose(sigma, 0.5 - x, atol=5 * mesh.h ** 2)


def test_reference_scales_with_constant_field(unit_field):
    u1, s1 = solve_reference(DiffusionField(unit_field), 4)
    u2, s2 = solve_reference(DiffusionField((2.0, 2.0, 2.0, 2.0)), 4)
    np.testing.assert_allclose(u2, u1 / 2.0, atol=2 * 4.0 ** -4)
    np.testing.assert_allclose(s2, s1, atol=2 * 4.0 ** -4)


@pytest.mark.parametrize("J", [4, 6])
def test_reference_matches_exact_solution(parameters, J):
    field = DiffusionField(tuple(parameters[1]))
    u, sigma = solve_reference(field, J)
    u_exact, sigma_exact = interpolate_exact(field, J)
    assert np.max(np.abs(u - u_exact)) <= 5.0 * 4.0 ** -J
    assert np.max(np.abs(sigma - sigma_exact)) <= 5.0 * 4.0 ** -J


def test_reference_energy_matches_tridiagonal_solve(parameters):
    mesh = build_mesh(5)
    field = DiffusionField(tuple(parameters[2]))
    A = assemble_energy(mesh, field).toarray()
    expected = np.linalg.solve(A, assemble_load(mesh, 1.0, "H10"))
    np.testing.assert_allclose(solve_reference_energy(field, 5), expected, rtol=1e-10)


def test_exact_solution_values(rng):
    exact = exact_solution_oracle(DiffusionField((1.0, 1.0, 1.0, 1.0)))
    assert float(exact.u(0.5)) == pytest.approx(0.125)
    assert float(exact.sigma(0.5)) == pytest.approx(0.0)
    field = DiffusionField(tuple(rng.uniform(0.5, 1.5, 4)))
    exact = exact_solution_oracle(field)
    assert float(exact.u(0.0)) == 0.0
    assert float(exact.u(1.0)) == pytest.approx(0.0, abs=1e-14)
    for b in (0.25, 0.5, 0.75):
        assert abs(float(exact.sigma(b + 1e-15)) - float(exact.sigma(b - 1e-15))) <= 1e-14


def test_fosls_functional_vanishes_on_exact_linear_data():
    # a = 1, f = 0: u = 0 and sigma = 0 solve the problem
    mesh = build_mesh(3)
    field = DiffusionField((1.0, 1.0, 1.0, 1.0))
    assert float(fosls_functional(mesh, field, np.zeros(7), np.zeros(9), f=0.0)) == 0.0


def test_fosls_functional_rejects_wrong_lengths(unit_field):
    with pytest.raises(UsageError):
        fosls_functional(build_mesh(3), DiffusionField(unit_field), np.zeros(8), np.zeros(9))


def test_gauss_offsets_are_symmetric():
    assert GAUSS_OFFSETS[0] + GAUSS_OFFSETS[1] == pytest.approx(1.0)


@pytest.mark.slow
def test_reference_converges_at_second_order():
    levels = np.arange(4, 10)
    for y in sample_parameters(20, seed=13):
        field = DiffusionField(tuple(y))
        errors = []
        for J in levels:
            u, sigma = solve_reference(field, int(J))
            u_exact, sigma_exact = interpolate_exact(field, int(J))
            errors.append(max(np.max(np.abs(u - u_exact)), np.max(np.abs(sigma - sigma_exact))))
        errors = np.asarray(errors)
        assert np.all(errors <= 5.0 * 4.0 ** -levels)
        rate = -np.polyfit(levels, np.log2(errors), 1)[0]
        assert 1.8 <= rate <= 2.2
