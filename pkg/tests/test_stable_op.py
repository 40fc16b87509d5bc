import numpy as np
import pytest

from surrogate_services.discretization import frames as fr
from surrogate_services.discretization import stable_op as so
from surrogate_services.discretization.mesh_fem import (
    DiffusionField, assemble_energy, assemble_load, build_mesh, interpolate_exact, solve_reference_energy,
)
from surrogate_services.errors import UsageError
from surrogate_services.experiments.sampling import sample_parameters
from surrogate_services.numerics.linalg import adjoint_mismatch, densify


def _finest_only(op: so.StableOperator, finest: list) -> np.ndarray:
    """Stacked coefficients with only the finest level of every field set."""
    w = np.zeros(op.dim_in)
    offset = 0
    for frame, values in zip(op.frames, finest):
        w[offset + frame.offsets[-2]:offset + frame.total_size] = values
        offset += frame.total_size
    return w


def _derivative_oracle(frame, w: np.ndarray, mesh) -> np.ndarray:
    """Synthesize, then differentiate the finest nodal function at the Gauss points."""
    values = fr.to_nodal(frame, fr.bpx_synthesize(frame, w))
    if frame.space is fr.Space.H10:
        values = np.pad(values, 1)
    return np.repeat(np.diff(values) / mesh.h, 2)


def _value_oracle(frame, w: np.ndarray, mesh) -> np.ndarray:
    values = fr.to_nodal(frame, fr.bpx_synthesize(frame, w))
    left, right = mesh.gauss_shape[:, 0], mesh.gauss_shape[:, 1]
    return (values[:-1, None] * left + values[1:, None] * right).reshape(-1)


def test_operator_dimensions():
    op = so.StableOperator(4)
    assert op.dim_in == fr.build_frame("H10", 4).total_size + fr.build_frame("H1", 4).total_size
    assert op.dim_out == 3 * 2 * 16
    assert so.StableOperator(4, "energy").dim_out == 32


def test_apply_zero():
    op = so.StableOperator(3)
    np.testing.assert_array_equal(op.apply(np.zeros(op.dim_in)), np.zeros((3, op.n_points)))


def test_single_finest_hat_slopes():
    J = 4
    op = so.StableOperator(J, "energy")
    frame = op.frames[0]
    k = 6  # node 7
    w = np.zeros(op.dim_in)
    w[frame.offsets[-2] + k] = 1.0
    samples = op.apply(w)[so.U_PRIME]
    slope = 2.0 ** J / frame.norms[-1][k]
    expected = np.zeros(op.n_points)
    expected[2 * 6:2 * 7] = slope
    expected[2 * 7:2 * 8] = -slope
    np.testing.assert_allclose(samples, expected, rtol=1e-14)


def test_apply_matches_synthesis_oracle(rng):
    J = 5
    op = so.StableOperator(J)
    mesh = build_mesh(J)
    w = rng.standard_normal(op.dim_in)
    w_u, w_s = op.split(w)
    samples = op.apply(w)
    np.testing.assert_allclose(samples[so.U_PRIME], _derivative_oracle(op.frames[0], w_u, mesh), atol=1e-12)
    np.testing.assert_allclose(samples[so.SIGMA], _value_oracle(op.frames[1], w_s, mesh), atol=1e-12)
    np.testing.assert_allclose(samples[so.SIGMA_PRIME], _derivative_oracle(op.frames[1], w_s, mesh), atol=1e-12)


def test_apply_is_batched(rng):
    op = so.StableOperator(3)
    w = rng.standard_normal((4, op.dim_in))
    batch = op.apply(w)
    for b in range(4):
        np.testing.assert_array_equal(batch[b], op.apply(w[b]))


@pytest.mark.parametrize("formulation", ["fosls", "energy"])
def test_adjoint_consistency(formulation):
    op = so.StableOperator(5, formulation)
    assert adjoint_mismatch(op.as_linear_operator(), trials=100, seed=11) <= 1e-12


def test_adjoint_of_unit_sample_is_row_of_dense_operator():
    op = so.StableOperator(3)
    dense = densify(op.as_linear_operator())
    s = np.zeros((op.n_components, op.n_points))
    s[so.SIGMA, 5] = 1.0
    np.testing.assert_allclose(so.apply_D_adjoint(op, s), dense[op.n_points + 5], atol=1e-14)
    np.testing.assert_array_equal(op.adjoint(np.zeros_like(s)), np.zeros(op.dim_in))


def test_overflowed_sample_only_reaches_its_own_coefficients():
    op = so.StableOperator(4)
    touching = densify(op.as_linear_operator())[0] != 0.0
    s = np.zeros((op.n_components, op.n_points), dtype=np.float16)
    s[so.U_PRIME, 0] = np.inf
    with np.errstate(invalid="ignore"):
        grad = op.adjoint(s)
    np.testing.assert_array_equal(~np.isfinite(grad), touching)


def test_adjoint_rejects_wrong_shape():
    op = so.StableOperator(3)
    with pytest.raises(UsageError):
        op.adjoint(np.zeros((2, op.n_points)))


def test_single_level_sampler():
    op = so.StableOperator(4, coarsest=4)
    assert op.dim_in == 15 + 17
    with pytest.raises(UsageError):
        so.StableOperator(4, coarsest=5)


def test_form_blocks_are_rank_one_plus_divergence(parameters):
    op = so.StableOperator(3)
    form = so.FormCy.build(op, parameters[0])
    blocks = form.blocks(0)
    eigenvalues = np.linalg.eigvalsh(blocks)
    assert np.all(eigenvalues[:, 0] > -1e-15)
    np.testing.assert_allclose(eigenvalues[:, 0], 0.0, atol=1e-15)


def test_dense_form_matches_apply(rng, parameters):
    op = so.StableOperator(3)
    form = so.FormCy.build(op, parameters[:1])
    s = rng.standard_normal((1, op.n_components, op.n_points))
    np.testing.assert_allclose(form.dense(0) @ s.reshape(-1), form.apply(s).reshape(-1), rtol=1e-12)


def test_stable_loss_of_zero_is_one():
    op = so.StableOperator(6)
    form = so.FormCy.build(op, (1.0, 1.0, 1.0, 1.0))
    for dtype in (np.float16, np.float32, np.float64):
        assert float(so.fosls_loss_stable(op, form, np.zeros(op.dim_in, dtype=dtype), 1.0)) == 1.0


def test_unstable_loss_of_zero_is_one():
    frames = so.frames_for("fosls", 6)
    form = so.NodalForm(6, "fosls", (1.0, 1.0, 1.0, 1.0))
    width = sum(frame.total_size for frame in frames)
    for dtype in (np.float16, np.float32, np.float64):
        assert float(so.fosls_loss_unstable(frames, form, np.zeros(width, dtype=dtype), 1.0)) == 1.0


def test_stable_loss_at_interpolant_is_small(unit_field):
    J = 6
    op = so.StableOperator(J)
    u, sigma = interpolate_exact(DiffusionField(unit_field), J)
    w = _finest_only(op, [fr.from_nodal(op.frames[0], u), fr.from_nodal(op.frames[1], sigma)])
    loss = so.fosls_loss_stable(op, so.FormCy.build(op, unit_field), w, 1.0)
    assert 0.0 < loss <= 4.0 ** -J


@pytest.mark.parametrize("formulation", ["fosls", "energy"])
def test_stable_and_unstable_losses_agree_in_binary64(formulation, rng):
    J = 5
    ys = sample_parameters(50, seed=21)
    op = so.StableOperator(J, formulation)
    frames = so.frames_for(formulation, J)
    form = so.FormCy.build(op, ys)
    nodal = so.NodalForm(J, formulation, ys)
    w = rng.standard_normal((50, op.dim_in))
    if formulation == "fosls":
        stable = so.fosls_loss_stable(op, form, w, 1.0)
        unstable = so.fosls_loss_unstable(frames, nodal, w, 1.0)
    else:
        stable = so.energy_loss_stable(op, form, w, 1.0)
        unstable = so.energy_loss_unstable(frames, nodal, w, 1.0)
    assert stable.shape == (50,)
    np.testing.assert_allclose(stable, unstable, rtol=1e-9)
    np.testing.assert_allclose(so.quadratic_form_stable(op, form, w), so.quadratic_form_unstable(frames, nodal, w),
                               rtol=1e-9)


@pytest.mark.parametrize("formulation", ["fosls", "energy"])
def test_stable_and_unstable_gradients_agree(formulation, rng, parameters):
    J = 4
    op = so.StableOperator(J, formulation)
    frames = so.frames_for(formulation, J)
    loss_stable = so.fosls_loss_stable if formulation == "fosls" else so.energy_loss_stable
    loss_unstable = so.fosls_loss_unstable if formulation == "fosls" else so.energy_loss_unstable
    form = so.FormCy.build(op, parameters[0])
    nodal = so.NodalForm(J, formulation, parameters[0])
    w = rng.standard_normal(op.dim_in)
    _, g_stable = loss_stable(op, form, w, 1.0, with_grad=True)
    _, g_unstable = loss_unstable(frames, nodal, w, 1.0, with_grad=True)
    np.testing.assert_allclose(g_stable, g_unstable, rtol=1e-9, atol=1e-9)


def test_stable_gradient_matches_finite_differences(rng, parameters):
    op = so.StableOperator(3)
    form = so.FormCy.build(op, parameters[1])
    w = rng.standard_normal(op.dim_in)
    _, grad = so.fosls_loss_stable(op, form, w, 1.0, with_grad=True)
    d = rng.standard_normal(op.dim_in)
    eps = 1e-6
    fd = (so.fosls_loss_stable(op, form, w + eps * d, 1.0) - so.fosls_loss_stable(op, form, w - eps * d, 1.0)) / (2 * eps)
    assert float(grad @ d) == pytest.approx(float(fd), rel=1e-6)


def test_unstable_nodal_loss_matches_assembled_system(rng, parameters):
    J = 4
    form = so.NodalForm(J, "energy", parameters[0], normalized=False)
    mesh = build_mesh(J)
    A = assemble_energy(mesh, DiffusionField(tuple(parameters[0])))
    v = rng.standard_normal(mesh.n_elements - 1)
    expected = 0.5 * v @ (A @ v) - assemble_load(mesh, 1.0, "H10") @ v
    assert float(so.energy_loss_unstable(None, form, v, 1.0)) == pytest.approx(float(expected), rel=1e-12)


def test_energy_minimum_for_unit_field(unit_field):
    J = 5
    op = so.StableOperator(J, "energy")
    field = DiffusionField(unit_field)
    u = solve_reference_energy(field, J)
    w = _finest_only(op, [fr.from_nodal(op.frames[0], u)])
    loss, grad = so.energy_loss_stable(op, so.FormCy.build(op, unit_field), w, 1.0, with_grad=True)
    load = assemble_load(build_mesh(J), 1.0, "H10")
    assert float(loss) == pytest.approx(-0.5 * float(load @ u), rel=1e-10)
    assert np.max(np.abs(grad)) <= 1e-10


def test_energy_quadratic_form_scales_with_coefficient(rng):
    op = so.StableOperator(4, "energy")
    w = rng.standard_normal(op.dim_in)
    q1 = so.quadratic_form_stable(op, so.FormCy.build(op, (1.0, 1.0, 1.0, 1.0)), w)
    q3 = so.quadratic_form_stable(op, so.FormCy.build(op, (3.0, 3.0, 3.0, 3.0)), w)
    assert float(q3) == pytest.approx(3.0 * float(q1), rel=1e-12)
    assert float(so.quadratic_form_stable(op, so.FormCy.build(op, (1.0, 1.0, 1.0, 1.0)), np.zeros(op.dim_in))) == 0.0


def test_residuals_reproduce_the_loss(rng, parameters):
    op = so.StableOperator(4)
    form = so.FormCy.build(op, parameters)
    w = rng.standard_normal((3, op.dim_in))
    r = so.fosls_residuals(op, form, w, 1.0)
    np.testing.assert_allclose(np.sum(r ** 2, axis=(1, 2)), so.fosls_loss_stable(op, form, w, 1.0), rtol=1e-12)


def test_residual_jvp_and_vjp_are_transposes(rng, parameters):
    op = so.StableOperator(4)
    form = so.FormCy.build(op, parameters)
    dw = rng.standard_normal((3, op.dim_in))
    dr = rng.standard_normal((3, 2, op.n_points))
    lhs = np.sum(so.residual_jvp(op, form, dw) * dr)
    rhs = np.sum(dw * so.residual_vjp(op, form, dr))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_stable_path_is_more_accurate_in_binary16():
    J = 10
    rng = np.random.default_rng(5)
    op = so.StableOperator(J)
    frames = so.frames_for("fosls", J)
    ratios = []
    for y in rng.uniform(0.5, 1.5, (15, 4)):
        form = so.FormCy.build(op, y)
        nodal = so.NodalForm(J, "fosls", y)
        w = rng.standard_normal(op.dim_in)
        w16 = (w / np.linalg.norm(w)).astype(np.float16)
        truth = float(so.quadratic_form_stable(op, form, w16.astype(np.float64)))
        err_stable = abs(float(so.quadratic_form_stable(op, form, w16)) - truth) / truth
        err_unstable = abs(float(so.quadratic_form_unstable(frames, nodal, w16)) - truth) / truth
        ratios.append(err_unstable / max(err_stable, 1e-300))
    assert np.median(ratios) >= 10.0


def test_loss_functions_check_the_formulation():
    op = so.StableOperator(3, "energy")
    form = so.FormCy.build(op, (1.0, 1.0, 1.0, 1.0))
    with pytest.raises(UsageError):
        so.fosls_loss_stable(op, form, np.zeros(op.dim_in))
    with pytest.raises(UsageError):
        so.Formulation.parse("ritz")
