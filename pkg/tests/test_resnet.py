import numpy as np
import pytest

from surrogate_services.errors import UsageError
from surrogate_services.networks import resnet
from surrogate_services.networks.schemas import ArchitectureKind, ArchitectureSpec


def _spec(kind="full", J=3, **overrides) -> ArchitectureSpec:
    params = {"blocks": 2, "subnet_blocks": 2, "level_blocks": 1, "rank": 3}
    params.update(overrides)
    return ArchitectureSpec(kind=ArchitectureKind(kind), J=J, **params)


def _theta(network, seed=0, spread=0.3):
    """Random parameters with nonzero biases so every term of the chain rule is active."""
    return np.random.default_rng(seed).normal(0.0, spread, network.param_count)


ALL_KINDS = ["full", "separate_resnet", "separate_frame"]


def test_silu_values():
    assert resnet.silu(np.array(0.0)) == 0.0
    assert float(resnet.silu(np.array(1.0))) == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), rel=1e-15)
    assert float(resnet.silu(np.array(-30.0))) == pytest.approx(-30.0 * np.exp(-30.0), rel=1e-9)
    assert resnet.silu(np.ones(3, dtype=np.float16)).dtype == np.float16


def test_silu_prime_matches_finite_differences():
    x = np.linspace(-5.0, 5.0, 41)
    eps = 1e-6
    fd = (resnet.silu(x + eps) - resnet.silu(x - eps)) / (2 * eps)
    np.testing.assert_allclose(resnet.silu_prime(x), fd, atol=1e-9)


def test_xavier_statistics():
    draws = resnet.xavier_init(100, 1000, np.random.default_rng(3))
    std = np.sqrt(2.0 / 1100)
    assert draws.std() == pytest.approx(std, rel=0.03)
    assert abs(draws.mean()) <= 5 * std / np.sqrt(draws.size)
    np.testing.assert_array_equal(resnet.xavier_init(4, 5, np.random.default_rng(9)),
                                  resnet.xavier_init(4, 5, np.random.default_rng(9)))


def test_layout_round_trip():
    network = resnet.build_network(_spec())
    theta = _theta(network)
    named = network.layout.unflatten(theta)
    np.testing.assert_array_equal(network.layout.flatten(named), theta)
    assert named["net.W0"].shape == (network.out_dim, 4)
    assert named["net.block0.A"].shape == (network.out_dim, 3)
    with pytest.raises(UsageError):
        network.layout.unflatten(theta[:-1])


def test_output_dimensions():
    J = 3
    frame_out = resnet.build_network(_spec(J=J)).out_dim
    assert frame_out == (1 + 3 + 7) + (3 + 5 + 9)
    assert resnet.build_network(_spec(J=J, output="nodal")).out_dim == 7 + 9
    assert resnet.build_network(_spec(J=J, formulation="energy")).out_dim == 11


def test_nodal_output_rejects_frame_chains():
    with pytest.raises(ValueError):
        ArchitectureSpec(kind=ArchitectureKind.separate_frame, J=3, output="nodal")


@pytest.mark.parametrize("kind, expected", [
    ("full", 577036), ("separate_resnet", 577140), ("separate_frame", 551336),
])
def test_parameter_counts_at_level_ten(kind, expected):
    spec = ArchitectureSpec(kind=ArchitectureKind(kind), J=10)
    assert abs(resnet.param_count(spec) - expected) <= 0.1 * expected


@pytest.mark.parametrize("kind, expected", [("full", 577036), ("separate_resnet", 577140)])
def test_output_bias_parameter_counts(kind, expected):
    spec = ArchitectureSpec(kind=ArchitectureKind(kind), J=10, output_bias=True)
    assert resnet.param_count(spec) == expected


def test_init_params_are_seeded_and_rounded_once():
    network = resnet.build_network(_spec())
    a = network.init_params(5)
    np.testing.assert_array_equal(a, network.init_params(5))
    assert not np.array_equal(a, network.init_params(6))
    np.testing.assert_array_equal(network.init_params(5, dtype=np.float16), a.astype(np.float16))
    named = network.layout.unflatten(a)
    assert np.all(named["net.b0"] == 0.0)
    assert np.all(named["net.block1.b"] == 0.0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_zero_residual_branches_leave_the_input_layer(kind):
    network = resnet.build_network(_spec(kind, output_bias=True))
    theta = network.zero_residual_branches(_theta(network))
    y = np.array([0.7, 1.2, 0.9, 1.4])
    out = network.forward(theta, y)
    p = network.layout.unflatten(theta)
    for chain in network.chains:
        z = resnet.silu(p[f"{chain.prefix}.W0"] @ y + p[f"{chain.prefix}.b0"])
        for op in chain.ops:
            if isinstance(op, resnet._Prolong):
                z = resnet.fr.prolongate(op.frame, op.level, z)
        np.testing.assert_allclose(out[chain.out_offset:chain.out_offset + chain.out_size], z,
                                   rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_forward_is_batch_consistent(kind):
    network = resnet.build_network(_spec(kind))
    theta = _theta(network)
    ys = np.random.default_rng(1).uniform(0.5, 1.5, (8, 4))
    batch = network.forward(theta, ys)
    for k in range(8):
        np.testing.assert_allclose(batch[k], network.forward(theta, ys[k]), rtol=1e-13, atol=1e-15)


def test_forward_runs_in_the_dtype_of_theta():
    network = resnet.build_network(_spec())
    theta = network.init_params(0, dtype=np.float32)
    assert network.forward(theta, np.ones(4)).dtype == np.float32


def test_forward_rejects_bad_inputs():
    network = resnet.build_network(_spec())
    theta = network.init_params(0)
    with pytest.raises(UsageError):
        network.forward(theta, np.ones(3))
    with pytest.raises(UsageError):
        network.backward(theta, np.ones(4), np.ones(network.out_dim + 1))


def test_backward_of_zero_cotangent_is_zero():
    network = resnet.build_network(_spec())
    theta = _theta(network)
    grad = network.backward(theta, np.ones((2, 4)), np.zeros((2, network.out_dim)))
    np.testing.assert_array_equal(grad, np.zeros(network.param_count))


def test_backward_of_input_layer_only():
    network = resnet.build_network(_spec(blocks=0))
    theta = _theta(network)
    y = np.array([0.6, 0.8, 1.1, 1.3])
    c = np.random.default_rng(2).standard_normal(network.out_dim)
    p = network.layout.unflatten(theta)
    pre = p["net.W0"] @ y + p["net.b0"]
    grad = network.layout.unflatten(network.backward(theta, y, c))
    np.testing.assert_allclose(grad["net.W0"], np.outer(c * resnet.silu_prime(pre), y), rtol=1e-13)
    np.testing.assert_allclose(grad["net.b0"], c * resnet.silu_prime(pre), rtol=1e-13)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_backward_matches_finite_differences(kind):
    network = resnet.build_network(_spec(kind, output_bias=True))
    rng = np.random.default_rng(4)
    theta = _theta(network)
    ys = rng.uniform(0.5, 1.5, (2, 4))
    c = rng.standard_normal((2, network.out_dim))
    d = rng.standard_normal(network.param_count)
    grad = network.backward(theta, ys, c)
    eps = 1e-6
    plus = np.sum(network.forward(theta + eps * d, ys) * c)
    minus = np.sum(network.forward(theta - eps * d, ys) * c)
    assert float(grad @ d) == pytest.approx((plus - minus) / (2 * eps), rel=1e-6)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_jvp_and_backward_are_transposes(kind):
    network = resnet.build_network(_spec(kind))
    rng = np.random.default_rng(8)
    theta = _theta(network)
    ys = rng.uniform(0.5, 1.5, (3, 4))
    for _ in range(100):
        d = rng.standard_normal(network.param_count)
        c = rng.standard_normal((3, network.out_dim))
        _, tangent = network.jvp(theta, ys, d)
        lhs = np.sum(tangent * c)
        rhs = d @ network.backward(theta, ys, c)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_jvp_matches_forward_and_finite_differences():
    spec = _spec("separate_frame")
    network = resnet.build_network(spec)
    rng = np.random.default_rng(6)
    theta = _theta(network)
    y = rng.uniform(0.5, 1.5, 4)
    d = rng.standard_normal(network.param_count)
    out, tangent = network.jvp(theta, y, d)
    np.testing.assert_array_equal(out, network.forward(theta, y))
    eps = 1e-5
    fd = (network.forward(theta + eps * d, y) - network.forward(theta - eps * d, y)) / (2 * eps)
    np.testing.assert_allclose(tangent, fd, rtol=1e-6, atol=1e-8)
    np.testing.assert_array_equal(resnet.jvp(spec, theta, y, np.zeros_like(d)), np.zeros(network.out_dim))


def test_networks_are_cached_per_descriptor():
    assert resnet.build_network(_spec()) is resnet.build_network(_spec())
