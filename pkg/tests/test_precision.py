import numpy as np
import pytest

from surrogate_services.errors import UsageError
from surrogate_services.numerics.precision import (
    ScalarKind, arith, is_finite, ordered_sum, round_to, round_to_emulated, tree_sum,
)


@pytest.mark.parametrize("name, kind", [
    ("f16", ScalarKind.binary16),
    ("binary32", ScalarKind.binary32),
    ("double", ScalarKind.binary64),
    (ScalarKind.binary16, ScalarKind.binary16),
])
def test_parse_accepts_aliases(name, kind):
    assert ScalarKind.parse(name) is kind


def test_parse_rejects_unknown_name():
    with pytest.raises(UsageError):
        ScalarKind.parse("bfloat16")


def test_format_parameters():
    assert ScalarKind.binary16.eps == 2.0 ** -10
    assert ScalarKind.binary16.max_finite == 65504.0
    assert ScalarKind.binary16.min_subnormal == 2.0 ** -24
    assert ScalarKind.binary32.max_finite == float(np.finfo(np.float32).max)
    assert ScalarKind.binary64.eps == float(np.finfo(np.float64).eps)


@pytest.mark.parametrize("value, expected", [(1.0, 1.0), (2049.0, 2048.0), (1e-8, 0.0)])
def test_round_to_binary16(value, expected):
    assert float(round_to(ScalarKind.binary16, value)) == expected
    assert float(round_to_emulated(ScalarKind.binary16, value)) == expected


def test_round_to_overflows_to_infinity():
    assert np.isinf(round_to(ScalarKind.binary16, 70000.0))
    assert np.isinf(round_to_emulated(ScalarKind.binary16, -70000.0))


@pytest.mark.parametrize("kind", [ScalarKind.binary16, ScalarKind.binary32])
def test_emulated_rounding_agrees_with_hardware(kind, rng):
    x = np.concatenate([rng.standard_normal(2000) * 10.0 ** rng.integers(-9, 5, 2000),
                        [0.0, -0.0, 0.5 * kind.min_subnormal, kind.max_finite]])
    native = round_to(kind, x).astype(np.float64)
    emulated = round_to_emulated(kind, x)
    np.testing.assert_array_equal(native, emulated)


def test_arith_binary16_absorbs_below_spacing():
    assert float(arith(ScalarKind.binary16, "+", 2048.0, 1.0)) == 2048.0


def test_arith_binary32_cancellation():
    assert float(arith(ScalarKind.binary32, "-", 1.0 + 2.0 ** -24, 1.0)) == 0.0


@pytest.mark.parametrize("kind", list(ScalarKind))
def test_arith_adding_zero_is_identity(kind):
    assert float(arith(kind, "+", 0.375, 0.0)) == 0.375


def test_arith_rejects_unknown_operator():
    with pytest.raises(UsageError):
        arith(ScalarKind.binary32, "%", 1.0, 2.0)


def test_ordered_sum_rounds_every_partial_sum():
    x = np.array([2048.0] + [1.0] * 8, dtype=np.float16)
    # each 2048 + 1 rounds back to 2048
    assert float(ordered_sum(x)) == 2048.0


def test_tree_sum_pairs_neighbours():
    x = np.array([2048.0] + [1.0] * 7, dtype=np.float16)
    # 2048 + 1 ties to 2048, the remaining pairs add exactly: 2048 + 2 + 2 + 2
    assert float(tree_sum(x)) == 2054.0
    assert tree_sum(x).dtype == np.float16


def test_sums_of_empty_axis_are_zero():
    empty = np.zeros((3, 0), dtype=np.float32)
    np.testing.assert_array_equal(ordered_sum(empty), np.zeros(3, dtype=np.float32))
    np.testing.assert_array_equal(tree_sum(empty), np.zeros(3, dtype=np.float32))


def test_tree_sum_matches_exact_sum_in_binary64(rng):
    x = rng.standard_normal((4, 37))
    np.testing.assert_allclose(tree_sum(x, axis=1), x.sum(axis=1), rtol=1e-13)


def test_is_finite():
    assert is_finite(np.ones(3, dtype=np.float16))
    assert not is_finite([1.0, np.nan])
    assert not is_finite(np.float16(np.inf))
