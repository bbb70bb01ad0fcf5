"""Tests for the seeded random stream."""

import math

import numpy as np
import pytest

from dpvger.errors import NumericError, NumericErrorCode
from dpvger.rng import RngState, gaussian, splitmix64


def test_splitmix64_reference_value() -> None:
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_xoshiro_reference_outputs() -> None:
    rng = RngState.from_state((1, 2, 3, 4))
    assert [rng.next_u64() for _ in range(4)] == [
        11520,
        0,
        1509978240,
        1215971899390074240,
    ]


def test_from_state_rejects_all_zero() -> None:
    with pytest.raises(NumericError):
        RngState.from_state((0, 0, 0, 0))


def test_same_seed_same_stream() -> None:
    a = RngState(42)
    b = RngState(42)
    assert [a.next_u64() for _ in range(10)] == [b.next_u64() for _ in range(10)]
    assert np.array_equal(a.gaussian(3, 4), b.gaussian(3, 4))


def test_different_seeds_differ() -> None:
    assert RngState(1).next_u64() != RngState(2).next_u64()


def test_uniform_range() -> None:
    values = RngState(5).uniforms(2000)
    assert values.min() >= 0.0
    assert values.max() < 1.0


def test_uniform_uses_top_53_bits() -> None:
    raw = RngState(9).next_u64()
    assert RngState(9).uniform() == (raw >> 11) * 2.0**-53


def test_gaussian_follows_box_muller_contract() -> None:
    u = RngState(11).uniforms(6)
    expected = []
    for i in range(3):
        u1, u2 = u[2 * i], u[2 * i + 1]
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        expected.extend([r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)])
    got = RngState(11).gaussian(2, 3)
    assert got.shape == (2, 3)
    np.testing.assert_allclose(got.reshape(-1), expected, rtol=1e-13, atol=1e-15)


def test_odd_tail_discards_second_value() -> None:
    a = RngState(3)
    a.gaussian(1, 3)
    b = RngState(3)
    b.uniforms(4)
    assert a.next_u64() == b.next_u64()


def test_gaussian_shape_and_moments() -> None:
    sample = gaussian(RngState(21), 100, 100)
    assert sample.shape == (100, 100)
    assert abs(float(sample.mean())) < 0.05
    assert abs(float(sample.std()) - 1.0) < 0.05


@pytest.mark.parametrize("rows, cols", [(0, 3), (3, 0)])
def test_gaussian_rejects_empty_shape(rows: int, cols: int) -> None:
    with pytest.raises(NumericError) as exc:
        RngState(0).gaussian(rows, cols)
    assert exc.value.code == NumericErrorCode.INVALID_ARGUMENT


def test_split_consumes_one_draw_and_seeds_child() -> None:
    parent = RngState(8)
    raw = RngState(8).next_u64()
    child = parent.split()
    assert child.seed == splitmix64(raw)
    reference = RngState(8)
    reference.next_u64()
    assert parent.next_u64() == reference.next_u64()


def test_split_children_are_independent_of_each_other() -> None:
    parent = RngState(8)
    first = parent.split()
    second = parent.split()
    assert first.next_u64() != second.next_u64()


def test_permutation_is_a_permutation() -> None:
    order = RngState(4).permutation(50)
    assert sorted(order.tolist()) == list(range(50))
    assert np.array_equal(order, RngState(4).permutation(50))


def test_below_is_in_range() -> None:
    rng = RngState(6)
    assert all(0 <= rng.below(7) < 7 for _ in range(200))
    with pytest.raises(NumericError):
        rng.below(0)
