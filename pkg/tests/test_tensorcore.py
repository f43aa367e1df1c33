import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from stochff.tensorcore import MomentTensor, ShapeError, as_tensor, check_shape, lift_to_moments, tensor_new


def test_tensor_new_zero_fill():
    t = tensor_new([2], 0)
    assert t.dtype == np.float64
    np.testing.assert_array_equal(t, [0.0, 0.0])


def test_tensor_new_constant_fill():
    t = tensor_new([1, 2, 2], 1.5)
    assert t.shape == (1, 2, 2)
    assert t.size == 4 and np.all(t == 1.5)


@pytest.mark.parametrize("dims", [[0], [1, 0, 3], [], [2, 2], [1, 1, 1, 1], [-1]])
def test_bad_shapes_rejected(dims):
    with pytest.raises(ShapeError):
        tensor_new(dims, 0.0)


def test_check_shape_returns_tuple():
    assert check_shape([3, 4, 5]) == (3, 4, 5)


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        as_tensor([np.inf])


def test_lift_zero_noise():
    m = lift_to_moments(np.array([3.0]), 0)
    np.testing.assert_array_equal(m.mean, [3.0])
    np.testing.assert_array_equal(m.variance, [0.0])


def test_lift_constant_variance():
    m = lift_to_moments(np.array([1.0, 2.0]), 0.1)
    np.testing.assert_array_equal(m.mean, [1.0, 2.0])
    np.testing.assert_array_equal(m.variance, [0.1, 0.1])


def test_lift_negative_variance():
    with pytest.raises(ValueError):
        lift_to_moments(np.array([5.0]), -1)


def test_moment_tensor_checks():
    with pytest.raises(ShapeError):
        MomentTensor(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        MomentTensor(np.zeros(2), np.array([0.0, -1e-3]))
    m = MomentTensor(np.zeros((2, 3, 3)), np.ones((2, 3, 3)))
    assert m.shape == (2, 3, 3)
    assert m.nbytes == 2 * 18 * 8


finite = st.floats(-1e6, 1e6, allow_nan=False)
shapes = st.one_of(hnp.array_shapes(min_dims=1, max_dims=1, max_side=8),
                   hnp.array_shapes(min_dims=3, max_dims=3, max_side=5))


@given(hnp.arrays(np.float64, shapes, elements=finite), st.floats(0, 100))
def test_lift_round_trip_bit_exact(x, sigma2):
    m = lift_to_moments(x, sigma2)
    assert m.mean.tobytes() == x.tobytes()
    assert m.shape == x.shape
    assert np.all(m.variance == sigma2)
