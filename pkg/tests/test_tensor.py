import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gf2cnn.errors import ShapeError
from gf2cnn.tensor import Shape, as_tensor4d, concat_channels, shape_of, split_channels


def test_concat_shape_arithmetic():
    out = concat_channels(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))
    assert out.shape == (1, 5, 3, 3)


def test_concat_of_zeros():
    z = np.zeros((1, 1, 2, 2))
    np.testing.assert_array_equal(concat_channels(z, z), np.zeros((1, 2, 2, 2)))


def test_concat_placement():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 4, 4))
    out = concat_channels(a, b)
    np.testing.assert_array_equal(out[:, 0], a[:, 0])
    np.testing.assert_array_equal(out[:, 3], b[:, 0])


@pytest.mark.parametrize("b_shape", [(1, 2, 3, 4), (2, 2, 3, 3), (1, 2, 4, 3)])
def test_concat_rejects_mismatch(b_shape):
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 2, 3, 3)), np.zeros(b_shape))


def test_concat_rejects_dtype_change():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 1, 2, 2), np.int32), np.zeros((1, 1, 2, 2), np.float32))


def test_split_inverts_concat():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 2, 2))
    a, b = split_channels(x, 2)
    np.testing.assert_array_equal(concat_channels(a, b), x)


@pytest.mark.parametrize("at", [0, 3, -1])
def test_split_out_of_range(at):
    with pytest.raises(ShapeError):
        split_channels(np.ones((1, 3, 1, 1)), at)


def test_split_ones():
    a, b = split_channels(np.ones((1, 3, 1, 1)), 1)
    assert a.shape == (1, 1, 1, 1) and b.shape == (1, 2, 1, 1)
    assert (a == 1).all() and (b == 1).all()


def test_rank_check_and_shape():
    with pytest.raises(ShapeError):
        as_tensor4d(np.zeros((2, 2)))
    s = shape_of(np.zeros((2, 3, 4, 5)))
    assert s == Shape(2, 3, 4, 5) and s.numel == 120


@settings(max_examples=50, deadline=None)
@given(ca=st.integers(1, 4), cb=st.integers(1, 4), h=st.integers(1, 4),
       dtype=st.sampled_from([np.float32, np.float64, np.int32, np.uint8]))
def test_concat_split_round_trip_all_dtypes(ca, cb, h, dtype):
    rng = np.random.default_rng(ca * 31 + cb)
    a = rng.integers(0, 100, (2, ca, h, 3)).astype(dtype)
    b = rng.integers(0, 100, (2, cb, h, 3)).astype(dtype)
    out = concat_channels(a, b)
    assert out.dtype == dtype
    a2, b2 = split_channels(out, ca)
    np.testing.assert_array_equal(a2, a)
    np.testing.assert_array_equal(b2, b)
