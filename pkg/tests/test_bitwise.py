import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gf2cnn.errors import GraphError, ShapeError
from gf2cnn.nn.bitwise import bitwise_forward, export_bitwise, ternarize
from gf2cnn.nn.compression import binary_step
from gf2cnn.nn.ops import ConvParams, conv_forward


def test_ternarize_by_hand():
    t, alpha = ternarize(np.array([[1.0, -0.8, 0.2, 0.5]]).reshape(1, 4, 1, 1))
    np.testing.assert_array_equal(t.ravel(), [1, -1, 0, 0])
    assert alpha[0] == pytest.approx(0.9)


@settings(max_examples=40, deadline=None)
@given(cin=st.integers(1, 150), cout=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_bitwise_matches_float_reference(cin, cout, seed):
    rng = np.random.default_rng(seed)
    p = ConvParams(rng.normal(size=(cout, cin, 1, 1)), rng.normal(scale=0.5, size=cout))
    layer, ref_w = export_bitwise(p)
    planes = rng.integers(0, 2, (2, cin, 3, 3)).astype(np.uint8)
    want = binary_step(conv_forward(planes.astype(np.float64), ConvParams(ref_w, p.b)))
    np.testing.assert_array_equal(bitwise_forward(layer, planes), want)


def test_identity_layer_is_exact():
    p = ConvParams(np.eye(5).reshape(5, 5, 1, 1), np.zeros(5))
    layer, _ = export_bitwise(p)
    planes = np.random.default_rng(0).integers(0, 2, (1, 5, 4, 4)).astype(np.uint8)
    np.testing.assert_array_equal(bitwise_forward(layer, planes), planes)


def test_export_rejects_spatial_layers():
    with pytest.raises(GraphError):
        export_bitwise(ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), pad=1))


def test_channel_mismatch():
    layer, _ = export_bitwise(ConvParams(np.ones((1, 2, 1, 1)), np.zeros(1)))
    with pytest.raises(ShapeError):
        bitwise_forward(layer, np.zeros((1, 3, 2, 2), np.uint8))
