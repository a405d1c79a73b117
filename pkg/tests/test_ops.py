import numpy as np
import pytest

from _oracles import central_diff, naive_conv, naive_deconv, naive_maxpool
from gf2cnn.errors import ShapeError
from gf2cnn.nn import ops
from gf2cnn.nn.ops import BatchNormParams, ConvParams


def test_identity_1x1_conv():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    p = ConvParams(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    np.testing.assert_array_equal(ops.conv_forward(x, p), x)


def test_zero_input_gives_bias():
    p = ConvParams(np.ones((2, 1, 3, 3)), np.array([1.5, -2.0]), pad=1)
    y = ops.conv_forward(np.zeros((1, 1, 4, 4)), p, "relu")
    np.testing.assert_array_equal(y[0, 0], np.full((4, 4), 1.5))
    np.testing.assert_array_equal(y[0, 1], np.zeros((4, 4)))


@pytest.mark.parametrize("stride, pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_six_loop_reference(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, W, b = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    got = ops.conv_forward(x, ConvParams(W, b, stride, pad))
    np.testing.assert_allclose(got, naive_conv(x, W, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_integer_conv_is_exact():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 256, (2, 3, 6, 6)).astype(np.uint8)
    W = rng.integers(-3, 4, (4, 3, 3, 3)).astype(np.int32)
    b = rng.integers(-10, 10, 4).astype(np.int32)
    got = ops.conv_forward(x, ConvParams(W, b, 1, 1))
    assert np.issubdtype(got.dtype, np.integer)
    np.testing.assert_array_equal(got, naive_conv(x.astype(np.int64), W.astype(np.int64), b.astype(np.int64), 1, 1))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv_forward(np.zeros((1, 2, 4, 4)), ConvParams(np.zeros((1, 3, 1, 1)), np.zeros(1)))


def test_conv_params_validation():
    with pytest.raises(ShapeError):
        ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1), pad=3)


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 4, 4))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), 1, 1)
    gx, gW, gb = ops.conv_backward(np.zeros((1, 3, 4, 4)), x, p)
    assert not gx.any() and not gW.any() and not gb.any()


def test_conv_backward_single_pixel_identity():
    p = ConvParams(np.eye(2).reshape(2, 2, 1, 1), np.zeros(2))
    up = np.zeros((1, 2, 3, 3))
    up[0, 1, 2, 0] = 1.0
    gx, _, _ = ops.conv_backward(up, np.zeros((1, 2, 3, 3)), p)
    np.testing.assert_array_equal(gx, up)


def _fd_check(forward, backward, x, W, b, seed):
    rng = np.random.default_rng(seed)
    probe = rng.normal(size=forward().shape)
    loss = lambda: float((forward() * probe).sum())
    gx, gW, gb = backward(probe)
    for ana, arr in ((gx, x), (gW, W), (gb, b)):
        num = central_diff(loss, arr, 1e-4)
        np.testing.assert_allclose(ana, num, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("stride, pad, k", [(1, 1, 3), (2, 1, 3), (2, 0, 2)])
def test_conv_backward_finite_differences(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x, W, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    p = ConvParams(W, b, stride, pad)
    _fd_check(lambda: ops.conv_forward(x, p), lambda up: ops.conv_backward(up, x, p), x, W, b, 1)


@pytest.mark.parametrize("k, pad, op", [(2, 0, 0), (3, 1, 1), (3, 1, 0)])
def test_deconv_matches_scatter_reference(k, pad, op):
    rng = np.random.default_rng(k + op)
    x, W, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, k, k)), rng.normal(size=2)
    p = ConvParams(W, b, 2, pad, transposed=True, output_padding=op)
    np.testing.assert_allclose(ops.conv_forward(x, p), naive_deconv(x, W, b, 2, pad, op), rtol=1e-12, atol=1e-12)


def test_deconv_restores_56():
    x = np.zeros((1, 1, 56, 56))
    down = ops.conv_forward(x, ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1), 2))
    up = ops.conv_forward(down, ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1), 2, transposed=True))
    assert down.shape[2:] == (28, 28) and up.shape[2:] == (56, 56)


def test_delta_conv_deconv_reconstructs_subsampled_map():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    delta = np.zeros((1, 1, 2, 2))
    delta[0, 0, 0, 0] = 1.0
    down = ops.conv_forward(x, ConvParams(delta, np.zeros(1), 2))
    up = ops.conv_forward(down, ConvParams(delta, np.zeros(1), 2, transposed=True))
    want = np.zeros_like(x)
    want[:, :, ::2, ::2] = x[:, :, ::2, ::2]
    np.testing.assert_array_equal(up, want)


@pytest.mark.parametrize("k, pad, op", [(2, 0, 0), (3, 1, 1)])
def test_deconv_backward_finite_differences(k, pad, op):
    rng = np.random.default_rng(7)
    x, W, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 2, k, k)), rng.normal(size=2)
    p = ConvParams(W, b, 2, pad, transposed=True, output_padding=op)
    _fd_check(lambda: ops.conv_forward(x, p), lambda up: ops.conv_backward(up, x, p), x, W, b, 2)


def test_maxpool_basic():
    y, _ = ops.maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert y.item() == 4.0


def test_maxpool_first_index_tie_break():
    x = np.ones((1, 1, 2, 2))
    _, idx = ops.maxpool_forward(x, 2, 2)
    assert idx.item() == 0
    g = ops.maxpool_backward(np.ones((1, 1, 1, 1)), x.shape, idx, 2, 2)
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_matches_reference_ceil_mode():
    x = np.random.default_rng(0).normal(size=(2, 3, 7, 7))
    y, _ = ops.maxpool_forward(x, 3, 2)
    np.testing.assert_array_equal(y, naive_maxpool(x, 3, 2))


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        ops.maxpool_forward(np.zeros((1, 1, 2, 2)), 3, 1)


def test_maxpool_backward_finite_differences():
    x = np.random.default_rng(1).permutation(np.arange(50.0)).reshape(1, 2, 5, 5)  # distinct: no ties
    y, idx = ops.maxpool_forward(x, 3, 2)
    probe = np.random.default_rng(2).normal(size=y.shape)
    num = central_diff(lambda: float((ops.maxpool_forward(x, 3, 2)[0] * probe).sum()), x, 1e-4)
    np.testing.assert_allclose(ops.maxpool_backward(probe, x.shape, idx, 3, 2), num, atol=1e-8)


def test_avgpool_and_backward():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    y = ops.global_avgpool_forward(x)
    np.testing.assert_allclose(y[..., 0, 0], x.mean(axis=(2, 3)))
    probe = np.random.default_rng(1).normal(size=y.shape)
    num = central_diff(lambda: float((ops.global_avgpool_forward(x) * probe).sum()), x, 1e-4)
    np.testing.assert_allclose(ops.global_avgpool_backward(probe, x.shape), num, atol=1e-9)


def test_fc_forward_backward():
    rng = np.random.default_rng(3)
    x, W, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(5, 12)), rng.normal(size=5)
    y = ops.fc_forward(x, W, b)
    np.testing.assert_allclose(y[:, :, 0, 0], x.reshape(2, -1) @ W.T + b)
    probe = rng.normal(size=y.shape)
    gx, gW, gb = ops.fc_backward(probe, x, W)
    loss = lambda: float((ops.fc_forward(x, W, b) * probe).sum())
    np.testing.assert_allclose(gx, central_diff(loss, x, 1e-4), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gW, central_diff(loss, W, 1e-4), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, central_diff(loss, b, 1e-4), rtol=1e-6, atol=1e-9)


def test_relu_backward_gates():
    pre = np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(ops.relu_backward(np.ones_like(pre), pre).ravel(), [0, 0, 1])


def test_fold_identity_bn():
    rng = np.random.default_rng(0)
    p = ConvParams(rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2))
    bn = BatchNormParams(np.zeros(2), np.ones(2), np.ones(2), np.zeros(2), eps=0.0)
    f = ops.fold_batchnorm(p, bn)
    np.testing.assert_array_equal(f.W, p.W)
    np.testing.assert_array_equal(f.b, p.b)


def test_fold_gamma_two_doubles_weights():
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    f = ops.fold_batchnorm(p, BatchNormParams(np.zeros(1), np.ones(1), np.full(1, 2.0), np.zeros(1), eps=0.0))
    assert f.W.item() == 2.0


def test_fold_matches_conv_then_bn():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 5, 5))
    p = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 1, 1)
    bn = BatchNormParams(rng.normal(size=4), rng.uniform(0.1, 2, 4), rng.normal(size=4), rng.normal(size=4))
    ref = ops.batchnorm_forward(ops.conv_forward(x, p), bn)
    np.testing.assert_allclose(ops.conv_forward(x, ops.fold_batchnorm(p, bn)), ref, rtol=1e-5, atol=1e-9)


def test_fold_rejects_bad_variance():
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        ops.fold_batchnorm(p, BatchNormParams(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1), eps=0.0))
    with pytest.raises(ShapeError):
        ops.fold_batchnorm(p, BatchNormParams(np.zeros(1), np.array([np.nan]), np.ones(1), np.zeros(1)))
