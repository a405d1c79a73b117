"""Layer kernels on NCHW numpy arrays: conv, transposed conv, pooling, ReLU, FC.

Integer inputs with integer weights accumulate in int64 and are bit-exact.
Every spatial op is "pad, then valid op", which is what lets the fused
executor compute single output rows from small input windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from ..tensor import as_tensor4d


@dataclass
class ConvParams:
    """Weights are (Cout, Cin, Hf, Wf) for both regular and transposed convs."""

    W: np.ndarray
    b: np.ndarray
    stride: int = 1
    pad: int = 0
    transposed: bool = False
    output_padding: int = 0

    def __post_init__(self):
        self.W = np.asarray(self.W)
        self.b = np.asarray(self.b)
        if self.W.ndim != 4 or min(self.W.shape) < 1:
            raise ShapeError(f"conv weights must be (Cout, Cin, Hf, Wf), got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bias shape {self.b.shape} != ({self.W.shape[0]},)")
        if self.stride < 1 or self.pad < 0 or self.output_padding < 0:
            raise ShapeError("stride must be >= 1 and padding non-negative")
        if self.pad >= max(self.W.shape[2], self.W.shape[3]):
            raise ShapeError(f"pad {self.pad} must be smaller than the kernel extent")

    @property
    def cout(self) -> int:
        return self.W.shape[0]

    @property
    def cin(self) -> int:
        return self.W.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.W.shape[2], self.W.shape[3]

    def copy(self) -> "ConvParams":
        return replace(self, W=self.W.copy(), b=self.b.copy())


@dataclass
class BatchNormParams:
    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + k + output_padding


def pool_out_size(size: int, k: int, stride: int, pad: int = 0, ceil_mode: bool = True) -> int:
    span = size + 2 * pad - k
    out = (math.ceil(span / stride) if ceil_mode else span // stride) + 1
    if pad and (out - 1) * stride >= size + pad:
        out -= 1
    return out


def _accum_dtype(x: np.ndarray, W: np.ndarray):
    xi = np.issubdtype(x.dtype, np.integer) or x.dtype == np.bool_
    wi = np.issubdtype(W.dtype, np.integer)
    if xi and wi:
        return np.int64
    floats = [a.dtype for a in (x, W) if np.issubdtype(a.dtype, np.floating)]
    return np.result_type(*floats)


def pad_hw(x: np.ndarray, top: int, bottom: int, left: int, right: int, fill=0) -> np.ndarray:
    if not (top or bottom or left or right):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=fill)


def _cols(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, Ho, Wo, C*kh*kw) patch matrix with channel-major, kernel-row-major columns."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)


# ---------------------------------------------------------------- convolution

def conv_valid(xp: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlation of an already padded input."""
    dt = _accum_dtype(xp, W)
    cout, cin, kh, kw = W.shape
    if xp.shape[1] != cin:
        raise ShapeError(f"input has {xp.shape[1]} channels, weights expect {cin}")
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"input {xp.shape[2:]} smaller than kernel {(kh, kw)}")
    cols = _cols(xp.astype(dt, copy=False), kh, kw, stride)
    out = cols @ W.reshape(cout, -1).astype(dt, copy=False).T + b.astype(dt, copy=False)
    return out.transpose(0, 3, 1, 2)


def conv_forward(x: np.ndarray, p: ConvParams, activation: str = "none") -> np.ndarray:
    if p.transposed:
        return deconv_forward(x, p, activation)
    x = as_tensor4d(x)
    kh, kw = p.kernel
    if conv_out_size(x.shape[2], kh, p.stride, p.pad) < 1 or conv_out_size(x.shape[3], kw, p.stride, p.pad) < 1:
        raise ShapeError(f"input {x.shape} too small for kernel {(kh, kw)} / pad {p.pad}")
    y = conv_valid(pad_hw(x, p.pad, p.pad, p.pad, p.pad), p.W, p.b, p.stride)
    return relu(y) if activation == "relu" else y


def conv_backward(upstream: np.ndarray, x: np.ndarray, p: ConvParams):
    """Gradients of the linear conv (no activation) -> (grad_x, grad_W, grad_b)."""
    if p.transposed:
        return deconv_backward(upstream, x, p)
    x = as_tensor4d(x)
    cout, cin, kh, kw = p.W.shape
    s, pad = p.stride, p.pad
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, kh, s, pad), conv_out_size(w, kw, s, pad)
    upstream = as_tensor4d(upstream)
    if c != cin or upstream.shape != (n, cout, ho, wo):
        raise ShapeError(f"upstream {upstream.shape} inconsistent with input {x.shape} and weights {p.W.shape}")
    dt = np.result_type(upstream.dtype, np.float32)
    xp = pad_hw(x.astype(dt, copy=False), pad, pad, pad, pad)
    g = upstream.astype(dt, copy=False).transpose(0, 2, 3, 1).reshape(-1, cout)
    cols = _cols(xp, kh, kw, s).reshape(-1, cin * kh * kw)
    gW = (g.T @ cols).reshape(p.W.shape)
    gb = g.sum(axis=0)
    dcols = (g @ p.W.reshape(cout, -1).astype(dt)).reshape(n, ho, wo, cin, kh, kw)
    gxp = np.zeros(xp.shape, dtype=dt)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + w]
    return gx, gW, gb


# ------------------------------------------------------- transposed convolution

def deconv_canvas(x: np.ndarray, W: np.ndarray, stride: int) -> np.ndarray:
    """Uncropped transposed-conv output without bias: (N, Cout, (H-1)s+kh, (W-1)s+kw)."""
    dt = _accum_dtype(x, W)
    cout, cin, kh, kw = W.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weights expect {cin}")
    xs = x.astype(dt, copy=False).transpose(0, 2, 3, 1).reshape(-1, cin)
    contrib = (xs @ W.astype(dt, copy=False).transpose(1, 0, 2, 3).reshape(cin, -1)).reshape(n, h, w, cout, kh, kw)
    canvas = np.zeros((n, cout, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += contrib[..., i, j].transpose(0, 3, 1, 2)
    return canvas


def _crop(canvas: np.ndarray, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, hc, wc = canvas.shape
    need_h, need_w = pad + ho, pad + wo
    if need_h > hc or need_w > wc:
        canvas = pad_hw(canvas, 0, max(0, need_h - hc), 0, max(0, need_w - wc))
    return canvas[:, :, pad:pad + ho, pad:pad + wo]


def deconv_forward(x: np.ndarray, p: ConvParams, activation: str = "none") -> np.ndarray:
    x = as_tensor4d(x)
    kh, kw = p.kernel
    ho = deconv_out_size(x.shape[2], kh, p.stride, p.pad, p.output_padding)
    wo = deconv_out_size(x.shape[3], kw, p.stride, p.pad, p.output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output would be empty for input {x.shape}")
    canvas = deconv_canvas(x, p.W, p.stride)
    y = _crop(canvas, p.pad, ho, wo) + p.b.astype(canvas.dtype).reshape(1, -1, 1, 1)
    return relu(y) if activation == "relu" else y


def deconv_backward(upstream: np.ndarray, x: np.ndarray, p: ConvParams):
    x = as_tensor4d(x)
    cout, cin, kh, kw = p.W.shape
    s = p.stride
    n, c, h, w = x.shape
    ho = deconv_out_size(h, kh, s, p.pad, p.output_padding)
    wo = deconv_out_size(w, kw, s, p.pad, p.output_padding)
    upstream = as_tensor4d(upstream)
    if c != cin or upstream.shape != (n, cout, ho, wo):
        raise ShapeError(f"upstream {upstream.shape} inconsistent with input {x.shape} and weights {p.W.shape}")
    dt = np.result_type(upstream.dtype, np.float32)
    hc, wc = (h - 1) * s + kh, (w - 1) * s + kw
    gcanvas = np.zeros((n, cout, max(hc, p.pad + ho), max(wc, p.pad + wo)), dtype=dt)
    gcanvas[:, :, p.pad:p.pad + ho, p.pad:p.pad + wo] = upstream
    gcontrib = np.empty((n, h, w, cout, kh, kw), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            gcontrib[..., i, j] = gcanvas[:, :, i:i + s * h:s, j:j + s * w:s].transpose(0, 2, 3, 1)
    gmat = gcontrib.reshape(-1, cout * kh * kw)
    wmat = p.W.astype(dt).transpose(1, 0, 2, 3).reshape(cin, -1)
    gx = (gmat @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
    xs = x.astype(dt).transpose(0, 2, 3, 1).reshape(-1, cin)
    gW = (xs.T @ gmat).reshape(cin, cout, kh, kw).transpose(1, 0, 2, 3)
    gb = upstream.astype(dt).sum(axis=(0, 2, 3))
    return gx, gW, gb


# ------------------------------------------------------------------- pooling

def _min_fill(dtype):
    return np.iinfo(dtype).min if np.issubdtype(dtype, np.integer) else -np.inf


def maxpool_pads(h: int, w: int, k: int, stride: int, pad: int = 0, ceil_mode: bool = True):
    ho, wo = pool_out_size(h, k, stride, pad, ceil_mode), pool_out_size(w, k, stride, pad, ceil_mode)
    bottom = max(0, (ho - 1) * stride + k - h - pad)
    right = max(0, (wo - 1) * stride + k - w - pad)
    return ho, wo, (pad, bottom, pad, right)


def maxpool_valid(xp: np.ndarray, k: int, stride: int):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def maxpool_forward(x: np.ndarray, window: int, stride: int, pad: int = 0, ceil_mode: bool = True):
    """Returns (y, argmax index); ties resolve to the first (row-major) position."""
    x = as_tensor4d(x)
    if window > x.shape[2] + 2 * pad or window > x.shape[3] + 2 * pad:
        raise ShapeError(f"pool window {window} larger than input {x.shape[2:]}")
    ho, wo, pads = maxpool_pads(x.shape[2], x.shape[3], window, stride, pad, ceil_mode)
    y, idx = maxpool_valid(pad_hw(x, *pads, fill=_min_fill(x.dtype)), window, stride)
    return y[:, :, :ho, :wo], idx[:, :, :ho, :wo]


def maxpool_backward(upstream: np.ndarray, x_shape, idx: np.ndarray, window: int, stride: int,
                     pad: int = 0, ceil_mode: bool = True) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo, (top, bottom, left, right) = maxpool_pads(h, w, window, stride, pad, ceil_mode)
    dt = np.result_type(upstream.dtype, np.float32)
    gxp = np.zeros((n, c, h + top + bottom, w + left + right), dtype=dt)
    for i in range(window):
        for j in range(window):
            hit = idx == i * window + j
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(hit, upstream, 0)
    return gxp[:, :, top:top + h, left:left + w]


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    x = as_tensor4d(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(
        x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def global_avgpool_backward(upstream: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(upstream / (h * w), (n, c, h, w)).astype(upstream.dtype)


# ---------------------------------------------------------------- activations

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def relu_backward(upstream: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, upstream, 0).astype(upstream.dtype, copy=False)


# ----------------------------------------------------------- fully connected

def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = as_tensor4d(x)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != W.shape[1]:
        raise ShapeError(f"fc expects {W.shape[1]} inputs, got {flat.shape[1]}")
    dt = _accum_dtype(x, W)
    y = flat.astype(dt, copy=False) @ W.astype(dt, copy=False).T + b.astype(dt, copy=False)
    return y.reshape(x.shape[0], W.shape[0], 1, 1)


def fc_backward(upstream: np.ndarray, x: np.ndarray, W: np.ndarray):
    g = upstream.reshape(upstream.shape[0], -1)
    flat = x.reshape(x.shape[0], -1).astype(g.dtype, copy=False)
    gx = (g @ W.astype(g.dtype)).reshape(x.shape)
    return gx, g.T @ flat, g.sum(axis=0)


# ------------------------------------------------------------ batch norm folding

def batchnorm_forward(x: np.ndarray, bn: BatchNormParams) -> np.ndarray:
    shape = (1, -1, 1, 1)
    inv = bn.gamma / np.sqrt(bn.var + bn.eps)
    return (x - bn.mean.reshape(shape)) * inv.reshape(shape) + bn.beta.reshape(shape)


def fold_batchnorm(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Merge frozen batch-norm statistics into conv weights and bias."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (bn.mean, bn.var, bn.gamma, bn.beta)]
    if not all(np.isfinite(a).all() for a in arrays):
        raise ShapeError("batch-norm statistics must be finite")
    mean, var, gamma, beta = arrays
    if (var < 0).any() or (var + bn.eps <= 0).any():
        raise ShapeError("batch-norm variance + eps must be positive")
    if mean.shape != (conv.cout,):
        raise ShapeError(f"batch-norm has {mean.shape} channels, conv has {conv.cout}")
    factor = gamma / np.sqrt(var + bn.eps)
    dt = conv.W.dtype if np.issubdtype(conv.W.dtype, np.floating) else np.float64
    W = conv.W * factor.reshape(-1, 1, 1, 1)
    b = (conv.b - mean) * factor + beta
    return replace(conv, W=W.astype(dt), b=b.astype(dt))
