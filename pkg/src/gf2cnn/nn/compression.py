"""Learned compression / decompression over GF(2) bit-plane feature maps.

A block projects the (N, B*C, H, W) bit planes through P convs down to a
stored binary map and reconstructs B*C planes through R convs. Every stack
ends in ReLU followed by a 1-bit quantizer (threshold 0.5) so both the stored
map and the reconstruction stay in {0, 1}; the backward pass is the clipped
straight-through gradient of that quantizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import GraphError, ShapeError
from ..gf2 import BitTensor, pack_bits
from ..quantizer import QuantParams, in_range_mask, quantize
from .ops import (
    ConvParams,
    conv_backward,
    conv_forward,
    deconv_out_size,
    conv_out_size,
    relu,
    relu_backward,
)

BIT = QuantParams(bits=1, scale=1.0)

# mode -> (kernel, stride, pad) of the single P layer; R mirrors it transposed
MODES = {
    "1x1": (1, 1, 0),
    "3x3s2": (3, 2, 1),
    "2x2s2": (2, 2, 0),
}


@dataclass
class CompressionBlock:
    bits: int
    channels: int
    compressed_channels: int
    mode: str = "1x1"
    P_layers: list[ConvParams] = field(default_factory=list)
    R_layers: list[ConvParams] = field(default_factory=list)
    grad_norm: float = 1.0

    @property
    def logical_channels(self) -> int:
        return self.bits * self.channels


def layer_geometry(mode: str, height: int, width: int | None = None) -> tuple[dict, dict]:
    """Hyper-parameters for the P conv and the R transposed conv of ``mode``."""
    if mode not in MODES:
        raise GraphError(f"unknown compression mode {mode!r}; expected one of {sorted(MODES)}")
    k, s, pad = MODES[mode]
    width = height if width is None else width
    p_geom = dict(kernel=k, stride=s, pad=pad, transposed=False, output_padding=0)
    if s == 1:
        return p_geom, dict(p_geom)
    ops = []
    for size in (height, width):
        small = conv_out_size(size, k, s, pad)
        ops.append(size - deconv_out_size(small, k, s, pad, 0))
    if ops[0] != ops[1] or not 0 <= ops[0] < s:
        raise GraphError(
            f"{mode} compression cannot restore a {height}x{width} map (residual {ops})"
        )
    return p_geom, dict(kernel=k, stride=s, pad=pad, transposed=True, output_padding=ops[0])


def make_block(bits: int, channels: int, compressed_channels: int, mode: str = "1x1",
               height: int = 2, width: int | None = None, init: str = "identity",
               noise: float = 1e-3, rng: np.random.Generator | None = None,
               dtype=np.float32) -> CompressionBlock:
    p_geom, r_geom = layer_geometry(mode, height, width)
    bc = bits * channels
    if not 1 <= compressed_channels <= bc:
        raise GraphError(f"compressed channels {compressed_channels} outside 1..{bc}")
    k = p_geom["kernel"]
    P = ConvParams(np.zeros((compressed_channels, bc, k, k), dtype), np.zeros(compressed_channels, dtype),
                   p_geom["stride"], p_geom["pad"])
    R = ConvParams(np.zeros((bc, compressed_channels, k, k), dtype), np.zeros(bc, dtype),
                   r_geom["stride"], r_geom["pad"], r_geom["transposed"], r_geom["output_padding"])
    block = CompressionBlock(bits, channels, compressed_channels, mode, [P], [R])
    if init == "identity":
        return identity_init(block)
    if init == "delta":
        return delta_init(block, noise, rng or np.random.default_rng(0))
    raise GraphError(f"unknown compression init {init!r}")


def identity_init(block: CompressionBlock) -> CompressionBlock:
    """Truncated identity: P keeps the lowest C~ logical bit-channels, R = P^T."""
    if block.mode != "1x1" or len(block.P_layers) != 1 or len(block.R_layers) != 1:
        raise GraphError("identity initialization is defined only for single-layer 1x1 blocks")
    P, R = block.P_layers[0], block.R_layers[0]
    ct, bc = block.compressed_channels, block.logical_channels
    eye = np.eye(ct, bc, dtype=P.W.dtype)
    P = ConvParams(eye.reshape(ct, bc, 1, 1).copy(), np.zeros(ct, P.W.dtype))
    R = ConvParams(eye.T.reshape(bc, ct, 1, 1).copy(), np.zeros(bc, R.W.dtype))
    return CompressionBlock(block.bits, block.channels, ct, block.mode, [P], [R], block.grad_norm)


def delta_init(block: CompressionBlock, noise: float, rng: np.random.Generator) -> CompressionBlock:
    """Stride-aligned delta kernels plus small uniform noise (spatial modes)."""
    out = CompressionBlock(block.bits, block.channels, block.compressed_channels, block.mode,
                           [p.copy() for p in block.P_layers], [r.copy() for r in block.R_layers],
                           block.grad_norm)
    for layers in (out.P_layers, out.R_layers):
        for p in layers:
            k = p.kernel[0]
            centre = p.pad if k > 1 else 0
            n = min(p.cout, p.cin)
            p.W[...] = rng.uniform(-noise, noise, p.W.shape).astype(p.W.dtype) if noise else 0
            p.W[np.arange(n), np.arange(n), centre, centre] += 1
            p.b[...] = 0
    return out


def binary_step(pre: np.ndarray) -> np.ndarray:
    """ReLU followed by the 1-bit quantizer: 1 where pre >= 0.5."""
    return quantize(relu(pre), BIT).astype(np.uint8)


def binary_step_backward(upstream: np.ndarray, pre: np.ndarray) -> np.ndarray:
    g = np.where(in_range_mask(relu(pre), BIT), upstream, 0).astype(upstream.dtype, copy=False)
    return relu_backward(g, pre)


def stack_forward(x: np.ndarray, layers: list[ConvParams], keep: bool = False):
    """Run a P or R stack. Intermediate layers get ReLU, the last one the binary step."""
    caches = []
    h = x
    for i, p in enumerate(layers):
        pre = conv_forward(h, p)
        if keep:
            caches.append((h, pre))
        h = binary_step(pre) if i == len(layers) - 1 else relu(pre)
    return h, caches


def stack_backward(upstream: np.ndarray, layers: list[ConvParams], caches):
    grads = [None] * len(layers)
    g = upstream.astype(np.float32) if not np.issubdtype(upstream.dtype, np.floating) else upstream
    for i in reversed(range(len(layers))):
        x, pre = caches[i]
        g = binary_step_backward(g, pre) if i == len(layers) - 1 else relu_backward(g, pre)
        g, gW, gb = conv_backward(g, x, layers[i])
        grads[i] = (gW, gb)
    return g, grads


def compress_block_forward(x: BitTensor, block: CompressionBlock) -> tuple[BitTensor, BitTensor]:
    if x.shape[1] != block.logical_channels:
        raise ShapeError(
            f"bit tensor has {x.shape[1]} logical channels, block expects {block.logical_channels}"
        )
    planes = x.unpack()
    stored, _ = stack_forward(planes, block.P_layers)
    recon, _ = stack_forward(stored, block.R_layers)
    if recon.shape != planes.shape:
        raise ShapeError(f"reconstruction {recon.shape} does not restore input {planes.shape}")
    return pack_bits(stored, 1), pack_bits(recon, block.bits)


def stored_bits(block: CompressionBlock, height: int, width: int) -> int:
    """Bits kept per sample for an H x W input map."""
    h, w = height, width
    for q in block.P_layers:
        h = conv_out_size(h, q.kernel[0], q.stride, q.pad)
        w = conv_out_size(w, q.kernel[1], q.stride, q.pad)
    return block.P_layers[-1].cout * h * w


def compression_ratio(block: CompressionBlock, height: int, width: int) -> float:
    return block.logical_channels * height * width / stored_bits(block, height, width)


def is_genuine(block: CompressionBlock, height: int, width: int) -> bool:
    return stored_bits(block, height, width) < block.logical_channels * height * width


def compressed_channels_for(bits_budget: int, channels: int) -> int:
    """C~ that stores ``bits_budget`` bits per base channel."""
    return int(math.ceil(bits_budget * channels))
