"""Fully-bitwise inference for 1x1 layers over GF(2) maps: AND + popcount + threshold.

Real weights are rounded to ternary {-alpha, 0, +alpha} per output channel;
the layer then needs only two bit masks per output and an integer threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import GraphError, ShapeError
from .ops import ConvParams


@dataclass
class BitwiseLayer:
    pos: np.ndarray        # (Cout, words) uint64 masks of +1 weights
    neg: np.ndarray        # (Cout, words) uint64 masks of -1 weights
    threshold: np.ndarray  # (Cout,) int64: output bit = (pos - neg popcount) >= threshold
    cin: int

    @property
    def cout(self) -> int:
        return self.pos.shape[0]


def ternarize(W: np.ndarray, ratio: float = 0.5):
    """Per-output ternary weights: sign(w) where |w| > ratio * max|w|, scaled by the kept mean."""
    flat = W.reshape(W.shape[0], -1).astype(np.float64)
    peak = np.abs(flat).max(axis=1, keepdims=True)
    keep = np.abs(flat) > ratio * peak
    t = np.sign(flat) * keep
    kept = keep.sum(axis=1)
    alpha = np.where(kept > 0, (np.abs(flat) * keep).sum(axis=1) / np.maximum(kept, 1), 0.0)
    return t.astype(np.int8), alpha


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """(R, C) {0,1} -> (R, ceil(C/64)) uint64, bit i of word j is column 64*j + i."""
    r, c = bits.shape
    words = math.ceil(c / 64)
    padded = np.zeros((r, words * 64), np.uint8)
    padded[:, :c] = bits
    return np.packbits(padded, axis=1, bitorder="little").view(np.uint64)


def export_bitwise(p: ConvParams, threshold: float = 0.5, ratio: float = 0.5) -> tuple[BitwiseLayer, np.ndarray]:
    """Export a 1x1 P/R layer; also returns the ternary weights it realizes (float reference)."""
    if p.transposed or p.kernel != (1, 1) or p.stride != 1 or p.pad != 0:
        raise GraphError("bitwise export supports plain 1x1 stride-1 layers only")
    t, alpha = ternarize(p.W, ratio)
    b = p.b.astype(np.float64)
    # alpha * s + b >= threshold  <=>  s >= ceil((threshold - b) / alpha) for alpha > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        thr = np.where(alpha > 0, np.ceil((threshold - b) / np.where(alpha > 0, alpha, 1) - 1e-12),
                       np.where(b >= threshold, -(1 << 40), 1 << 40))
    layer = BitwiseLayer(_pack_rows((t == 1).astype(np.uint8)), _pack_rows((t == -1).astype(np.uint8)),
                         thr.astype(np.int64), p.cin)
    ref = (t.astype(np.float64) * alpha[:, None]).reshape(p.W.shape)
    return layer, ref


def bitwise_forward(layer: BitwiseLayer, planes: np.ndarray) -> np.ndarray:
    """(N, Cin, H, W) {0,1} -> (N, Cout, H, W) {0,1} using only AND and popcount."""
    n, c, h, w = planes.shape
    if c != layer.cin:
        raise ShapeError(f"bitwise layer expects {layer.cin} channels, got {c}")
    pix = planes.transpose(0, 2, 3, 1).reshape(-1, c)
    words = _pack_rows(pix.astype(np.uint8))                      # (P, words)
    pos = np.bitwise_count(words[:, None, :] & layer.pos[None]).sum(axis=2, dtype=np.int64)
    neg = np.bitwise_count(words[:, None, :] & layer.neg[None]).sum(axis=2, dtype=np.int64)
    out = (pos - neg >= layer.threshold[None]).astype(np.uint8)
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2)
