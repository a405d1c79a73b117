"""Uniform fixed-point activation quantization.

Codes are ``round(x / scale)`` clamped into the code domain, with ties rounded
half away from zero. Bit-exact tests depend on that tie rule, so do not swap
it for numpy's default banker's rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import QuantError

CODE_DTYPE = np.int32


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    signed: bool = False

    def __post_init__(self):
        if not 1 <= int(self.bits) <= 16:
            raise QuantError(f"bits must be in 1..16, got {self.bits}")
        if self.signed and self.bits < 2:
            raise QuantError("signed quantization needs at least 2 bits")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise QuantError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    @property
    def max_representable(self) -> float:
        return self.qmax * self.scale

    def to_dict(self) -> dict:
        return {"bits": int(self.bits), "scale": float(self.scale), "signed": bool(self.signed)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(int(d["bits"]), float(d["scale"]), bool(d.get("signed", False)))


def _levels(bits: int, signed: bool) -> int:
    return (1 << (bits - 1)) - 1 if signed else (1 << bits) - 1


def calibrate(samples: Iterable[np.ndarray], bits: int, signed: bool = False) -> QuantParams:
    """Absolute-max calibration over a stream of activation batches."""
    peak = 0.0
    seen = False
    for s in samples:
        s = np.asarray(s)
        if s.size:
            seen = True
            peak = max(peak, float(np.max(np.abs(s))))
    if not seen or peak == 0.0:
        raise QuantError("calibration stream is empty or all-zero; scale would be degenerate")
    levels = _levels(bits, signed)
    if levels <= 0:
        raise QuantError(f"no positive levels for bits={bits}, signed={signed}")
    return QuantParams(bits, peak / levels, signed)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x: np.ndarray, p: QuantParams) -> np.ndarray:
    scaled = np.asarray(x, dtype=np.float64) / p.scale
    return np.clip(round_half_away(scaled), p.qmin, p.qmax).astype(CODE_DTYPE)


def dequantize(codes: np.ndarray, p: QuantParams, dtype=np.float32) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < p.qmin or codes.max() > p.qmax):
        raise QuantError(
            f"codes outside [{p.qmin}, {p.qmax}]: min={codes.min()}, max={codes.max()}"
        )
    return (codes.astype(np.float64) * p.scale).astype(dtype)


def in_range_mask(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """True where the clamp in :func:`quantize` is inactive."""
    scaled = np.asarray(x, dtype=np.float64) / p.scale
    return (scaled > p.qmin - 0.5) & (scaled < p.qmax + 0.5)


def quantize_backward(upstream: np.ndarray, x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Clipped straight-through gradient of ``dequantize(quantize(x))``.

    ``upstream`` is expressed in real (dequantized) units.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != np.shape(x):
        raise QuantError(f"gradient shape {upstream.shape} != input shape {np.shape(x)}")
    return np.where(in_range_mask(x, p), upstream, 0).astype(upstream.dtype)
