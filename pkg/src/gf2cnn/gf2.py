"""Bit-plane codec between B-bit activation codes and GF(2) feature maps.

Layout: logical channel ``c * B + k`` holds bit-plane ``k`` (weight ``2**k``)
of base channel ``c``. Packed storage is LSB-first within each byte over the
row-major (N, B*C, H, W) logical array.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CodecError
from .quantizer import CODE_DTYPE
from .tensor import as_tensor4d

MAGIC = b"GF2T"
VERSION = 1
_HEADER = struct.Struct("<4sBBH4I")
HEADER_SIZE = _HEADER.size


def bit_basis(bits: int) -> np.ndarray:
    return (1 << np.arange(bits, dtype=np.int64)).astype(np.int64)


@dataclass(frozen=True)
class BitTensor:
    shape: tuple[int, int, int, int]
    bits: int
    payload: bytes

    def __post_init__(self):
        n, c, h, w = self.shape
        if not 1 <= self.bits <= 16:
            raise CodecError(f"bits must be in 1..16, got {self.bits}")
        if c % self.bits:
            raise CodecError(f"logical channels {c} not divisible by bits {self.bits}")
        if len(self.payload) != math.ceil(n * c * h * w / 8):
            raise CodecError(
                f"payload has {len(self.payload)} bytes, expected {math.ceil(n * c * h * w / 8)}"
            )

    @property
    def base_channels(self) -> int:
        return self.shape[1] // self.bits

    @property
    def numel(self) -> int:
        n, c, h, w = self.shape
        return n * c * h * w

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def unpack(self) -> np.ndarray:
        return unpack_bits(self)


def _dense(bits, nbits: int | None = None) -> tuple[np.ndarray, int]:
    if isinstance(bits, BitTensor):
        return bits.unpack(), bits.bits
    if nbits is None:
        raise CodecError("dense bit-plane input needs an explicit bit count")
    return as_tensor4d(bits), nbits


def pack_bits(logical: np.ndarray, bits: int = 1) -> BitTensor:
    logical = as_tensor4d(logical)
    if logical.size and not np.isin(logical, (0, 1)).all():
        raise CodecError("pack_bits input must contain only 0 and 1")
    flat = logical.astype(np.uint8, copy=False).reshape(-1)
    payload = np.packbits(flat, bitorder="little").tobytes()
    return BitTensor(tuple(int(d) for d in logical.shape), bits, payload)


def unpack_bits(t: BitTensor) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(t.payload, dtype=np.uint8), count=t.numel, bitorder="little")
    return flat.reshape(t.shape)


def to_planes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Dense {0,1} uint8 planes with shape (N, B*C, H, W)."""
    codes = as_tensor4d(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise CodecError(
            f"codes outside [0, {(1 << bits) - 1}] for {bits}-bit binarization"
        )
    n, c, h, w = codes.shape
    ints = codes.astype(np.int64)
    planes = (ints[:, :, None] >> np.arange(bits).reshape(1, 1, bits, 1, 1)) & 1
    return planes.reshape(n, c * bits, h, w).astype(np.uint8)


def from_planes(planes: np.ndarray, bits: int) -> np.ndarray:
    planes = as_tensor4d(planes)
    n, bc, h, w = planes.shape
    if bc % bits:
        raise CodecError(f"{bc} logical channels not divisible by {bits} bits")
    grouped = planes.reshape(n, bc // bits, bits, h, w).astype(np.int64)
    weights = bit_basis(bits).reshape(1, 1, bits, 1, 1)
    return (grouped * weights).sum(axis=2).astype(CODE_DTYPE)


def binarize(codes: np.ndarray, bits: int) -> BitTensor:
    return pack_bits(to_planes(codes, bits), bits)


def debinarize(t: BitTensor | np.ndarray, bits: int | None = None) -> np.ndarray:
    planes, nbits = _dense(t, bits)
    return from_planes(planes, nbits)


def debinarize_backward(upstream: np.ndarray, forward_bits, bits: int | None = None) -> np.ndarray:
    """Gate the code gradient onto every set bit of the forward planes."""
    planes, nbits = _dense(forward_bits, bits)
    upstream = as_tensor4d(upstream)
    n, bc, h, w = planes.shape
    if upstream.shape != (n, bc // nbits, h, w):
        raise CodecError(f"upstream {upstream.shape} does not match planes {planes.shape}")
    spread = np.repeat(upstream, nbits, axis=1)
    return np.where(planes > 0, spread, 0).astype(upstream.dtype, copy=False)


def binarize_backward(plane_grads: np.ndarray, forward_bits, norm: float = 1.0,
                      bits: int | None = None) -> np.ndarray:
    """Sum each code's bit-plane gradients and divide by the static ``norm``."""
    if not norm > 0:
        raise CodecError(f"gradient normalization must be positive, got {norm}")
    planes, nbits = _dense(forward_bits, bits)
    plane_grads = as_tensor4d(plane_grads)
    if plane_grads.shape != planes.shape:
        raise CodecError(f"plane gradient {plane_grads.shape} != planes {planes.shape}")
    n, bc, h, w = plane_grads.shape
    summed = plane_grads.reshape(n, bc // nbits, nbits, h, w).sum(axis=2)
    return (summed / norm).astype(plane_grads.dtype, copy=False)


def estimate_grad_norm(samples: Iterable) -> float:
    """Mean number of set bits per code position, floored at 1.

    Items are BitTensors or ``(planes, bits)`` pairs.
    """
    total = 0
    count = 0
    for s in samples:
        planes, nbits = (s.unpack(), s.bits) if isinstance(s, BitTensor) else (as_tensor4d(s[0]), s[1])
        total += int(planes.sum(dtype=np.int64))
        count += planes.size // nbits
    if count == 0:
        raise CodecError("cannot estimate gradient normalization from an empty stream")
    return max(1.0, total / count)


def to_blob(t: BitTensor) -> bytes:
    n, c, h, w = t.shape
    return _HEADER.pack(MAGIC, VERSION, t.bits, 0, n, c // t.bits, h, w) + t.payload


def from_blob(data: bytes) -> BitTensor:
    if len(data) < HEADER_SIZE:
        raise CodecError(f"blob truncated: {len(data)} bytes < {HEADER_SIZE}-byte header")
    magic, version, bits, reserved, n, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported GF2T version {version}")
    if bits == 0 or reserved:
        raise CodecError("malformed GF2T header")
    payload = bytes(data[HEADER_SIZE:])
    numel = n * c * bits * h * w
    if len(payload) != math.ceil(numel / 8):
        raise CodecError(f"payload is {len(payload)} bytes, header implies {math.ceil(numel / 8)}")
    if numel % 8 and payload[-1] >> (numel % 8):
        raise CodecError("nonzero padding bits in final payload byte")
    return BitTensor((n, c * bits, h, w), bits, payload)


def save_blob(path, t: BitTensor) -> None:
    Path(path).write_bytes(to_blob(t))


def load_blob(path) -> BitTensor:
    return from_blob(Path(path).read_bytes())
