"""Rank-4 (N, C, H, W) tensors as plain numpy arrays, plus channel algebra."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeError


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def numel(self) -> int:
        return self.n * self.c * self.h * self.w


def as_tensor4d(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 NCHW tensor, got shape {arr.shape}")
    return arr


def shape_of(x: np.ndarray) -> Shape:
    return Shape(*as_tensor4d(x).shape)


def is_integer(x: np.ndarray) -> bool:
    return np.issubdtype(np.asarray(x).dtype, np.integer)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor4d(a), as_tensor4d(b)
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch in concat: {a.dtype} vs {b.dtype}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, at: int) -> tuple[np.ndarray, np.ndarray]:
    x = as_tensor4d(x)
    if not 0 < at < x.shape[1]:
        raise ShapeError(f"split point {at} outside (0, {x.shape[1]})")
    return x[:, :at].copy(), x[:, at:].copy()
