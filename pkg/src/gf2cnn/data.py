"""Dataset ingestion: MNIST IDX files and a seeded synthetic image set."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class DatasetSource:
    kind: str
    images: np.ndarray   # uint8 (N, C, H, W)
    labels: np.ndarray   # int64 (N,)
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def floats(self) -> np.ndarray:
        """Pixels scaled to [0, 1]."""
        return self.images.astype(np.float32) / 255.0

    def centered(self) -> np.ndarray:
        """Pixels scaled to [-1, 1], the network input convention."""
        return self.images.astype(np.float32) / 127.5 - 1.0

    def split(self, n_first: int) -> tuple["DatasetSource", "DatasetSource"]:
        a = DatasetSource(self.kind, self.images[:n_first], self.labels[:n_first], self.classes)
        b = DatasetSource(self.kind, self.images[n_first:], self.labels[n_first:], self.classes)
        return a, b


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def parse_idx(data: bytes, magic: int, name: str = "idx") -> np.ndarray:
    """Decode one IDX payload of unsigned bytes; errors name the failing byte offset."""
    if len(data) < 4:
        raise DataError(f"{name}: truncated header at offset {len(data)} (need 4 magic bytes)")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise DataError(f"{name}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise DataError(f"{name}: truncated dimension header at offset {len(data)} (need {end} bytes)")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) < end + count:
        raise DataError(
            f"{name}: payload truncated at offset {len(data)}; expected {count} bytes from offset {end}"
        )
    if len(data) > end + count:
        raise DataError(f"{name}: {len(data) - end - count} trailing bytes after offset {end + count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=end).reshape(dims)


def load_mnist_idx(images_path, labels_path, classes: int = 10) -> DatasetSource:
    images = parse_idx(_read(images_path), IMAGE_MAGIC, str(images_path))
    labels = parse_idx(_read(labels_path), LABEL_MAGIC, str(labels_path))
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected a 3-d image array, got {images.ndim}-d")
    return DatasetSource("mnist-idx", images[:, None].copy(), labels.astype(np.int64), classes)


def write_idx(path, array: np.ndarray) -> None:
    """Inverse of :func:`parse_idx` for unsigned byte arrays (fixtures, exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def gen_synthetic(seed: int, n: int, classes: int = 10, shape=(1, 32, 32), noise: float = 40.0,
                  contrast: float = 60.0) -> DatasetSource:
    """Oriented gratings with a random phase, one orientation/frequency pair per class,
    over a faint class template, plus pixel noise; stored as uint8.

    The same seed always yields identical bytes.
    """
    if n < classes:
        raise DataError(f"need at least one sample per class: n={n} < classes={classes}")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    coarse = rng.standard_normal((classes, c, -(-h // 8), -(-w // 8)))
    templates = np.kron(coarse, np.ones((1, 1, 8, 8)))[:, :, :h, :w]
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    angles = np.pi * (np.arange(classes) // 2) / max(1, (classes + 1) // 2)
    freqs = np.where(np.arange(classes) % 2 == 0, 0.12, 0.24)
    labels = rng.permutation(np.arange(n) % classes)
    phase = rng.uniform(0, 2 * np.pi, n)
    yy, xx = np.mgrid[0:h, 0:w]
    t = labels
    arg = 2 * np.pi * freqs[t, None, None] * (xx[None] * np.cos(angles[t])[:, None, None]
                                              + yy[None] * np.sin(angles[t])[:, None, None])
    grating = np.cos(arg + phase[:, None, None])[:, None]
    pix = 128.0 + contrast * (grating + 0.25 * templates[t]) + noise * rng.standard_normal((n, c, h, w))
    images = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    return DatasetSource("synthetic", images, labels.astype(np.int64), classes)
