import gzip
import struct

import numpy as np
import pytest

from gf2cnn.data import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    DatasetSource,
    gen_synthetic,
    load_mnist_idx,
    parse_idx,
    write_idx,
)
from gf2cnn.errors import DataError


def _idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_parse_image_header_and_payload():
    raw = _idx_bytes(IMAGE_MAGIC, (2, 2, 3), range(12))
    arr = parse_idx(raw, IMAGE_MAGIC)
    assert arr.shape == (2, 2, 3) and arr.dtype == np.uint8
    assert arr[1, 1, 2] == 11


def test_bad_magic_names_offset_zero():
    raw = _idx_bytes(LABEL_MAGIC, (3,), [0, 1, 2])
    with pytest.raises(DataError, match="offset 0"):
        parse_idx(raw, IMAGE_MAGIC)


def test_truncated_payload_names_offset():
    raw = _idx_bytes(IMAGE_MAGIC, (1, 2, 2), [1, 2, 3])
    with pytest.raises(DataError, match="offset 19"):
        parse_idx(raw, IMAGE_MAGIC)


def test_truncated_header():
    with pytest.raises(DataError, match="offset 2"):
        parse_idx(b"\x00\x00", IMAGE_MAGIC)
    with pytest.raises(DataError, match="offset 8"):
        parse_idx(struct.pack(">II", IMAGE_MAGIC, 1), IMAGE_MAGIC)


def test_trailing_bytes_rejected():
    with pytest.raises(DataError):
        parse_idx(_idx_bytes(LABEL_MAGIC, (2,), [1, 2, 3]), LABEL_MAGIC)


def test_load_mnist_files_with_gzip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (5, 28, 28)).astype(np.uint8)
    labels = np.array([0, 9, 3, 3, 1], np.uint8)
    write_idx(tmp_path / "img.idx", imgs)
    (tmp_path / "lab.idx.gz").write_bytes(gzip.compress(_idx_bytes(LABEL_MAGIC, (5,), labels)))
    ds = load_mnist_idx(tmp_path / "img.idx", tmp_path / "lab.idx.gz")
    assert ds.images.shape == (5, 1, 28, 28)
    np.testing.assert_array_equal(ds.images[:, 0], imgs)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.floats().max() <= 1.0 and ds.floats().min() >= 0.0


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_mnist_idx(tmp_path / "a", tmp_path / "b")


def test_write_idx_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "x", arr)
    np.testing.assert_array_equal(parse_idx((tmp_path / "x").read_bytes(), IMAGE_MAGIC), arr)


def test_dataset_invariants():
    with pytest.raises(DataError):
        DatasetSource("x", np.zeros((2, 1, 2, 2), np.uint8), np.zeros(3, np.int64), 10)
    with pytest.raises(DataError):
        DatasetSource("x", np.zeros((1, 1, 2, 2), np.uint8), np.array([10]), 10)


def test_synthetic_is_deterministic():
    a, b = gen_synthetic(0, 50), gen_synthetic(0, 50)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert gen_synthetic(1, 50).images.tobytes() != a.images.tobytes()


def test_synthetic_one_sample_per_class():
    ds = gen_synthetic(3, 10, classes=10)
    assert sorted(ds.labels.tolist()) == list(range(10))
    with pytest.raises(DataError):
        gen_synthetic(0, 9, classes=10)


def test_synthetic_class_means_are_distinct():
    ds = gen_synthetic(0, 2000)
    means = np.stack([ds.images[ds.labels == k].astype(float).mean(axis=0).ravel() for k in range(10)])
    d = np.linalg.norm(means[:, None] - means[None], axis=2)
    assert (d[~np.eye(10, dtype=bool)] > 1.0).all()


def test_centered_range():
    x = gen_synthetic(0, 20).centered()
    assert x.min() >= -1.0 and x.max() <= 1.0
