"""Deterministic binary checkpoints.

Layout::

    b"GF2C" | u16 version | u16 reserved | u32 meta length | meta JSON | raw arrays | sha256(preceding bytes)

The JSON metadata (sorted keys, compact) holds the graph description and its
hash, calibrated quantizer parameters, per-block gradient normalization, the
training iteration and an index of the little-endian arrays that follow.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, GF2Error
from .nn.graph import NetworkGraph
from .quantizer import QuantParams

MAGIC = b"GF2C"
VERSION = 1
_HEAD = struct.Struct("<4sHHI")
_DIGEST = 32


@dataclass
class Checkpoint:
    graph: NetworkGraph
    iteration: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def graph_hash(self) -> str:
        return self.graph.graph_hash()

    def grad_norms(self) -> dict[str, float]:
        return {s.name: float(s.params.get("grad_norm", 1.0)) for s in self.graph.layers if s.kind == "binarize"}


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def to_bytes(ck: Checkpoint) -> bytes:
    g = ck.graph
    index, blobs, offset = [], [], 0
    for layer, key, arr in g.parameters():
        raw = _le(arr).tobytes()
        index.append({"layer": layer, "key": key, "dtype": _le(arr).dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = {
        "version": VERSION,
        "graph": g.describe(),
        "graph_hash": g.graph_hash(),
        "quant": {k: v.to_dict() for k, v in sorted(g.quant.items())},
        "grad_norm": ck.grad_norms(),
        "iteration": int(ck.iteration),
        "arrays": index,
        "extra": ck.extra,
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = _HEAD.pack(MAGIC, VERSION, 0, len(meta_raw)) + meta_raw + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, expect_hash: str | None = None) -> Checkpoint:
    if len(data) < _HEAD.size + _DIGEST:
        raise CheckpointError(f"checkpoint truncated: {len(data)} bytes")
    magic, version, reserved, meta_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION or reserved:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (file corrupted or truncated)")
    try:
        meta = json.loads(body[_HEAD.size:_HEAD.size + meta_len])
        g = NetworkGraph.from_description(meta["graph"])
    except (ValueError, KeyError, GF2Error) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from None
    if g.graph_hash() != meta["graph_hash"]:
        raise CheckpointError("stored graph hash does not match the stored graph")
    if expect_hash is not None and meta["graph_hash"] != expect_hash:
        raise CheckpointError(
            f"checkpoint graph {meta['graph_hash'][:12]} does not match the configured graph {expect_hash[:12]}"
        )
    arrays = body[_HEAD.size + meta_len:]
    for ent in meta["arrays"]:
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(arrays):
            raise CheckpointError(f"array {ent['layer']}.{ent['key']} runs past the end of the file")
        arr = np.frombuffer(arrays[lo:hi], dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
        g.weights.setdefault(ent["layer"], {})[ent["key"]] = arr
    g.quant = {k: QuantParams.from_dict(v) for k, v in meta["quant"].items()}
    for spec in g.layers:
        if spec.kind == "binarize" and spec.name in meta["grad_norm"]:
            spec.params["grad_norm"] = meta["grad_norm"][spec.name]
    try:
        g.check_weights()
    except GF2Error as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the graph: {exc}") from None
    return Checkpoint(g, int(meta["iteration"]), meta.get("extra", {}))


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), expect_hash)
