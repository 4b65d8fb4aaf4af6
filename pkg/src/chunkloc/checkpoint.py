"""Versioned binary checkpoints: named float64 parameter blocks, little-endian.

Reload is bit-exact; metadata (temperature, architecture switches) travels in
a JSON header so numeric payloads stay raw.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, blocks: dict[str, np.ndarray], meta: dict) -> None:
    payload = bytearray()
    payload += struct.pack("<4sI", MAGIC, VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(meta_bytes)) + meta_bytes
    payload += struct.pack("<I", len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        payload += struct.pack("<H", len(name_bytes)) + name_bytes
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    offset = 0

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {offset}")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    magic, version = take("<4sI")
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_blocks,) = take("<I")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = take("<H")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        size = count * 8
        if offset + size > len(raw):
            raise CheckpointError(f"truncated block {name!r} at byte {offset}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        blocks[name] = arr.astype(np.float64)
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after last block")
    return blocks, meta
