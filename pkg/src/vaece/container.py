"""Named-tensor container shared by VAE and GMM checkpoints.

Layout (little-endian)::

    magic        4 bytes   b"CVAE" or b"CGMM"
    version      u16       currently 1
    meta_len     u32       length of the metadata block
    meta         bytes     UTF-8 JSON object (train config, architecture, ...)
    count        u32       number of tensors
    count x tensor:
        name_len u16
        name     bytes     UTF-8
        rank     u8
        dims     u32 x rank
        payload  f64 x prod(dims)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, UnsupportedVersionError

VERSION = 1


def write_container(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()

    def need(off, n, what):
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", offset=off)

    need(0, 10, "header")
    if data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}", offset=0)
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", offset=4)
    off = 10
    need(off, meta_len, "metadata")
    try:
        meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}", offset=off) from exc
    off += meta_len
    need(off, 4, "tensor count")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        need(off, 2, "tensor name length")
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        need(off, name_len + 1, "tensor name")
        name = data[off : off + name_len].decode("utf-8", errors="replace")
        off += name_len
        rank = data[off]
        off += 1
        need(off, 4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        need(off, 8 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor", offset=off)
    return meta, tensors
