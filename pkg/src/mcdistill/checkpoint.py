"""Binary tensor container.

Layout (all integers little-endian)::

    magic       8 bytes  b"MCDTENS\\x00"
    version     u32      FORMAT_VERSION
    count       u32      number of tensor records
    meta_len    u32      length of the UTF-8 JSON manifest (0 = none)
    meta        meta_len bytes
    count x record:
        name_len  u32, name (UTF-8)
        rank      u32
        shape     rank x u64
        payload   prod(shape) x f64 (little-endian)

Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MCDTENS\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8") if meta else b""
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, len(tensors), len(meta_bytes)), meta_bytes]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic)")
    pos = 8
    version, count, meta_len = struct.unpack_from("<III", buf, pos)
    pos += 12
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8")) if meta_len else {}
    pos += meta_len
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            payload = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = payload.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated container: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last record")
    return out, meta


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes())


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw little-endian payloads, in key order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]), dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
