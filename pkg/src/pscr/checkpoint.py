"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PSCR"                      magic, 4 bytes
    u32  version                 currently 1
    u32  header_len              byte length of the JSON header
    ...  header                  UTF-8 JSON, keys sorted, no whitespace
    u32  record_count
    record_count times:
        u32  name_len
        ...  name                UTF-8
        u32  rank
        u64  dims[rank]
        f64  payload[prod(dims)] row-major

The JSON header carries the model architecture and sampler so a checkpoint is
self-describing. Serialization is deterministic: equal inputs give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"PSCR"
VERSION = 1


def dumps(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes(order="C") handles layout; keeps rank 0
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"checkpoint truncated at byte {pos} (wanted {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a PSCR checkpoint (bad magic)")
    version, head_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(bytes(take(head_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last record")
    return header, tensors


def save(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
