"""STRQ binary tensor container.

Layout (little-endian)::

    b"STRQ" | u32 version=1 | u32 count |
    count x { u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | f32 data }
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"STRQ"
VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"too many dimensions for {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated STRQ payload")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic, not an STRQ container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported STRQ version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(dims)
        out[name] = data.astype(np.float32)
    if pos != len(view):
        raise FormatError("trailing bytes after STRQ payload")
    return out


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
