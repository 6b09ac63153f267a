"""EFW1 weight files: magic, u32 count, then per parameter
u32 name length, utf-8 name, u32 ndim, u32 dims..., little-endian f64 payload."""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import DataError

MAGIC = b"EFW1"


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError(f"not an EFW1 weight blob (magic {blob[:4]!r})")
    view = memoryview(blob)
    pos = 4
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        out[name] = arr
    if pos != len(blob):
        raise DataError(f"trailing bytes in weight blob ({len(blob) - pos})")
    return out


def state_dict(params) -> dict[str, np.ndarray]:
    """``params`` is an iterable of (name, Parameter)."""
    return {name: p.data.copy() for name, p in params}


def load_state_dict(params, arrays: Mapping[str, np.ndarray]) -> None:
    for name, p in params:
        if name not in arrays:
            raise DataError(f"weight blob has no entry for {name}")
        if arrays[name].shape != p.data.shape:
            raise DataError(f"{name}: blob shape {arrays[name].shape} != parameter shape {p.data.shape}")
        p.data = arrays[name].copy()


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
