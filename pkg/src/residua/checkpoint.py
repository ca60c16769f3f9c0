"""Binary checkpoint format.

Layout, little-endian throughout::

    b"AECKPT01"
    u32  tensor count
    per tensor, sorted by name:
        u16  name length, then the UTF-8 name
        u8   rank
        u32  dims[rank]
        f32  data[prod(dims)]   (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ParamStore, check_params

MAGIC = b"AECKPT01"


def dumps(params) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> ParamStore:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"checkpoint truncated at byte {pos} (wanted {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError("bad checkpoint magic")
    (count,) = struct.unpack("<I", take(4))
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not UTF-8: {exc}") from None
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name in store:
            raise FormatError(f"duplicate tensor {name!r}")
        store[name] = data
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return store


def save_checkpoint(params, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params))
    return path


def load_checkpoint(path, arch=None) -> ParamStore:
    """Read a checkpoint; when ``arch`` is given, names and shapes must match it."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        store = loads(blob)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if arch is not None:
        try:
            check_params(arch, store)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return store
