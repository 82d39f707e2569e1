"""Binary tensor container with a bit-exact round trip.

Layout: magic "EMKD", version u32, entry count u32, then per entry:
name length u32, UTF-8 name, dtype code u8 (0 float64, 1 int64), rank u8,
one u32 per dim, raw little-endian payload of 8 * product(dims) bytes.
"""
from __future__ import annotations

import struct

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"EMKD"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in ("i", "u"):
        return 1
    raise CheckpointError(f"unsupported dtype {arr.dtype} for checkpointing")


def save_checkpoint(entries: dict[str, np.ndarray], path: str) -> None:
    """Write named arrays; float arrays as f8, integer arrays as i8."""
    blobs = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        name_bytes = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(name_bytes)))
        blobs.append(name_bytes)
        blobs.append(struct.pack("<BB", code, arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        blobs.append(payload)
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"truncated payload: needed {n} bytes for {what}")
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        if name in entries:
            raise CheckpointError(f"duplicate entry name {name!r}")
        code = r.u8("dtype code")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code}")
        rank = r.u8("rank")
        dims = tuple(r.u32(f"dim {i} of {name!r}") for i in range(rank))
        n_items = 1
        for d in dims:
            n_items *= d
        payload = r.take(8 * n_items, f"tensor data of {name!r}")
        entries[name] = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(dims).copy()
    if r.offset != len(blob):
        raise CheckpointError(f"{len(blob) - r.offset} trailing bytes after the last entry")
    return entries
