"""Flat binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"NMIM"
    version u32      currently 1
    nlines  u32      config line count
    lines   nlines × (u32 byte length, UTF-8 "key=value")
    nblobs  u32      named array count
    blobs   nblobs × (u32 name length, UTF-8 name,
                      u32 rank, rank × u64 dims,
                      float64 LE payload)

Raw float64 payloads make save→load→save byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"NMIM"
VERSION = 1


def save_checkpoint(path, config_items: list[tuple[str, str]], blobs: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config_items))]
    for key, value in config_items:
        line = f"{key}={value}".encode("utf-8")
        parts.append(struct.pack("<I", len(line)))
        parts.append(line)
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.origin}: truncated at byte {self.pos} "
                              f"(needed {n} more, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[list[tuple[str, str]], dict[str, np.ndarray]]:
    cur = _Cursor(Path(path).read_bytes(), str(path))
    if cur.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    version = cur.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    items = []
    for _ in range(cur.u32()):
        line = cur.take(cur.u32()).decode("utf-8")
        key, _, value = line.partition("=")
        items.append((key, value))
    blobs: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        dims = struct.unpack(f"<{rank}Q", cur.take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(cur.take(8 * count), dtype="<f8").reshape(dims)
        blobs[name] = data.astype(np.float64)
    if cur.pos != len(cur.buf):
        raise FormatError(f"{path}: {len(cur.buf) - cur.pos} trailing bytes after blob table")
    return items, blobs
