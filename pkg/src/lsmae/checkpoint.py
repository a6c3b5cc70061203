"""Named float32 tensor container with a fixed little-endian byte layout.

Layout::

    magic      8 bytes   b"LSMAE1\\0\\0"
    count      u32       number of tensor entries
    meta_len   u32       length of the metadata text
    meta       bytes     UTF-8 "key=value\\n" lines, keys sorted
    entries    count x { u16 name_len, name (ASCII), u8 dtype (0 = f32),
                         u8 rank, rank x u32 dims, f32 payload row-major }

Optimizer moments live under the ``opt/`` name prefix.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LSMAE1\x00\x00"
DTYPE_F32 = 0
HEADER_SIZE = len(MAGIC) + 8


class CheckpointError(ValueError):
    """Malformed checkpoint; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt/")}

    def opt_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("opt/")}

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.meta == other.meta and list(self.tensors) == list(other.tensors) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k in sorted(meta):
        v = str(meta[k])
        if "=" in k or "\n" in k or "\n" in v or not k:
            raise ValueError(f"metadata entry {k!r}={v!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def decode_meta(raw: bytes, offset: int = 0) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("metadata is not UTF-8", offset + exc.start) from None
    meta: dict[str, str] = {}
    pos = offset
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"metadata line {line!r} has no '='", pos)
        meta[key] = value
        pos += len(line.encode()) + 1
    return meta


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = encode_meta(ckpt.meta)
    parts = [MAGIC, struct.pack("<II", len(ckpt.tensors), len(meta)), meta]
    for name, arr in ckpt.tensors.items():
        try:
            raw_name = name.encode("ascii")
        except UnicodeEncodeError:
            raise ValueError(f"tensor name {name!r} is not ASCII") from None
        if not 0 < len(raw_name) < 2**16:
            raise ValueError(f"tensor name {name!r} has invalid length")
        a = np.asarray(arr, dtype="<f4")  # tobytes() below is C-order; keeps 0-d shape
        if a.ndim > 255:
            raise ValueError(f"{name}: rank {a.ndim} too large")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{a.ndim}I", DTYPE_F32, a.ndim, *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    n = len(buf)
    pos = 0

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > n:
            raise CheckpointError(f"truncated {what}: need {size} bytes, {n - pos} left", pos)
        out = buf[pos : pos + size]
        pos += size
        return out

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic", 0)
    count, meta_len = struct.unpack("<II", take(8, "header"))
    meta_at = pos
    meta = decode_meta(take(meta_len, "metadata"), meta_at)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_at = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        if name_len == 0:
            raise CheckpointError("empty tensor name", entry_at)
        raw_name = take(name_len, "name")
        try:
            name = raw_name.decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not ASCII", entry_at + 2) from None
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}", entry_at)
        dtype_at = pos
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype tag {dtype}", dtype_at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        if any(d == 0 for d in dims):
            raise CheckpointError(f"{name}: zero-sized dimension in {dims}", dtype_at + 2)
        size = 1
        for d in dims:
            size *= d
        payload_at = pos
        if payload_at + 4 * size > n:
            raise CheckpointError(
                f"{name}: truncated payload, dims {dims} need {4 * size} bytes, "
                f"{n - payload_at} left",
                payload_at,
            )
        raw = take(4 * size, "payload")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != n:
        raise CheckpointError(f"{n - pos} trailing bytes after last entry", pos)
    return Checkpoint(tensors, meta)


def save(ckpt: Checkpoint, path) -> int:
    """Write atomically (temp file + rename); returns bytes written."""
    data = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return len(data)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
