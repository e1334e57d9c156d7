"""Bit-exact binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"PDTC"  u16 version=1  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
               prod(dims) x f64 payload (row-major)

Used for images, PDT checkpoints and backbone weights.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import FormatError

MAGIC = b"PDTC"
VERSION = 1
_HEADER = struct.Struct("<4sHI")

Entries = Union[Mapping[str, np.ndarray], Iterable[tuple[str, np.ndarray]]]


def encode(entries: Entries) -> bytes:
    """Serialise a mapping or a sequence of ``(name, array)`` pairs."""
    items = list(entries.items() if isinstance(entries, Mapping) else entries)
    parts = [_HEADER.pack(MAGIC, VERSION, len(items))]
    seen = set()
    for name, value in items:
        if name in seen:
            raise FormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]!r}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"entry {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if len(view) < _HEADER.size:
        raise FormatError(f"truncated header at byte 0 ({len(view)} bytes)")
    magic, version, count = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    pos = _HEADER.size
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated {what} at byte {pos}: need {n} bytes, have {len(view) - pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry name is not UTF-8 at byte {start}") from None
        if name in out:
            raise FormatError(f"duplicate entry name {name!r} at byte {start}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * size, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry at byte {pos}")
    return out


def container_write(path, entries: Entries) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode(entries)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def container_read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
