#!/usr/bin/env python3
"""Binary checkpoint codec.

Layout (little-endian)::

    b"PCD1"
    u32 version (= 1)
    u32 metadata length, UTF-8 JSON metadata (sorted keys)
    u32 entry count
    per entry:
        u16 path length, UTF-8 path
        u8 dtype code (0 = f32)
        u8 ndim, ndim x u64 dims
        raw f32 data, row-major

The entry encoding is shared with the dataset store.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Tuple

import numpy as np

from .exceptions import (
    BadMagicError,
    CheckpointError,
    DuplicatePathError,
    TruncatedCheckpointError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

logger = logging.getLogger("pcdlib")

MAGIC = b"PCD1"
FORMAT_VERSION = 1
DTYPE_F32 = 0
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Metadata plus an ordered mapping of parameter path to float32 array."""

    metadata: Dict[str, Any] = field(default_factory=dict)
    entries: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __contains__(self, path: str) -> bool:
        return path in self.entries

    def __getitem__(self, path: str) -> np.ndarray:
        return self.entries[path]

    def paths(self) -> list:
        return list(self.entries)

    def subset(self, prefix: str, strip: bool = True) -> "OrderedDict[str, np.ndarray]":
        """Entries under ``prefix``; with ``strip`` the prefix is removed from the keys."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for path, array in self.entries.items():
            if path.startswith(prefix):
                out[path[len(prefix):] if strip else path] = array
        return out

    def add(self, path: str, array: np.ndarray) -> None:
        if path in self.entries:
            raise DuplicatePathError(path)
        self.entries[path] = np.array(array, dtype=np.float32, order="C")

    def update(self, items: Iterable[Tuple[str, np.ndarray]]) -> None:
        for path, array in items:
            self.add(path, array)


# ---------------------------------------------------------------- encoding


def encode_entries(entries: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    """Entry count followed by the encoded entries."""
    items = list(entries)
    seen = set()
    chunks = [struct.pack("<I", len(items))]
    for path, array in items:
        if path in seen:
            raise DuplicatePathError(path)
        seen.add(path)
        encoded = path.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"entry path too long: {path[:40]}...")
        array = np.asarray(array, dtype=_F32, order="C")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = data
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.offset}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_entries(reader: _Reader) -> "OrderedDict[str, np.ndarray]":
    (count,) = reader.unpack("<I", "entry count")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (length,) = reader.unpack("<H", "path length")
        path = reader.take(length, "path").decode("utf-8")
        dtype, ndim = reader.unpack("<BB", f"header of '{path}'")
        if dtype != DTYPE_F32:
            raise UnsupportedDtypeError(path, dtype)
        dims = reader.unpack(f"<{ndim}Q", f"dims of '{path}'") if ndim else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        raw = reader.take(nbytes, f"data of '{path}'")
        if path in entries:
            raise DuplicatePathError(path)
        entries[path] = np.frombuffer(raw, dtype=_F32).reshape(dims).astype(np.float32)
    return entries


def decode_entries(data: bytes) -> "OrderedDict[str, np.ndarray]":
    return _decode_entries(_Reader(data))


def encode_checkpoint(c: Checkpoint) -> bytes:
    meta = json.dumps(c.metadata, sort_keys=True).encode("utf-8")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta)) + meta
    return header + encode_entries(c.entries.items())


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(data[:4])!r}")
    reader.offset = len(MAGIC)
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = reader.unpack("<I", "metadata length")
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from e
    entries = _decode_entries(reader)
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after the last entry")
    return Checkpoint(metadata, entries)


# ---------------------------------------------------------------------- io


def save_checkpoint(c: Checkpoint, path: str) -> None:
    """Write ``c`` to ``path`` (atomically, through a temporary file)."""
    data = encode_checkpoint(c)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"saved checkpoint {path}: {len(c.entries)} entries, {len(data)} bytes")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    c = decode_checkpoint(data)
    logger.debug(f"loaded checkpoint {path}: {len(c.entries)} entries")
    return c
