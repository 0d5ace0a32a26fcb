"""Append-only on-disk cache of item embeddings.

Layout: ``b"VLEMB01"``, ``D`` as u32, then records of
``u16 id_len | id | u16 key_len | key | D x f32 | u32 crc32`` (all
little-endian; the CRC covers the record bytes before it). A torn or
corrupt tail left by an interrupted writer is dropped on open.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CorruptSnapshot, DimensionMismatch, DuplicateVectorId, UnknownItem, VersionMismatch

MAGIC = b"VLEMB01"
_HEADER = len(MAGIC) + 4


def _encode_record(item_id: str, key: str, vector: np.ndarray) -> bytes:
    raw_id = item_id.encode("utf-8")
    raw_key = key.encode("utf-8")
    if len(raw_id) > 0xFFFF or len(raw_key) > 0xFFFF:
        raise ValueError("item id and shard key must each fit in 65535 bytes")
    body = (
        struct.pack("<H", len(raw_id)) + raw_id + struct.pack("<H", len(raw_key)) + raw_key
        + np.asarray(vector, dtype="<f4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


class EmbeddingStore:
    """One live record per item id; vectors are served from memory after open."""

    def __init__(self, path: str | Path, dim: int, fsync: bool = True) -> None:
        self.path = Path(path)
        self.dim = dim
        self.fsync = fsync
        self._offsets: dict[str, int] = {}
        self._keys: dict[str, str] = {}
        self._vectors: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.recovered_bytes = 0
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(MAGIC + struct.pack("<I", dim))

    def _load(self) -> None:
        data = self.path.read_bytes()
        if len(data) < _HEADER or data[:5] != MAGIC[:5]:
            raise CorruptSnapshot(f"{self.path}: not an embedding store")
        if data[: len(MAGIC)] != MAGIC:
            raise VersionMismatch(f"{self.path}: unsupported store version {data[5:7]!r}")
        (dim,) = struct.unpack_from("<I", data, len(MAGIC))
        if dim != self.dim:
            raise DimensionMismatch(f"{self.path}: store D={dim}, config D={self.dim}")
        pos = _HEADER
        vec_bytes = 4 * dim
        while pos < len(data):
            start = pos
            try:
                (n,) = struct.unpack_from("<H", data, pos)
                item_id = data[pos + 2 : pos + 2 + n].decode("utf-8")
                pos += 2 + n
                (m,) = struct.unpack_from("<H", data, pos)
                key = data[pos + 2 : pos + 2 + m].decode("utf-8")
                pos += 2 + m
                end = pos + vec_bytes
                if end + 4 > len(data):
                    raise ValueError("truncated record")
                (crc,) = struct.unpack_from("<I", data, end)
                if crc != zlib.crc32(data[start:end]):
                    raise ValueError("checksum mismatch")
            except (struct.error, UnicodeDecodeError, ValueError):
                # everything from here on is an unfinished write; cut it off
                self.recovered_bytes = len(data) - start
                with open(self.path, "r+b") as fh:
                    fh.truncate(start)
                return
            if item_id in self._offsets:
                raise CorruptSnapshot(f"{self.path}: duplicate record for {item_id!r}")
            self._offsets[item_id] = start
            self._keys[item_id] = key
            self._vectors[item_id] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            pos = end + 4

    def __len__(self) -> int:
        return len(self._offsets)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._offsets

    def ids(self) -> list[str]:
        """Item ids in append order."""
        return list(self._offsets)

    def key(self, item_id: str) -> str:
        try:
            return self._keys[item_id]
        except KeyError:
            raise UnknownItem(f"no stored embedding for {item_id!r}") from None

    def get(self, item_id: str) -> np.ndarray:
        try:
            return self._vectors[item_id]
        except KeyError:
            raise UnknownItem(f"no stored embedding for {item_id!r}") from None

    def offset(self, item_id: str) -> int:
        return self._offsets[item_id]

    def items(self) -> Iterator[tuple[str, str, np.ndarray]]:
        for item_id in self._offsets:
            yield item_id, self._keys[item_id], self._vectors[item_id]

    def append(self, item_id: str, key: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise DimensionMismatch(f"expected a ({self.dim},) vector, got {vector.shape}")
        record = _encode_record(item_id, key, vector)
        with self._lock:
            if item_id in self._offsets:
                raise DuplicateVectorId(f"{item_id!r} is already stored")
            with open(self.path, "ab") as fh:
                offset = fh.tell()
                fh.write(record)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            self._offsets[item_id] = offset
            self._keys[item_id] = key
            self._vectors[item_id] = vector.copy()
