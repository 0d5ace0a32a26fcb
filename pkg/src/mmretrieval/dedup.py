"""Perceptual hashing (64-bit DCT pHash) and first-seen near-duplicate removal.

Hash pipeline, bit-exact:

1. BT.601 luma per pixel, ``(299 R + 587 G + 114 B + 500) // 1000``;
2. area-average resize to 32 x 32 (each output cell is the mean of the source
   area it covers, fractional pixels weighted by overlap);
3. orthonormal 2-D DCT-II;
4. keep the top-left 8 x 8 block and round it to 6 decimals, so float noise on
   coefficients that are mathematically zero cannot flip bits;
5. threshold = median of the 63 non-DC coefficients;
6. bit (r, c) is set iff coeff(r, c) > threshold (the DC term takes part);
7. pack row-major with (0, 0) in bit 63.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .core import Hash64
from .errors import EmptyImage

HASH_SIZE = 8
RESIZE = 32
DEFAULT_THRESHOLD = 4
LINEAR_SCAN_LIMIT = 100_000
COEFF_DECIMALS = 6


def to_luma(raster: np.ndarray) -> np.ndarray:
    arr = np.asarray(raster)
    if arr.ndim == 2:
        return arr.astype(np.int64)
    rgb = arr[..., :3].astype(np.int64)
    return (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000


@lru_cache(maxsize=64)
def _area_weights(src: int, dst: int) -> np.ndarray:
    """dst x src matrix whose rows average the source span of each output cell."""
    weights = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        first, last = int(np.floor(lo)), min(src, int(np.ceil(hi)))
        for p in range(first, last):
            overlap = min(hi, p + 1) - max(lo, p)
            if overlap > 0:
                weights[i, p] = overlap / scale
    weights.setflags(write=False)
    return weights


def area_resize(gray: np.ndarray, height: int = RESIZE, width: int = RESIZE) -> np.ndarray:
    rows = _area_weights(gray.shape[0], height)
    cols = _area_weights(gray.shape[1], width)
    return rows @ gray.astype(np.float64) @ cols.T


@lru_cache(maxsize=4)
def dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0, :] = np.sqrt(1.0 / n)
    mat.setflags(write=False)
    return mat


def dct2(block: np.ndarray) -> np.ndarray:
    c = dct_matrix(block.shape[0])
    return c @ block @ c.T


def phash64(raster: np.ndarray) -> Hash64:
    arr = np.asarray(raster)
    if arr.ndim < 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise EmptyImage(f"cannot hash an image of shape {arr.shape}")
    coeffs = dct2(area_resize(to_luma(arr)))[:HASH_SIZE, :HASH_SIZE]
    coeffs = np.round(coeffs, COEFF_DECIMALS)
    median = np.median(coeffs.reshape(-1)[1:])
    bits = (coeffs > median).reshape(-1)
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return Hash64(value)


def hamming(a: Hash64, b: Hash64) -> int:
    return (a.bits ^ b.bits).bit_count()


@dataclass
class DedupReport:
    unique_ids: list[str] = field(default_factory=list)
    duplicate_map: dict[str, str] = field(default_factory=dict)
    threshold_used: int = DEFAULT_THRESHOLD
    hashes: dict[str, Hash64] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "threshold_used": self.threshold_used,
            "unique_ids": list(self.unique_ids),
            "duplicate_map": dict(self.duplicate_map),
            "hashes": {k: str(v) for k, v in self.hashes.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> DedupReport:
        return cls(
            unique_ids=list(obj["unique_ids"]),
            duplicate_map=dict(obj["duplicate_map"]),
            threshold_used=int(obj["threshold_used"]),
            hashes={k: Hash64.from_hex(v) for k, v in obj.get("hashes", {}).items()},
        )


class _MultiIndex:
    """Exact Hamming-radius lookup by splitting hashes into threshold+1 chunks.

    Two hashes within distance t agree exactly on at least one of t+1 disjoint
    chunks (pigeonhole), so probing every chunk's bucket finds all candidates.
    """

    def __init__(self, threshold: int) -> None:
        n_chunks = threshold + 1
        bounds = np.linspace(0, 64, n_chunks + 1).astype(int)
        self.spans = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        self.tables: list[dict[int, list[int]]] = [{} for _ in self.spans]

    def _keys(self, bits: int) -> list[int]:
        return [(bits >> lo) & ((1 << (hi - lo)) - 1) for lo, hi in self.spans]

    def add(self, bits: int, slot: int) -> None:
        for table, key in zip(self.tables, self._keys(bits)):
            table.setdefault(key, []).append(slot)

    def candidates(self, bits: int) -> set[int]:
        found: set[int] = set()
        for table, key in zip(self.tables, self._keys(bits)):
            found.update(table.get(key, ()))
        return found


def dedup(
    items: Sequence[tuple[str, Hash64]] | Iterable[tuple[str, Hash64]],
    threshold: int = DEFAULT_THRESHOLD,
    linear_scan_limit: int = LINEAR_SCAN_LIMIT,
) -> DedupReport:
    """Keep the first item of every near-duplicate group, scanning in input order.

    An item is a duplicate when some earlier *kept* item lies within
    ``threshold`` bits; its canonical is the earliest such kept item.
    """
    if not 0 <= threshold <= 64:
        raise ValueError(f"threshold must lie in [0, 64], got {threshold}")
    items = list(items)
    report = DedupReport(threshold_used=threshold)
    use_index = len(items) > linear_scan_limit and threshold < 16
    index = _MultiIndex(threshold) if use_index else None
    kept_bits = np.zeros(len(items), dtype=np.uint64)
    n_kept = 0

    for item_id, h in items:
        report.hashes[item_id] = h
        canonical_slot = -1
        if index is not None:
            for slot in sorted(index.candidates(h.bits)):
                if (int(kept_bits[slot]) ^ h.bits).bit_count() <= threshold:
                    canonical_slot = slot
                    break
        elif n_kept:
            dist = np.bitwise_count(kept_bits[:n_kept] ^ np.uint64(h.bits))
            hits = np.flatnonzero(dist <= threshold)
            if hits.size:
                canonical_slot = int(hits[0])
        if canonical_slot >= 0:
            report.duplicate_map[item_id] = report.unique_ids[canonical_slot]
        else:
            kept_bits[n_kept] = h.bits
            if index is not None:
                index.add(h.bits, n_kept)
            report.unique_ids.append(item_id)
            n_kept += 1
    return report
