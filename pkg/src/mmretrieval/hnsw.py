"""Hierarchical navigable small world index over unit vectors.

Similarity is the dot product (cosine on unit vectors). Neighbour lists keep
the closest candidates by similarity (simple selection, no diversity
heuristic) and links are kept undirected: when a node evicts a neighbour
during pruning, the reverse edge is dropped as well. Adjacency lists are
stored sorted by node index so traversal order, and therefore every search
result, is identical before and after a snapshot round-trip.

Snapshot layout (little-endian)::

    b"VLHNSW01"
    params:   u32 M, u32 M0, u32 ef_construction, u32 ef_search, f64 mL,
              u64 rng_seed, u64 level_draws, u32 dim, u32 count,
              i32 entry_point, i32 max_level, u32 len + UTF-8 product_type
    ids:      count x (u32 len + UTF-8 bytes)
    vectors:  count x dim x f32
    links:    per node: varint level, then per layer 0..level:
              varint degree + varint deltas of the sorted neighbour indices
    u32 CRC32 of everything above
"""

from __future__ import annotations

import heapq
import io
import math
import os
import struct
import zlib
from bisect import insort
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import RankedResult, UNIT_NORM_TOL, rank_results
from .errors import (
    CorruptSnapshot,
    DimensionMismatch,
    DuplicateVectorId,
    EmptyIndex,
    VersionMismatch,
)

MAGIC_PREFIX = b"VLHNSW"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + b"%02d" % FORMAT_VERSION


@dataclass(frozen=True)
class HnswParams:
    M: int = 24
    M0: int | None = None
    ef_construction: int = 200
    ef_search: int = 100
    mL: float | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.ef_construction < self.M:
            raise ValueError("ef_construction must be >= M")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")
        if self.M0 is None:
            object.__setattr__(self, "M0", 2 * self.M)
        if self.mL is None:
            object.__setattr__(self, "mL", 1.0 / math.log(self.M))
        if not 0 <= self.rng_seed < 1 << 64:
            raise ValueError("rng_seed must fit in 64 bits")


def assign_level(rng: np.random.Generator, mL: float) -> int:
    """Geometric level draw: floor(-ln(U) * mL) with U uniform in (0, 1]."""
    u = 1.0 - rng.random()
    return level_for(u, mL)


def level_for(u: float, mL: float) -> int:
    # a hair of slack so U = M**-k lands on level k despite rounding in ln
    return int(math.floor(-math.log(u) * mL + 1e-12))


class HnswIndex:
    """One shard: an HNSW graph over the vectors of a single product type."""

    def __init__(self, dim: int, params: HnswParams | None = None, product_type: str = "") -> None:
        self.dim = dim
        self.params = params or HnswParams()
        self.product_type = product_type
        self.ids: list[str] = []
        self._node_of: dict[str, int] = {}
        self._vectors = np.zeros((16, dim), dtype=np.float32)
        self.levels: list[int] = []
        # links[node][layer] -> sorted list of neighbour node indices
        self.links: list[list[list[int]]] = []
        self.entry_point = -1
        self.max_level = -1
        self._rng = np.random.Generator(np.random.PCG64(self.params.rng_seed))
        self._draws = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._node_of

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors[: len(self.ids)]

    def vector(self, item_id: str) -> np.ndarray:
        return self._vectors[self._node_of[item_id]]

    def _cap(self, layer: int) -> int:
        return self.params.M0 if layer == 0 else self.params.M

    def _draw_level(self) -> int:
        self._draws += 1
        return assign_level(self._rng, self.params.mL)

    def _search_layer(self, q: np.ndarray, entry: Iterable[int], ef: int, layer: int) -> list[tuple[float, int]]:
        vecs = self._vectors
        links = self.links
        visited = set()
        candidates: list[tuple[float, int]] = []
        results: list[tuple[float, int]] = []
        for node in entry:
            if node in visited:
                continue
            visited.add(node)
            sim = float(vecs[node] @ q)
            heapq.heappush(candidates, (-sim, node))
            heapq.heappush(results, (sim, node))
            if len(results) > ef:
                heapq.heappop(results)
        while candidates:
            neg_sim, node = heapq.heappop(candidates)
            if len(results) >= ef and -neg_sim < results[0][0]:
                break
            fresh = [n for n in links[node][layer] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            sims = (vecs[fresh] @ q).tolist()
            for n, sim in zip(fresh, sims):
                if len(results) < ef or sim > results[0][0]:
                    heapq.heappush(candidates, (-sim, n))
                    heapq.heappush(results, (sim, n))
                    if len(results) > ef:
                        heapq.heappop(results)
        return results

    def _greedy(self, q: np.ndarray, node: int, top: int, bottom: int) -> int:
        """Single-candidate descent from layer ``top`` down to ``bottom`` (inclusive)."""
        vecs = self._vectors
        best = float(vecs[node] @ q)
        for layer in range(top, bottom - 1, -1):
            improved = True
            while improved:
                improved = False
                nbrs = self.links[node][layer]
                if not nbrs:
                    break
                sims = vecs[nbrs] @ q
                j = int(np.argmax(sims))
                if sims[j] > best:
                    best = float(sims[j])
                    node = nbrs[j]
                    improved = True
        return node

    @staticmethod
    def _closest(scored: Iterable[tuple[float, int]], count: int) -> list[int]:
        return [n for _, n in sorted(scored, key=lambda p: (-p[0], p[1]))[:count]]

    def _prune(self, node: int, layer: int) -> None:
        nbrs = self.links[node][layer]
        cap = self._cap(layer)
        if len(nbrs) <= cap:
            return
        sims = (self._vectors[nbrs] @ self._vectors[node]).tolist()
        keep = set(self._closest(zip(sims, nbrs), cap))
        for dropped in nbrs:
            if dropped not in keep:
                back = self.links[dropped][layer]
                if node in back:
                    back.remove(node)
        self.links[node][layer] = sorted(keep)

    def insert(self, item_id: str, vector: np.ndarray) -> None:
        if item_id in self._node_of:
            raise DuplicateVectorId(f"id {item_id!r} already in shard {self.product_type!r}")
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dimension {self.dim}, got {vec.shape[0]}")
        if abs(float(np.linalg.norm(vec.astype(np.float64))) - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"vector for {item_id!r} is not unit-norm")

        node = len(self.ids)
        if node == self._vectors.shape[0]:
            grown = np.zeros((2 * node, self.dim), dtype=np.float32)
            grown[:node] = self._vectors
            self._vectors = grown
        self._vectors[node] = vec
        self.ids.append(item_id)
        self._node_of[item_id] = node
        level = self._draw_level()
        self.levels.append(level)
        self.links.append([[] for _ in range(level + 1)])

        if self.entry_point < 0:
            self.entry_point, self.max_level = node, level
            return

        q = self._vectors[node]
        ep = self.entry_point
        if self.max_level > level:
            ep = self._greedy(q, ep, self.max_level, level + 1)
        entry = [ep]
        for layer in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(q, entry, self.params.ef_construction, layer)
            for peer in self._closest(found, self._cap(layer)):
                insort(self.links[node][layer], peer)
                insort(self.links[peer][layer], node)
                self._prune(peer, layer)
            entry = [n for _, n in sorted(found, key=lambda p: (-p[0], p[1]))]

        if level > self.max_level:
            self.entry_point, self.max_level = node, level

    def add_many(self, items: Iterable[tuple[str, np.ndarray]]) -> None:
        for item_id, vec in items:
            self.insert(item_id, vec)

    def search(
        self, query: np.ndarray, k: int = 10, ef: int | None = None, exclude: Sequence[str] = ()
    ) -> list[RankedResult]:
        if not self.ids:
            raise EmptyIndex(f"shard {self.product_type!r} is empty")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dimension {self.dim}, got {q.shape[0]}")
        ef = max(ef or self.params.ef_search, k + len(exclude))
        ep = self._greedy(q, self.entry_point, self.max_level, 1) if self.max_level > 0 else self.entry_point
        found = self._search_layer(q, [ep], ef, 0)
        nodes = [n for _, n in found if self.ids[n] not in exclude]
        return rank_results(self._exact_scores(nodes, q), k)

    def _exact_scores(self, nodes: Sequence[int], q: np.ndarray) -> list[tuple[str, float]]:
        if not nodes:
            return []
        sims = self._vectors[list(nodes)].astype(np.float64) @ q.astype(np.float64)
        return [(self.ids[n], float(s)) for n, s in zip(nodes, sims)]

    # structural audit

    def audit(self) -> list[str]:
        """Return every structural violation found (empty when the graph is sound)."""
        problems: list[str] = []
        n = len(self.ids)
        if n == 0:
            return problems
        if not 0 <= self.entry_point < n:
            problems.append(f"entry point {self.entry_point} out of range")
        elif self.levels[self.entry_point] != self.max_level:
            problems.append("entry point level differs from max_level")
        if max(self.levels) != self.max_level:
            problems.append("max_level is not the highest node level")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            problems.append("stored vector is not unit-norm")
        for node in range(n):
            if len(self.links[node]) != self.levels[node] + 1:
                problems.append(f"node {node} has {len(self.links[node])} layers for level {self.levels[node]}")
                continue
            for layer, nbrs in enumerate(self.links[node]):
                if len(nbrs) > self._cap(layer):
                    problems.append(f"node {node} layer {layer}: degree {len(nbrs)} > cap")
                if nbrs != sorted(set(nbrs)):
                    problems.append(f"node {node} layer {layer}: adjacency not sorted/unique")
                for peer in nbrs:
                    if peer == node:
                        problems.append(f"node {node} layer {layer}: self loop")
                    elif not 0 <= peer < n or self.levels[peer] < layer:
                        problems.append(f"node {node} layer {layer}: neighbour {peer} absent from layer")
                    elif node not in self.links[peer][layer]:
                        problems.append(f"node {node} layer {layer}: link to {peer} is one-way")
        return problems

    # persistence

    def to_bytes(self) -> bytes:
        p = self.params
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<IIIId", p.M, p.M0, p.ef_construction, p.ef_search, p.mL))
        out.write(struct.pack("<QQII", p.rng_seed, self._draws, self.dim, len(self.ids)))
        out.write(struct.pack("<ii", self.entry_point, self.max_level))
        _write_str(out, self.product_type)
        for item_id in self.ids:
            _write_str(out, item_id)
        out.write(self.vectors.astype("<f4").tobytes())
        for node in range(len(self.ids)):
            _write_varint(out, self.levels[node])
            for nbrs in self.links[node]:
                _write_varint(out, len(nbrs))
                prev = 0
                for peer in nbrs:
                    _write_varint(out, peer - prev)
                    prev = peer
        body = out.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> HnswIndex:
        if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC_PREFIX):
            raise CorruptSnapshot("not an HNSW snapshot (bad magic)")
        version_tag = data[len(MAGIC_PREFIX) : len(MAGIC)]
        if not version_tag.isdigit():
            raise CorruptSnapshot(f"bad version tag {version_tag!r}")
        if int(version_tag) != FORMAT_VERSION:
            raise VersionMismatch(f"snapshot version {int(version_tag)}, reader supports {FORMAT_VERSION}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptSnapshot("checksum mismatch (truncated or damaged snapshot)")
        try:
            return cls._parse(memoryview(body)[len(MAGIC) :])
        except (struct.error, IndexError, ValueError, UnicodeDecodeError) as exc:
            raise CorruptSnapshot(f"malformed snapshot body: {exc}") from exc

    @classmethod
    def _parse(cls, buf: memoryview) -> HnswIndex:
        pos = 0

        def take(fmt: str) -> tuple:
            nonlocal pos
            vals = struct.unpack_from(fmt, buf, pos)
            pos += struct.calcsize(fmt)
            return vals

        def take_str() -> str:
            nonlocal pos
            (length,) = take("<I")
            text = bytes(buf[pos : pos + length]).decode("utf-8")
            pos += length
            return text

        def take_varint() -> int:
            nonlocal pos
            value, shift = 0, 0
            while True:
                byte = buf[pos]
                pos += 1
                value |= (byte & 0x7F) << shift
                if byte < 0x80:
                    return value
                shift += 7

        M, M0, ef_c, ef_s, mL = take("<IIIId")
        seed, draws, dim, count = take("<QQII")
        entry, max_level = take("<ii")
        params = HnswParams(M=M, M0=M0, ef_construction=ef_c, ef_search=ef_s, mL=mL, rng_seed=seed)
        index = cls(dim, params, take_str())
        index.ids = [take_str() for _ in range(count)]
        index._node_of = {item_id: i for i, item_id in enumerate(index.ids)}
        nbytes = count * dim * 4
        if pos + nbytes > len(buf):
            raise ValueError("vector block truncated")
        vecs = np.frombuffer(bytes(buf[pos : pos + nbytes]), dtype="<f4").reshape(count, dim)
        pos += nbytes
        index._vectors = np.array(vecs, dtype=np.float32).reshape(count, dim)
        if count == 0:
            index._vectors = np.zeros((16, dim), dtype=np.float32)
        for _ in range(count):
            level = take_varint()
            layers = []
            for _ in range(level + 1):
                degree = take_varint()
                nbrs, prev = [], 0
                for _ in range(degree):
                    prev += take_varint()
                    nbrs.append(prev)
                layers.append(nbrs)
            index.levels.append(level)
            index.links.append(layers)
        if pos != len(buf):
            raise ValueError(f"{len(buf) - pos} trailing bytes")
        index.entry_point, index.max_level = entry, max_level
        for _ in range(draws):
            index._draw_level()
        return index

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> HnswIndex:
        return cls.from_bytes(Path(path).read_bytes())


def save_shard(shard: HnswIndex, path: str | Path) -> None:
    shard.save(path)


def load_shard(path: str | Path) -> HnswIndex:
    return HnswIndex.load(path)


def _write_str(out: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def _write_varint(out: io.BytesIO, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.write(bytes((byte | 0x80,)))
        else:
            out.write(bytes((byte,)))
            return


def brute_force_search(
    vectors: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]],
    query: np.ndarray,
    k: int,
    exclude: Sequence[str] = (),
) -> list[RankedResult]:
    """Exact top-k by full scan; same ordering rules as :meth:`HnswIndex.search`."""
    pairs = list(vectors.items()) if isinstance(vectors, Mapping) else list(vectors)
    pairs = [(i, v) for i, v in pairs if i not in exclude]
    if not pairs:
        return []
    mat = np.stack([np.asarray(v, dtype=np.float32) for _, v in pairs]).astype(np.float64)
    sims = mat @ np.asarray(query, dtype=np.float32).astype(np.float64)
    return rank_results(((i, float(s)) for (i, _), s in zip(pairs, sims)), k)


@dataclass
class ShardSet:
    """Per-product-type shards searched one at a time or fanned out and merged."""

    shards: dict[str, HnswIndex] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards.values())

    def search(
        self,
        query: np.ndarray,
        k: int = 10,
        ef: int | None = None,
        product_types: Sequence[str] | None = None,
        exclude: Sequence[str] = (),
    ) -> list[RankedResult]:
        names = sorted(self.shards) if product_types is None else list(product_types)
        missing = [t for t in names if t not in self.shards]
        if missing:
            raise EmptyIndex(f"no shard for product type(s) {missing}")
        pooled: list[tuple[str, float]] = []
        for name in names:
            shard = self.shards[name]
            if len(shard):
                pooled.extend((r.item_id, r.similarity) for r in shard.search(query, k, ef, exclude))
        if not pooled:
            raise EmptyIndex("all selected shards are empty")
        return rank_results(pooled, k)
