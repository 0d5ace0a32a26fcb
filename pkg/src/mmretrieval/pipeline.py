"""Offline ingest/index pipeline and the online query engine.

Store directory (written by :func:`ingest`, extended by :func:`build_index`)::

    items.jsonl          unique items, catalog order
    dedup_report.json    canonical ids, duplicate map, hashes
    quarantine.jsonl     records dropped by ingest, with reasons
    ingest.json          image directory relative to the store
    embeddings.vlemb     EmbeddingStore (the embedding cache)

Index directory: ``manifest.json`` plus one ``<type>.hnsw`` snapshot per
product type. Rebuilds write a sibling directory and swap it in by rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent.backends import AgentBackend, HttpAgentBackend, ReplayBackend
from .agent.loop import ConcatText, run_refinement_loop
from .agent.mock import MockAgentBackend
from .config import CompletionBackendDescriptor, EngineConfig
from .core import CatalogItem, QueryTrace, RankedResult, check_catalog, read_catalog, write_catalog
from .dedup import DedupReport, dedup, phash64
from .encoders import EncoderBackend, detect_regions, encode_image, encode_text, load_image
from .errors import EmptyIndex, RetrievalError, UnknownItem
from .grounding import select_region
from .hnsw import HnswIndex, ShardSet, load_shard
from .metrics import AttributeOverlapJudge
from .store import EmbeddingStore

ITEMS_FILE = "items.jsonl"
DEDUP_FILE = "dedup_report.json"
QUARANTINE_FILE = "quarantine.jsonl"
INGEST_FILE = "ingest.json"
EMBEDDINGS_FILE = "embeddings.vlemb"
MANIFEST_FILE = "manifest.json"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


def shard_filename(product_type: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", product_type.lower()).strip("-") or "type"
    digest = hashlib.blake2b(product_type.encode("utf-8"), digest_size=4).hexdigest()
    return f"{slug}-{digest}.hnsw"


# ingest


@dataclass
class IngestResult:
    items: list[CatalogItem]
    report: DedupReport
    quarantine: list[dict] = field(default_factory=list)


def ingest(catalog_path: str | Path, out_dir: str | Path, config: EngineConfig | None = None) -> IngestResult:
    """Parse, validate, hash and dedup a catalog; persist the unique items.

    Bad records (unparseable, invalid, unreadable image) are quarantined and
    the run continues. Duplicates keep the earliest catalog row.
    """
    config = config or EngineConfig()
    catalog_path = Path(catalog_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_dir = Path(config.image_dir) if config.image_dir else catalog_path.parent

    parsed, errors = read_catalog(catalog_path)
    quarantine = [{"item_id": e.item_id, "stage": "parse", "reason": str(e)} for e in errors]
    checked = check_catalog(parsed)
    quarantine += [{"item_id": e.item_id, "stage": "validate", "reason": str(e)} for e in checked.violations]

    def hash_one(item: CatalogItem):
        try:
            return phash64(load_image(item.image_ref, image_dir)), None
        except RetrievalError as exc:
            return None, exc

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        hashed = list(pool.map(hash_one, checked.items))

    kept: list[CatalogItem] = []
    pairs = []
    for item, (h, exc) in zip(checked.items, hashed):
        if exc is not None:
            quarantine.append({"item_id": item.item_id, "stage": "image", "reason": str(exc)})
            continue
        kept.append(item)
        pairs.append((item.item_id, h))

    report = dedup(pairs, config.dedup_threshold)
    unique = set(report.unique_ids)
    items = [item for item in kept if item.item_id in unique]

    write_catalog(items, out_dir / (ITEMS_FILE + ".tmp"))
    os.replace(out_dir / (ITEMS_FILE + ".tmp"), out_dir / ITEMS_FILE)
    _write_atomic(out_dir / DEDUP_FILE, report.dumps())
    _write_atomic(out_dir / QUARANTINE_FILE, _jsonl(quarantine))
    rel = os.path.relpath(image_dir.resolve(), out_dir.resolve())
    _write_atomic(out_dir / INGEST_FILE, json.dumps({"image_dir": rel}, sort_keys=True) + "\n")
    return IngestResult(items, report, quarantine)


def load_items(store_dir: str | Path) -> list[CatalogItem]:
    items, errors = read_catalog(Path(store_dir) / ITEMS_FILE)
    if errors:
        raise errors[0]
    return items


def _image_dir(store_dir: Path, config: EngineConfig) -> Path:
    if config.image_dir:
        return Path(config.image_dir)
    meta = store_dir / INGEST_FILE
    if meta.exists():
        return (store_dir / json.loads(meta.read_text(encoding="utf-8"))["image_dir"]).resolve()
    return store_dir


# index build


@dataclass
class BuildResult:
    shards: ShardSet
    store: EmbeddingStore
    new_embeddings: int
    quarantine: list[dict] = field(default_factory=list)
    index_dir: Path | None = None


def embed_item(
    item: CatalogItem, backend: EncoderBackend, config: EngineConfig, image_dir: str | Path
) -> np.ndarray:
    """Detect with the product type as prompt, pick a region, encode it."""
    raster = load_image(item.image_ref, image_dir)
    proposals = detect_regions(raster, item.product_type, backend)
    decision = select_region(proposals, config.grounding)
    return encode_image(raster, decision, backend, config.dim)


def build_index(
    store_dir: str | Path,
    config: EngineConfig | None = None,
    index_dir: str | Path | None = None,
    encoder: EncoderBackend | None = None,
) -> BuildResult:
    """Embed every not-yet-embedded item, then build and snapshot one shard per product type."""
    config = config or EngineConfig()
    store_dir = Path(store_dir)
    index_dir = Path(index_dir or config.index_dir)
    encoder = encoder or config.encoder.build(config.dim)
    items = load_items(store_dir)
    image_dir = _image_dir(store_dir, config)
    store = EmbeddingStore(store_dir / EMBEDDINGS_FILE, config.dim, fsync=config.fsync)
    quarantine: list[dict] = []

    todo = [item for item in items if item.item_id not in store]

    def run(item: CatalogItem):
        try:
            return embed_item(item, encoder, config, image_dir), None
        except RetrievalError as exc:
            return None, exc

    new = 0
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        # map() yields in submission order, so the store is appended in catalog order
        for item, (vec, exc) in zip(todo, pool.map(run, todo)):
            if exc is not None:
                quarantine.append({"item_id": item.item_id, "stage": "embed", "reason": str(exc)})
                continue
            store.append(item.item_id, item.product_type, vec)
            new += 1

    groups: dict[str, list[str]] = {}
    for item in items:
        if item.item_id in store:
            groups.setdefault(store.key(item.item_id), []).append(item.item_id)

    def build(name: str):
        try:
            shard = HnswIndex(config.dim, config.hnsw, name)
            shard.add_many((item_id, store.get(item_id)) for item_id in groups[name])
            return shard, None
        except RetrievalError as exc:
            return None, exc

    shards = ShardSet()
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for name, (shard, exc) in zip(sorted(groups), pool.map(build, sorted(groups))):
            if exc is not None:
                quarantine.append({"item_id": None, "stage": f"shard:{name}", "reason": str(exc)})
            else:
                shards.shards[name] = shard

    write_snapshot(shards, index_dir)
    return BuildResult(shards, store, new, quarantine, index_dir)


def write_snapshot(shards: ShardSet, index_dir: str | Path) -> None:
    """Write all shards to a fresh directory and swap it in by rename."""
    index_dir = Path(index_dir)
    index_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = index_dir.with_name(index_dir.name + ".staging")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    manifest = {"shards": {}, "items": 0}
    for name in sorted(shards.shards):
        shard = shards.shards[name]
        fname = shard_filename(name)
        shard.save(staging / fname)
        manifest["shards"][name] = {"file": fname, "items": len(shard)}
        manifest["items"] += len(shard)
    (staging / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    retired = index_dir.with_name(index_dir.name + ".old")
    if retired.exists():
        shutil.rmtree(retired)
    if index_dir.exists():
        os.replace(index_dir, retired)
    os.replace(staging, index_dir)
    if retired.exists():
        shutil.rmtree(retired)


def read_snapshot(index_dir: str | Path) -> ShardSet:
    index_dir = Path(index_dir)
    manifest_path = index_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise EmptyIndex(f"no index snapshot in {index_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return ShardSet({name: load_shard(index_dir / entry["file"]) for name, entry in manifest["shards"].items()})


# backends


def build_agent_backend(desc: CompletionBackendDescriptor, config: EngineConfig) -> AgentBackend:
    if desc.kind == "http":
        assert desc.endpoint is not None
        return HttpAgentBackend(desc.endpoint, desc.timeout_ms, desc.max_in_flight)
    if desc.kind == "replay":
        assert desc.path is not None
        return ReplayBackend.from_file(desc.path)
    return MockAgentBackend(config.agent.build())


def build_judge_backend(desc: CompletionBackendDescriptor) -> AgentBackend:
    if desc.kind == "http":
        assert desc.endpoint is not None
        return HttpAgentBackend(desc.endpoint, desc.timeout_ms, desc.max_in_flight)
    if desc.kind == "replay":
        assert desc.path is not None
        return ReplayBackend.from_file(desc.path, ordered=False)
    return AttributeOverlapJudge()


# online engine


class Engine:
    """Read-only query side over sealed shard snapshots and the embedding store."""

    def __init__(
        self,
        shards: ShardSet,
        store: EmbeddingStore,
        items: Sequence[CatalogItem],
        config: EngineConfig | None = None,
        encoder: EncoderBackend | None = None,
        agent_backend: AgentBackend | None = None,
    ) -> None:
        self.config = config or EngineConfig()
        self.shards = shards
        self.store = store
        self.items = {item.item_id: item for item in items}
        self.encoder = encoder or self.config.encoder.build(self.config.dim)
        self._agent_backend = agent_backend
        self._agent_config = self.config.agent.build()
        self.last_trace: QueryTrace | None = None

    @classmethod
    def open(
        cls,
        store_dir: str | Path,
        index_dir: str | Path | None = None,
        config: EngineConfig | None = None,
        encoder: EncoderBackend | None = None,
        agent_backend: AgentBackend | None = None,
    ) -> Engine:
        config = config or EngineConfig()
        store_dir = Path(store_dir)
        shards = read_snapshot(index_dir or config.index_dir)
        store = EmbeddingStore(store_dir / EMBEDDINGS_FILE, config.dim, fsync=config.fsync)
        return cls(shards, store, load_items(store_dir), config, encoder, agent_backend)

    @property
    def agent_backend(self) -> AgentBackend:
        if self._agent_backend is None:
            self._agent_backend = build_agent_backend(self.config.agent_backend, self.config)
        return self._agent_backend

    def item(self, item_id: str) -> CatalogItem:
        try:
            return self.items[item_id]
        except KeyError:
            raise UnknownItem(f"unknown item {item_id!r}") from None

    def indexed_ids(self) -> list[str]:
        indexed = {i for shard in self.shards.shards.values() for i in shard.ids}
        return [item_id for item_id in self.items if item_id in indexed]

    def refine_query(self, text: str, product_type: str | None = None) -> QueryTrace:
        concat = ConcatText(product_type or "", None, text)
        return run_refinement_loop(concat, self._agent_config, self.agent_backend)

    def query_text(
        self,
        text: str,
        k: int | None = None,
        product_type: str | Sequence[str] | None = None,
        refine: bool = False,
    ) -> list[RankedResult]:
        types = [product_type] if isinstance(product_type, str) else product_type
        if refine:
            trace = self.refine_query(text, types[0] if types and len(types) == 1 else None)
            self.last_trace = trace
            text = trace.final_query
        vec = encode_text(text, self.encoder, self.config.dim)
        return self.shards.search(vec, k or self.config.top_k, self.config.hnsw.ef_search, types)

    def query_similar(self, item_id: str, k: int | None = None) -> list[RankedResult]:
        if item_id not in self.store:
            raise UnknownItem(f"{item_id!r} has no stored embedding")
        key = self.store.key(item_id)
        return self.shards.search(
            self.store.get(item_id), k or self.config.top_k, self.config.hnsw.ef_search, [key], exclude=[item_id]
        )

    def health(self) -> dict:
        return {"status": "ok", "shards": len(self.shards.shards), "items": len(self.shards)}
