"""Domain types shared across the engine, plus catalog (de)serialization."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CatalogError,
    CatalogValidationError,
    DimensionMismatch,
    DuplicateId,
    EmptyProductType,
    MalformedRecord,
    ZeroVector,
)

DEFAULT_DIM = 512
UNIT_NORM_TOL = 1e-4
I_MAX = 5

CATALOG_KEYS = ("item_id", "image_ref", "product_type", "gender_age", "title", "description")


@dataclass(frozen=True)
class CatalogItem:
    item_id: str
    image_ref: str
    product_type: str
    title: str = ""
    description: str = ""
    gender_age: str | None = None

    @property
    def raw_text(self) -> str:
        """Title and description joined by one space, empty parts skipped."""
        return " ".join(p for p in (self.title.strip(), self.description.strip()) if p)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in CATALOG_KEYS}

    @classmethod
    def from_json(cls, obj: object) -> CatalogItem:
        if not isinstance(obj, dict):
            raise MalformedRecord(None, f"catalog record is not an object: {obj!r:.80}")
        item_id = obj.get("item_id")
        if not isinstance(item_id, str) or not item_id:
            raise MalformedRecord(None, f"record without a string item_id: {obj!r:.80}")
        for key in ("image_ref", "product_type", "title", "description"):
            if not isinstance(obj.get(key, ""), str):
                raise MalformedRecord(item_id, f"item {item_id!r}: field {key!r} must be a string")
        if "image_ref" not in obj:
            raise MalformedRecord(item_id, f"item {item_id!r}: missing image_ref")
        gender_age = obj.get("gender_age")
        if gender_age is not None and not isinstance(gender_age, str):
            raise MalformedRecord(item_id, f"item {item_id!r}: gender_age must be a string or null")
        return cls(
            item_id=item_id,
            image_ref=obj["image_ref"],
            product_type=obj.get("product_type", ""),
            title=obj.get("title", ""),
            description=obj.get("description", ""),
            gender_age=gender_age or None,
        )


@dataclass(frozen=True)
class BoundingBoxProposal:
    """Normalized box plus the detector's raw region/prompt affinity."""

    x: float
    y: float
    w: float
    h: float
    affinity: float
    score: float | None = None

    def __post_init__(self) -> None:
        eps = 1e-9
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > 1 + eps or self.y + self.h > 1 + eps:
            raise ValueError(f"box ({self.x}, {self.y}, {self.w}, {self.h}) leaves the unit square")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def with_score(self, score: float) -> BoundingBoxProposal:
        return BoundingBoxProposal(self.x, self.y, self.w, self.h, self.affinity, score)

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "affinity": self.affinity}

    @classmethod
    def from_json(cls, obj: dict) -> BoundingBoxProposal:
        return cls(
            float(obj["x"]), float(obj["y"]), float(obj["w"]), float(obj["h"]), float(obj["affinity"])
        )


class StopReason(str, enum.Enum):
    STOP_TOKEN = "STOP_TOKEN"
    MAX_ITERATIONS = "MAX_ITERATIONS"


@dataclass(frozen=True)
class RefinementStep:
    feedback: str
    query: str


@dataclass(frozen=True)
class QueryTrace:
    q_init: str
    steps: tuple[RefinementStep, ...]
    stop_reason: StopReason | None
    final_query: str

    def __post_init__(self) -> None:
        expected = self.steps[-1].query if self.steps else self.q_init
        if self.final_query != expected:
            raise ValueError("final_query must be the last refinement (or q_init when no steps)")

    def to_json(self) -> dict:
        return {
            "q_init": self.q_init,
            "steps": [{"feedback": s.feedback, "query": s.query} for s in self.steps],
            "stop_reason": self.stop_reason.value if self.stop_reason else None,
            "final_query": self.final_query,
        }

    def dumps(self) -> str:
        """Canonical serialization; byte-stable for replay comparisons."""
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, obj: dict) -> QueryTrace:
        reason = obj.get("stop_reason")
        return cls(
            q_init=obj["q_init"],
            steps=tuple(RefinementStep(s["feedback"], s["query"]) for s in obj["steps"]),
            stop_reason=StopReason(reason) if reason else None,
            final_query=obj["final_query"],
        )


@dataclass(frozen=True, order=True)
class Hash64:
    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits < 1 << 64:
            raise ValueError(f"hash out of 64-bit range: {self.bits}")

    def __str__(self) -> str:
        return f"{self.bits:016x}"

    @classmethod
    def from_hex(cls, text: str) -> Hash64:
        return cls(int(text, 16))


@dataclass(frozen=True)
class RankedResult:
    item_id: str
    similarity: float
    rank: int

    def to_json(self) -> dict:
        return {"item_id": self.item_id, "similarity": self.similarity, "rank": self.rank}


def rank_results(scored: Iterable[tuple[str, float]], k: int | None = None) -> list[RankedResult]:
    """Order (item_id, similarity) pairs by similarity desc, item_id asc; assign 1-based ranks."""
    ordered = sorted(scored, key=lambda p: (-p[1], p[0]))
    if k is not None:
        ordered = ordered[:k]
    return [RankedResult(item_id, float(sim), i + 1) for i, (item_id, sim) in enumerate(ordered)]


# embedding vectors are plain float32 numpy arrays; these helpers own their invariants


def normalize_vector(values: Sequence[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if dim is not None and vec.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ZeroVector("embedding contains non-finite values")
    norm = math.sqrt(float(np.dot(vec, vec)))
    if norm < 1e-12:
        raise ZeroVector("cannot normalize a zero-norm vector")
    return (vec / norm).astype(np.float32)


def check_embedding(vec: np.ndarray, dim: int) -> np.ndarray:
    """Return ``vec`` as float32 after checking dimension and unit norm."""
    arr = np.asarray(vec, dtype=np.float32).reshape(-1)
    if arr.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {arr.shape[0]}")
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"embedding is not unit-norm (norm={norm:.6f})")
    return arr


@dataclass
class ValidationReport:
    items: list[CatalogItem] = field(default_factory=list)
    violations: list[CatalogError] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_catalog(items: Sequence[CatalogItem]) -> ValidationReport:
    report = ValidationReport()
    seen: set[str] = set()
    for item in items:
        bad = False
        if item.item_id in seen:
            report.violations.append(DuplicateId(item.item_id))
            bad = True
        if not item.product_type.strip():
            report.violations.append(EmptyProductType(item.item_id))
            bad = True
        seen.add(item.item_id)
        if not bad:
            report.items.append(item)
    return report


def validate_catalog(items: Sequence[CatalogItem]) -> list[CatalogItem]:
    """Return ``items`` unchanged if every invariant holds, else raise with all violations."""
    report = check_catalog(items)
    if not report.ok:
        raise CatalogValidationError(report.violations)
    return list(items)


def read_catalog(path: str | Path) -> tuple[list[CatalogItem], list[CatalogError]]:
    """Parse a JSONL catalog. Unparseable lines come back as MalformedRecord errors."""
    items: list[CatalogItem] = []
    errors: list[CatalogError] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(MalformedRecord(None, f"line {lineno}: {exc}"))
                continue
            try:
                items.append(CatalogItem.from_json(obj))
            except MalformedRecord as exc:
                errors.append(exc)
    return items, errors


def write_catalog(items: Iterable[CatalogItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n")


def word_count(text: str) -> int:
    return len(text.split())
