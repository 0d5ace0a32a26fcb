"""Retrieval metrics and the judge-based evaluation harness."""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .agent.backends import AgentBackend, AgentRequest
from .agent.loop import DEFAULT_COLOR_TERMS
from .agent.mock import VISUAL_TERMS, norm_token
from .core import CatalogItem, RankedResult
from .errors import RetrievalError, UnparseableVerdict
from .templates import PromptSet, render

EVAL_DEPTH = 10
DEFAULT_KS = (1, 3, 5)


@dataclass(frozen=True)
class RankOutcome:
    query_id: str
    rank: int | None  # None: the correct item was not within the retrieved depth

    def __post_init__(self) -> None:
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class JudgedList:
    query_id: str
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(label not in (0, 1) for label in self.labels):
            raise ValueError("relevance labels must be 0 or 1")


def hits_at_k(outcomes: Sequence[RankOutcome], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not outcomes:
        raise ValueError("no outcomes to score")
    return sum(1 for o in outcomes if o.rank is not None and o.rank <= k) / len(outcomes)


def mrr(outcomes: Sequence[RankOutcome]) -> float:
    if not outcomes:
        raise ValueError("no outcomes to score")
    return sum(1.0 / o.rank for o in outcomes if o.rank is not None) / len(outcomes)


def precision_at_k(judged: JudgedList | Sequence[int], k: int) -> float:
    labels = judged.labels if isinstance(judged, JudgedList) else tuple(judged)
    if not 1 <= k <= len(labels):
        raise ValueError(f"k={k} needs at least k labels, have {len(labels)}")
    return sum(labels[:k]) / k


# judges


class JudgeProtocol(str, enum.Enum):
    QUERY_BASED = "query"
    SIMILAR_ITEM = "similar"


def parse_verdict(completion: str) -> int:
    """Strict: the whole completion, stripped, must be a single 0 or 1."""
    text = completion.strip()
    if text not in ("0", "1"):
        raise UnparseableVerdict(f"judge must answer exactly 0 or 1, got {completion[:80]!r}")
    return int(text)


def judge(
    protocol: JudgeProtocol,
    left: str | CatalogItem,
    right: CatalogItem,
    backend: AgentBackend,
    prompts: PromptSet | None = None,
) -> int:
    """Binary relevance of ``right`` for a query text or anchor item ``left``."""
    prompts = prompts or PromptSet.defaults()
    if protocol is JudgeProtocol.QUERY_BASED:
        assert isinstance(left, str)
        user = render(prompts.judge_query, query=left, image=right.image_ref)
        fields = {"query": left, "item": right}
    else:
        assert isinstance(left, CatalogItem)
        user = render(prompts.judge_similar, image1=left.image_ref, image2=right.image_ref)
        fields = {"anchor": left, "item": right}
    request = AgentRequest(f"judge_{protocol.value}", "", user, fields)
    return parse_verdict(backend.complete(request))


# visual attributes a judge or query template may key on: colors plus pattern/material/shape words
ATTRIBUTE_TERMS = VISUAL_TERMS | frozenset(DEFAULT_COLOR_TERMS)
_STOPWORDS = frozenset("a an and the with for of in on to by at from or is".split())


def content_tokens(text: str) -> set[str]:
    return {t for t in (norm_token(w) for w in text.split()) if t and t not in _STOPWORDS}


def _item_tokens(item: CatalogItem) -> set[str]:
    return content_tokens(" ".join((item.product_type, item.gender_age or "", item.raw_text)))


class AttributeOverlapJudge:
    """Mock judge working from catalog metadata instead of pixels.

    Query pairs score 1 when at least ``min_overlap`` of the query's content
    words occur in the result's metadata. Anchor pairs score 1 when both
    items share a product type and at least one visual attribute word.
    """

    def __init__(self, min_overlap: float = 0.5) -> None:
        self.min_overlap = min_overlap

    def complete(self, request: AgentRequest) -> str:
        item: CatalogItem = request.fields["item"]
        if "query" in request.fields:
            wanted = content_tokens(request.fields["query"])
            if not wanted:
                return "0"
            overlap = len(wanted & _item_tokens(item)) / len(wanted)
            return "1" if overlap >= self.min_overlap else "0"
        anchor: CatalogItem = request.fields["anchor"]
        if anchor.product_type != item.product_type:
            return "0"
        shared = _item_tokens(anchor) & _item_tokens(item) & ATTRIBUTE_TERMS
        return "1" if shared else "0"


class ExactMatchJudge:
    """Relevant iff the result is the known target of the query or anchor."""

    def __init__(self, targets: Mapping[str, str]) -> None:
        # targets: query text or anchor id -> relevant item id
        self.targets = dict(targets)

    def complete(self, request: AgentRequest) -> str:
        key = request.fields["query"] if "query" in request.fields else request.fields["anchor"].item_id
        return "1" if self.targets.get(key) == request.fields["item"].item_id else "0"


class ConstantJudge:
    def __init__(self, verdict: str = "0") -> None:
        self.verdict = verdict

    def complete(self, request: AgentRequest) -> str:
        return self.verdict


# query generation


def template_query(item: CatalogItem, max_words: int = 12) -> str:
    """Query from catalog fields: visual words of the metadata, then the product type."""
    words = []
    for w in item.raw_text.split():
        key = norm_token(w)
        if key in ATTRIBUTE_TERMS and key not in words:
            words.append(key)
    words = words[: max(0, max_words - len(item.product_type.split()))]
    prefix = f"{item.gender_age} " if item.gender_age else ""
    return (prefix + " ".join(words + [item.product_type])).strip()


# evaluation run


class RetrievalEngine(Protocol):
    def query_text(self, text: str, k: int = EVAL_DEPTH) -> list[RankedResult]: ...

    def query_similar(self, item_id: str, k: int = EVAL_DEPTH) -> list[RankedResult]: ...

    def item(self, item_id: str) -> CatalogItem: ...

    def indexed_ids(self) -> list[str]: ...


@dataclass
class EvalReport:
    protocol: str
    precision: dict[int, float] = field(default_factory=dict)
    hits_at_5: float | None = None
    mrr: float | None = None
    n_queries: int = 0
    n_judged: int = 0
    errors: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "precision": {f"precision@{k}": v for k, v in sorted(self.precision.items())},
            "hits@5": self.hits_at_5,
            "mrr": self.mrr,
            "counts": {"queries": self.n_queries, "judged_pairs": self.n_judged, "errors": len(self.errors)},
            "errors": list(self.errors),
            "config": dict(self.config),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def table(self, model: str = "engine") -> str:
        title = "Query-based retrieval" if self.protocol == JudgeProtocol.QUERY_BASED.value else (
            "Similar item recommendation"
        )
        ks = sorted(self.precision)
        header = "Model".ljust(12) + "".join(f"Precision@{k}".rjust(14) for k in ks)
        row = model.ljust(12) + "".join(f"{self.precision[k]:.4f}".rjust(14) for k in ks)
        rule = "-" * len(header)
        return "\n".join([title.center(len(header)), rule, header, rule, row, rule]) + "\n"


def _collect(
    pairs: list[tuple[str, str | CatalogItem, list[RankedResult]]],
    protocol: JudgeProtocol,
    engine: RetrievalEngine,
    backend: AgentBackend,
    prompts: PromptSet,
    max_in_flight: int,
    errors: list[str],
) -> dict[str, list[int]]:
    jobs = []
    for qid, left, results in pairs:
        for pos, result in enumerate(results):
            jobs.append((qid, pos, left, result.item_id))

    def run(job):
        qid, pos, left, item_id = job
        try:
            return qid, pos, judge(protocol, left, engine.item(item_id), backend, prompts), None
        except RetrievalError as exc:
            return qid, pos, None, f"{qid}: judging {item_id}: {exc}"

    labels: dict[str, list[int]] = {qid: [0] * len(results) for qid, _, results in pairs}
    failed: set[str] = set()
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        for qid, pos, verdict, err in pool.map(run, jobs):
            if err is not None:
                errors.append(err)
                failed.add(qid)
            else:
                labels[qid][pos] = verdict
    return {qid: lab for qid, lab in labels.items() if qid not in failed}


def evaluate_retrieval(
    engine: RetrievalEngine,
    eval_items: Iterable[str],
    protocol: JudgeProtocol | str,
    judge_backend: AgentBackend,
    ks: Sequence[int] = DEFAULT_KS,
    depth: int = EVAL_DEPTH,
    queries: Mapping[str, str] | None = None,
    query_generator: Callable[[CatalogItem], str] = template_query,
    ground_truth: Mapping[str, str] | None = None,
    n_anchors: int = 100,
    seed: int = 0,
    prompts: PromptSet | None = None,
    max_in_flight: int = 8,
) -> EvalReport:
    """Retrieve ``depth`` results per eval item, judge each pair, aggregate Precision@k.

    QUERY_BASED: each eval item yields a query (from ``queries`` or the
    generator); the item itself is the ground truth for HITS@5/MRR.
    SIMILAR_ITEM: up to ``n_anchors`` eval items are sampled uniformly as
    anchors; HITS@5/MRR are computed only when ``ground_truth`` maps anchors
    to their expected match. Retrieval or judge failures are recorded in the
    report and the affected query is dropped; the rest still count.
    """
    protocol = JudgeProtocol(protocol)
    prompts = prompts or PromptSet.defaults()
    if max(ks) > depth:
        raise ValueError("every k must be <= the retrieval depth")
    items = list(eval_items)
    report = EvalReport(
        protocol=protocol.value,
        config={"depth": depth, "ks": list(ks), "seed": seed, "n_anchors": n_anchors},
    )
    if protocol is JudgeProtocol.SIMILAR_ITEM and len(items) > n_anchors:
        rng = np.random.Generator(np.random.PCG64(seed))
        picked = sorted(rng.choice(len(items), size=n_anchors, replace=False).tolist())
        items = [items[i] for i in picked]

    truth: dict[str, str] = dict(ground_truth or {})
    retrieved: list[tuple[str, str | CatalogItem, list[RankedResult]]] = []
    for item_id in items:
        try:
            if protocol is JudgeProtocol.QUERY_BASED:
                text = queries[item_id] if queries and item_id in queries else query_generator(engine.item(item_id))
                retrieved.append((item_id, text, engine.query_text(text, depth)))
                truth.setdefault(item_id, item_id)
            else:
                retrieved.append((item_id, engine.item(item_id), engine.query_similar(item_id, depth)))
        except RetrievalError as exc:
            report.errors.append(f"{item_id}: retrieval failed: {exc}")

    labels = _collect(retrieved, protocol, engine, judge_backend, prompts, max_in_flight, report.errors)
    kept = [(qid, results) for qid, _, results in retrieved if qid in labels]
    report.n_queries = len(kept)
    report.n_judged = sum(len(v) for v in labels.values())
    if kept:
        for k in ks:
            # fewer than k results pad with non-relevant labels
            report.precision[k] = float(
                np.mean([precision_at_k(labels[qid] + [0] * max(0, k - len(labels[qid])), k) for qid, _ in kept])
            )
        outcomes = []
        for qid, results in kept:
            if qid in truth:
                ranks = [r.rank for r in results if r.item_id == truth[qid]]
                outcomes.append(RankOutcome(qid, ranks[0] if ranks else None))
        if outcomes:
            report.hits_at_5 = hits_at_k(outcomes, 5)
            report.mrr = mrr(outcomes)
    else:
        report.precision = {k: 0.0 for k in ks}
    return report
