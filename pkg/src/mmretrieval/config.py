"""Engine configuration and its on-disk format.

Two file forms are accepted.

``*.json``: a JSON object whose nesting mirrors the dotted keys below.

Anything else is a line-oriented ``key = value`` file::

    # comments start with '#'
    dim = 64
    [hnsw]                  # section header: prefixes following keys with "hnsw."
    M = 24
    ef_search = 100
    [encoder]
    kind = "REMOTE"
    endpoint = http://127.0.0.1:9000

Keys are dotted paths into :class:`EngineConfig` (``hnsw.M``,
``grounding.tau_thresh``, ``agent.max_words``, ...). A value is parsed as
JSON when it is valid JSON (numbers, ``true``/``false``, quoted strings,
lists) and taken as a bare string otherwise. ``[]`` resets the prefix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .agent.loop import AgentConfig
from .core import DEFAULT_DIM
from .encoders import BackendKind, EncoderBackendDescriptor
from .grounding import GroundingConfig
from .hnsw import HnswParams
from .templates import PromptSet


@dataclass(frozen=True)
class AgentSettings:
    i_max: int = 5
    min_words: int = 10
    max_words: int = 20
    prompts_dir: str | None = None

    def build(self) -> AgentConfig:
        prompts = PromptSet.from_dir(self.prompts_dir) if self.prompts_dir else PromptSet.defaults()
        return AgentConfig(i_max=self.i_max, min_words=self.min_words, max_words=self.max_words, prompts=prompts)


@dataclass(frozen=True)
class CompletionBackendDescriptor:
    """Where agent or judge completions come from.

    ``kind`` is ``mock`` (rule-based, in process), ``http`` (``endpoint``)
    or ``replay`` (JSONL transcript at ``path``).
    """

    kind: str = "mock"
    endpoint: str | None = None
    path: str | None = None
    timeout_ms: int = 30_000
    max_in_flight: int = 8

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "http", "replay"):
            raise ValueError(f"unknown completion backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("an http completion backend needs an endpoint")
        if self.kind == "replay" and not self.path:
            raise ValueError("a replay completion backend needs a transcript path")


@dataclass(frozen=True)
class EngineConfig:
    catalog: str | None = None
    image_dir: str | None = None
    store_dir: str = "store"
    index_dir: str = "index"
    dim: int = DEFAULT_DIM
    dedup_threshold: int = 4
    top_k: int = 10
    workers: int = 4
    seed: int = 0
    fsync: bool = True
    bind: str = "127.0.0.1:8080"
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    hnsw: HnswParams = field(default_factory=HnswParams)
    agent: AgentSettings = field(default_factory=AgentSettings)
    encoder: EncoderBackendDescriptor = field(default_factory=EncoderBackendDescriptor)
    agent_backend: CompletionBackendDescriptor = field(default_factory=CompletionBackendDescriptor)
    judge_backend: CompletionBackendDescriptor = field(default_factory=CompletionBackendDescriptor)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.encoder.dimension != self.dim:
            # the descriptor follows the engine unless it was set explicitly to something else
            if self.encoder.dimension == DEFAULT_DIM:
                object.__setattr__(self, "encoder", replace(self.encoder, dimension=self.dim))
            else:
                raise ValueError(f"encoder dimension {self.encoder.dimension} != engine dim {self.dim}")
        if self.top_k < 1 or self.workers < 1:
            raise ValueError("top_k and workers must be positive")

    def with_overrides(self, overrides: Mapping[str, Any]) -> EngineConfig:
        return from_mapping(overrides, base=self)

    def to_json(self) -> dict:
        out = asdict(self)
        out["encoder"]["kind"] = self.encoder.kind.value
        return out


def _nest(flat: Mapping[str, Any]) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"config key {key!r} collides with a scalar")
        node[parts[-1]] = value
    return tree


def _apply(obj: Any, tree: Mapping[str, Any], where: str) -> Any:
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for name, value in tree.items():
        if name not in known:
            raise ValueError(f"unknown config key {where}{name}")
        current = getattr(obj, name)
        if is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ValueError(f"config key {where}{name} is a section, not a value")
            changes[name] = _apply(current, value, f"{where}{name}.")
        elif name == "kind" and isinstance(current, BackendKind):
            changes[name] = BackendKind(value)
        else:
            changes[name] = value
    if isinstance(obj, HnswParams) and "M" in changes:
        # M0 and mL follow M unless they were set to something else
        fresh = HnswParams(M=obj.M, ef_construction=max(obj.M, 2))
        for derived in ("M0", "mL"):
            if derived not in changes and getattr(obj, derived) == getattr(fresh, derived):
                changes[derived] = None
    return replace(obj, **changes)


def from_mapping(values: Mapping[str, Any], base: EngineConfig | None = None) -> EngineConfig:
    """Build a config from a nested or dotted-key mapping layered over ``base``."""
    base = base or EngineConfig()
    flat_keys = {k: v for k, v in values.items() if "." in k}
    tree = {k: v for k, v in values.items() if "." not in k}
    for key, value in _nest(flat_keys).items():
        if isinstance(tree.get(key), dict):
            tree[key] = {**tree[key], **value}
        else:
            tree[key] = value
    if "dim" in tree and "encoder" not in tree:
        tree["encoder"] = {"dimension": tree["dim"]}
    elif "dim" in tree and "dimension" not in tree["encoder"]:
        tree["encoder"] = {**tree["encoder"], "dimension": tree["dim"]}
    return _apply(base, tree, "")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_kv(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    prefix = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            header = line.split("#", 1)[0].strip()
            if not header.endswith("]"):
                raise ValueError(f"line {lineno}: malformed section header {raw!r}")
            name = header[1:-1].strip()
            prefix = f"{name}." if name else ""
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if not value.startswith(("\"", "[", "{")) and " #" in value:
            value = value.split(" #", 1)[0].rstrip()
        out[prefix + key] = _parse_value(value)
    return out


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> EngineConfig:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        values = json.loads(text) if path.suffix == ".json" else parse_kv(text)
    config = from_mapping(values)
    return config.with_overrides(overrides) if overrides else config
