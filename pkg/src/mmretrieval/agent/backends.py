"""Completion backends for the summarizer / evaluator / refiner agents.

Wire protocol (HTTP): ``POST {role, system, user}`` returns ``{completion}``.
Transcripts are JSONL, one ``{"request": {...}, "response": {"completion": ...}}``
object per call, in call order.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol

from ..errors import BackendUnavailable


@dataclass(frozen=True)
class AgentRequest:
    role: str
    system: str
    user: str
    # structured inputs for in-process backends; never sent over the wire
    fields: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def wire(self) -> dict[str, str]:
        return {"role": self.role, "system": self.system, "user": self.user}


class AgentBackend(Protocol):
    def complete(self, request: AgentRequest) -> str: ...


class HttpAgentBackend:
    def __init__(self, endpoint: str, timeout_ms: int = 30_000, max_in_flight: int = 8) -> None:
        self.endpoint = endpoint
        self.timeout = timeout_ms / 1000.0
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: AgentRequest) -> str:
        body = json.dumps(request.wire()).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    raw = resp.read()
            except urllib.error.HTTPError as exc:
                detail = exc.read()[:200].decode("utf-8", "replace")
                raise BackendUnavailable(f"agent backend HTTP {exc.code}: {detail}") from exc
            except (urllib.error.URLError, OSError) as exc:
                raise BackendUnavailable(f"agent backend unreachable: {exc}") from exc
        try:
            completion = json.loads(raw)["completion"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendUnavailable(f"malformed agent reply: {raw[:200]!r}") from exc
        if not isinstance(completion, str):
            raise BackendUnavailable(f"agent completion is not a string: {completion!r:.200}")
        return completion


def _wire_key(wire: dict) -> str:
    return json.dumps(wire, sort_keys=True, ensure_ascii=False)


class ReplayBackend:
    """Serves recorded completions in order.

    With ``strict`` set, every incoming request must equal the recorded one,
    so a replay proves the caller issued exactly the same calls. With
    ``ordered`` unset, completions are looked up by request content instead
    of position, which suits callers that issue requests concurrently.
    """

    def __init__(self, records: Iterable[dict], strict: bool = True, ordered: bool = True) -> None:
        self.records = list(records)
        self.strict = strict
        self.ordered = ordered
        self._pos = 0
        self._lock = threading.Lock()
        self._by_key: dict[str, list[str]] = {}
        for record in self.records:
            self._by_key.setdefault(_wire_key(record["request"]), []).append(record["response"]["completion"])

    @classmethod
    def from_file(cls, path: str | Path, strict: bool = True, ordered: bool = True) -> ReplayBackend:
        with open(path, encoding="utf-8") as fh:
            return cls((json.loads(line) for line in fh if line.strip()), strict, ordered)

    @property
    def exhausted(self) -> bool:
        return self._pos >= len(self.records)

    def complete(self, request: AgentRequest) -> str:
        if not self.ordered:
            with self._lock:
                queue = self._by_key.get(_wire_key(request.wire()))
                if not queue:
                    raise BackendUnavailable(f"no recorded completion left for this {request.role!r} request")
                self._pos += 1
                return queue.pop(0)
        with self._lock:
            if self._pos >= len(self.records):
                raise BackendUnavailable(f"transcript exhausted after {self._pos} calls")
            record = self.records[self._pos]
            self._pos += 1
        expected = record["request"]
        if expected.get("role") != request.role:
            raise BackendUnavailable(
                f"transcript call {self._pos}: expected role {expected.get('role')!r}, got {request.role!r}"
            )
        if self.strict and expected != request.wire():
            raise BackendUnavailable(f"transcript call {self._pos}: request differs from the recording")
        return record["response"]["completion"]


class RecordingBackend:
    """Wraps a backend and appends every exchange to a transcript."""

    def __init__(self, inner: AgentBackend) -> None:
        self.inner = inner
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def complete(self, request: AgentRequest) -> str:
        completion = self.inner.complete(request)
        with self._lock:
            self.records.append({"request": request.wire(), "response": {"completion": completion}})
        return completion

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for record in self.records:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


class ScriptedBackend:
    """Returns canned completions per role, in order; for tests and fixtures."""

    def __init__(self, script: dict[str, list[str]]) -> None:
        self.script = {role: list(items) for role, items in script.items()}

    def complete(self, request: AgentRequest) -> str:
        queue = self.script.get(request.role)
        if not queue:
            raise BackendUnavailable(f"no scripted completion left for role {request.role!r}")
        return queue.pop(0)
