"""Embedding and detector backends.

Two backends ship here. ``DeterministicEncoder`` runs in-process and is meant
for tests and desk-scale runs: it turns bytes into a reproducible pseudo-random
unit vector. ``RemoteEncoder`` speaks a small JSON-over-HTTP protocol to a model
server. Both deliver *raw* vectors; :func:`normalize` is always applied here,
engine-side, so every backend shares one contract.

Deterministic expansion, fixed so vectors reproduce across platforms:

1. key = first 8 bytes of BLAKE2b(input bytes) read as a little-endian u64;
2. draws = ``numpy.random.Generator(Philox(key=key)).standard_normal(D)``
   (Philox-4x64 counter-based generator, float64 draws);
3. vector = draws / ||draws||, stored as float32.

Text inputs hash their UTF-8 bytes. An image hashes through its *image key*,
the text ``"raster:" + hex(BLAKE2b-128(header + pixels))``, so a raster and its
key string embed to the same vector. That gives tests a way to plant text
queries that must retrieve a specific image.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import io
import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .core import DEFAULT_DIM, BoundingBoxProposal, normalize_vector
from .errors import BackendUnavailable, DimensionMismatch, ImageUnreadable
from .grounding import RegionDecision, apply_decision


def normalize(values: Sequence[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Divide by the Euclidean norm; raises ZeroVector below 1e-12."""
    return normalize_vector(values, dim)


def load_image(ref: str | Path, base_dir: str | Path | None = None) -> np.ndarray:
    """Decode an image file into an H x W x 3 uint8 array."""
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ImageUnreadable(f"cannot read image {str(path)!r}: {exc}") from exc


def png_bytes(raster: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(raster)).save(buf, format="PNG")
    return buf.getvalue()


class EncoderBackend(Protocol):
    dim: int

    def embed_image(self, raster: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...

    def detect(self, raster: np.ndarray, prompt: str) -> list[BoundingBoxProposal]: ...


def stable_hash64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def expand_to_unit(seed: int, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed))
    return normalize_vector(rng.standard_normal(dim))


def image_key(raster: np.ndarray) -> str:
    arr = np.ascontiguousarray(raster, dtype=np.uint8)
    header = np.array(arr.shape, dtype="<u4").tobytes()
    digest = hashlib.blake2b(header + arr.tobytes(), digest_size=16).hexdigest()
    return f"raster:{digest}"


class DeterministicEncoder:
    """In-process test backend; a pure function of its input bytes."""

    def __init__(self, dim: int = DEFAULT_DIM) -> None:
        self.dim = dim
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def _tick(self) -> None:
        with self._lock:
            self._calls += 1

    def embed_text(self, text: str) -> np.ndarray:
        self._tick()
        return expand_to_unit(stable_hash64(text.encode("utf-8")), self.dim)

    def embed_image(self, raster: np.ndarray) -> np.ndarray:
        self._tick()
        return expand_to_unit(stable_hash64(image_key(raster).encode("utf-8")), self.dim)

    def detect(self, raster: np.ndarray, prompt: str) -> list[BoundingBoxProposal]:
        return [BoundingBoxProposal(0.0, 0.0, 1.0, 1.0, 1.0)]


class RemoteEncoder:
    """Client for the encoder/detector HTTP protocol.

    ``POST /encode_image {image_b64}``, ``POST /encode_text {text}`` and
    ``POST /detect {image_b64, prompt}``; non-2xx replies carry ``{error}``.
    """

    def __init__(
        self, endpoint: str, dim: int = DEFAULT_DIM, timeout_ms: int = 10_000, max_in_flight: int = 8
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.dim = dim
        self.timeout = timeout_ms / 1000.0
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def _post(self, route: str, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint + route, data=body, headers={"Content-Type": "application/json"}
        )
        with self._lock:
            self._calls += 1
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    raw = resp.read()
            except urllib.error.HTTPError as exc:
                detail = exc.read()[:200].decode("utf-8", "replace")
                raise BackendUnavailable(f"{route} returned HTTP {exc.code}: {detail}") from exc
            except (urllib.error.URLError, OSError) as exc:
                raise BackendUnavailable(f"{route} unreachable: {exc}") from exc
        try:
            reply = json.loads(raw)
            if not isinstance(reply, dict):
                raise ValueError("reply is not an object")
            return reply
        except ValueError as exc:
            excerpt = raw[:200].decode("utf-8", "replace")
            raise BackendUnavailable(f"{route} sent a malformed reply: {excerpt!r}") from exc

    def _vector(self, route: str, payload: dict) -> np.ndarray:
        reply = self._post(route, payload)
        emb = reply.get("embedding")
        if not isinstance(emb, list) or not all(isinstance(v, (int, float)) for v in emb):
            raise BackendUnavailable(f"{route} reply lacks a numeric embedding: {str(reply)[:200]!r}")
        return np.asarray(emb, dtype=np.float64)

    def embed_image(self, raster: np.ndarray) -> np.ndarray:
        return self._vector("/encode_image", {"image_b64": base64.b64encode(png_bytes(raster)).decode()})

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector("/encode_text", {"text": text})

    def detect(self, raster: np.ndarray, prompt: str) -> list[BoundingBoxProposal]:
        reply = self._post(
            "/detect", {"image_b64": base64.b64encode(png_bytes(raster)).decode(), "prompt": prompt}
        )
        try:
            return [BoundingBoxProposal.from_json(p) for p in reply["proposals"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"/detect sent malformed proposals: {str(reply)[:200]!r}") from exc


class BackendKind(str, enum.Enum):
    DETERMINISTIC_TEST = "DETERMINISTIC_TEST"
    REMOTE = "REMOTE"


@dataclass(frozen=True)
class EncoderBackendDescriptor:
    kind: BackendKind = BackendKind.DETERMINISTIC_TEST
    endpoint: str | None = None
    dimension: int = DEFAULT_DIM
    timeout_ms: int = 10_000
    max_in_flight: int = 8

    def __post_init__(self) -> None:
        if self.kind is BackendKind.REMOTE and not self.endpoint:
            raise ValueError("a REMOTE encoder backend needs an endpoint")
        if self.dimension < 1:
            raise ValueError(f"dimension must be positive, got {self.dimension}")

    def build(self, engine_dim: int | None = None) -> EncoderBackend:
        if engine_dim is not None and engine_dim != self.dimension:
            raise DimensionMismatch(f"backend dimension {self.dimension} != engine D {engine_dim}")
        if self.kind is BackendKind.REMOTE:
            assert self.endpoint is not None
            return RemoteEncoder(self.endpoint, self.dimension, self.timeout_ms, self.max_in_flight)
        return DeterministicEncoder(self.dimension)


def encode_image(
    image: str | Path | np.ndarray,
    decision: RegionDecision,
    backend: EncoderBackend,
    dim: int | None = None,
    base_dir: str | Path | None = None,
) -> np.ndarray:
    raster = image if isinstance(image, np.ndarray) else load_image(image, base_dir)
    region = apply_decision(raster, decision)
    return normalize(backend.embed_image(region), dim or backend.dim)


def encode_text(text: str, backend: EncoderBackend, dim: int | None = None) -> np.ndarray:
    if not text:
        raise ValueError("cannot encode empty text")
    return normalize(backend.embed_text(text), dim or backend.dim)


def detect_regions(
    image: str | Path | np.ndarray,
    prompt: str,
    backend: EncoderBackend,
    base_dir: str | Path | None = None,
) -> list[BoundingBoxProposal]:
    if not prompt:
        raise ValueError("detector prompt must be non-empty")
    raster = image if isinstance(image, np.ndarray) else load_image(image, base_dir)
    return backend.detect(raster, prompt)
