from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from mmretrieval.core import BoundingBoxProposal
from mmretrieval.encoders import (
    BackendKind,
    DeterministicEncoder,
    EncoderBackendDescriptor,
    RemoteEncoder,
    detect_regions,
    encode_image,
    encode_text,
    image_key,
    load_image,
    normalize,
)
from mmretrieval.errors import BackendUnavailable, DimensionMismatch, ImageUnreadable, ZeroVector
from mmretrieval.grounding import FULL_IMAGE, GroundingConfig, RegionDecision, RegionKind, select_region


def raster(seed: int = 0, h: int = 20, w: int = 30) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


class TestNormalize:
    def test_three_four(self):
        v = normalize([3.0, 4.0] + [0.0] * 510, 512)
        np.testing.assert_allclose(v[:3], [0.6, 0.8, 0.0], atol=1e-7)

    def test_unit_unchanged(self):
        e = np.zeros(8)
        e[3] = 1.0
        assert np.array_equal(normalize(e, 8), e.astype(np.float32))

    def test_zero(self):
        with pytest.raises(ZeroVector):
            normalize(np.zeros(4), 4)

    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4).filter(lambda xs: max(map(abs, xs)) > 1e-3))
    def test_idempotent_within_an_ulp(self, xs):
        once = normalize(xs, 4)
        twice = normalize(once, 4)
        assert np.all(np.abs(once - twice) <= np.spacing(np.abs(once)) + 1e-12)


class TestDeterministicEncoder:
    def test_documented_construction(self):
        # independent re-derivation of the documented expansion
        key = int.from_bytes(hashlib.blake2b(b"floral maxi", digest_size=8).digest(), "little")
        draws = np.random.Generator(np.random.Philox(key=key)).standard_normal(16)
        expected = (draws / np.linalg.norm(draws)).astype(np.float32)
        np.testing.assert_allclose(encode_text("floral maxi", DeterministicEncoder(16)), expected, atol=1e-7)

    def test_same_text_same_vector(self):
        enc = DeterministicEncoder(64)
        assert np.array_equal(encode_text("red dress", enc), encode_text("red dress", enc))

    def test_same_image_same_vector(self):
        enc = DeterministicEncoder(64)
        a = encode_image(raster(), FULL_IMAGE, enc)
        b = encode_image(raster().copy(), FULL_IMAGE, enc)
        assert np.array_equal(a, b)
        assert abs(np.linalg.norm(a.astype(np.float64)) - 1.0) < 1e-4

    def test_image_key_matches_text(self):
        enc = DeterministicEncoder(64)
        img = raster(3)
        assert np.array_equal(encode_image(img, FULL_IMAGE, enc), encode_text(image_key(img), enc))

    def test_image_key_sees_shape(self):
        flat = np.zeros((2, 6, 3), dtype=np.uint8)
        assert image_key(flat) != image_key(flat.reshape(6, 2, 3))

    def test_one_character_apart(self):
        enc = DeterministicEncoder(512)
        rng = np.random.default_rng(0)
        alphabet = list("abcdefghijklmnopqrstuvwxyz ")
        worst = -1.0
        for _ in range(1000):
            s = "".join(rng.choice(alphabet, size=int(rng.integers(3, 30))))
            i = int(rng.integers(len(s)))
            t = s[:i] + ("x" if s[i] != "x" else "y") + s[i + 1 :]
            worst = max(worst, float(encode_text(s, enc) @ encode_text(t, enc)))
        assert worst < 0.99

    def test_empty_text(self):
        with pytest.raises(ValueError):
            encode_text("", DeterministicEncoder(8))

    def test_detect_full_box(self):
        (box,) = detect_regions(raster(), "Dresses", DeterministicEncoder(8))
        assert (box.x, box.y, box.w, box.h, box.affinity) == (0, 0, 1, 1, 1.0)

    def test_detect_needs_prompt(self):
        with pytest.raises(ValueError):
            detect_regions(raster(), "", DeterministicEncoder(8))

    def test_crop_is_encoded(self):
        enc = DeterministicEncoder(32)
        img = raster(1, 40, 40)
        crop = RegionDecision(RegionKind.CROP, BoundingBoxProposal(0.25, 0.25, 0.5, 0.5, 1.0, 1.0), 1.0, 0)
        got = encode_image(img, crop, enc)
        assert np.array_equal(got, encode_text(image_key(img[10:30, 10:30]), enc))

    def test_counts_calls(self):
        enc = DeterministicEncoder(8)
        encode_text("a", enc)
        encode_image(raster(), FULL_IMAGE, enc)
        assert enc.calls == 2


class WrongDim:
    dim = 512

    def embed_image(self, r):
        return np.ones(256)

    def embed_text(self, t):
        return np.ones(256)

    def detect(self, r, p):
        return []


def test_backend_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        encode_image(raster(), FULL_IMAGE, WrongDim(), 512)
    with pytest.raises(DimensionMismatch):
        encode_text("x", WrongDim(), 512)


class TestLoadImage:
    def test_png_round_trip(self, tmp_path):
        img = raster(5)
        Image.fromarray(img).save(tmp_path / "a.png")
        assert np.array_equal(load_image("a.png", tmp_path), img)

    def test_grey_and_alpha_become_rgb(self, tmp_path):
        Image.new("L", (4, 3), 7).save(tmp_path / "g.png")
        Image.new("RGBA", (4, 3), (1, 2, 3, 4)).save(tmp_path / "a.png")
        assert load_image(tmp_path / "g.png").shape == (3, 4, 3)
        assert load_image(tmp_path / "a.png")[0, 0].tolist() == [1, 2, 3]

    @pytest.mark.parametrize("content", [None, b"definitely not an image"])
    def test_unreadable(self, tmp_path, content):
        path = tmp_path / "x.png"
        if content is not None:
            path.write_bytes(content)
        with pytest.raises(ImageUnreadable):
            load_image(path)


class TestDescriptor:
    def test_remote_needs_endpoint(self):
        with pytest.raises(ValueError):
            EncoderBackendDescriptor(BackendKind.REMOTE)

    def test_dimension_must_match_engine(self):
        with pytest.raises(DimensionMismatch):
            EncoderBackendDescriptor(dimension=256).build(512)

    def test_builds(self):
        assert isinstance(EncoderBackendDescriptor(dimension=8).build(8), DeterministicEncoder)
        remote = EncoderBackendDescriptor(BackendKind.REMOTE, "http://h:1", 8).build(8)
        assert isinstance(remote, RemoteEncoder)


class _StubEncoder(BaseHTTPRequestHandler):
    routes: dict = {}
    seen: list = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.seen.append((self.path, body))
        status, payload = self.routes[self.path](body)
        raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)


@pytest.fixture
def stub_encoder():
    _StubEncoder.routes, _StubEncoder.seen = {}, []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubEncoder)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{server.server_address[1]}", _StubEncoder
    server.shutdown()
    server.server_close()


class TestRemoteEncoder:
    def test_text_is_normalized_engine_side(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/encode_text"] = lambda body: (200, {"embedding": [3, 4, 0, 0]})
        v = encode_text("hello", RemoteEncoder(url, 4))
        np.testing.assert_allclose(v, [0.6, 0.8, 0, 0], atol=1e-7)
        assert stub.seen == [("/encode_text", {"text": "hello"})]

    def test_image_sends_png(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/encode_image"] = lambda body: (200, {"embedding": [1, 0]})
        img = raster(2, 5, 6)
        encode_image(img, FULL_IMAGE, RemoteEncoder(url, 2))
        sent = base64.b64decode(stub.seen[0][1]["image_b64"])
        assert np.array_equal(np.asarray(Image.open(io.BytesIO(sent))), img)

    def test_detect(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/detect"] = lambda body: (
            200, {"proposals": [{"x": 0.1, "y": 0.1, "w": 0.5, "h": 0.5, "affinity": 2.0}]}
        )
        props = detect_regions(raster(), "Dresses", RemoteEncoder(url, 4))
        assert props == [BoundingBoxProposal(0.1, 0.1, 0.5, 0.5, 2.0)]
        assert stub.seen[0][1]["prompt"] == "Dresses"

    def test_empty_proposals(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/detect"] = lambda body: (200, {"proposals": []})
        props = detect_regions(raster(), "Dresses", RemoteEncoder(url, 4))
        assert props == []
        assert select_region(props, GroundingConfig()) == FULL_IMAGE

    def test_malformed_reply_quotes_payload(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/detect"] = lambda body: (200, b"<html>gateway hiccup</html>")
        with pytest.raises(BackendUnavailable, match="gateway hiccup"):
            detect_regions(raster(), "Dresses", RemoteEncoder(url, 4))

    def test_bad_proposals(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/detect"] = lambda body: (200, {"proposals": [{"x": 2}]})
        with pytest.raises(BackendUnavailable):
            detect_regions(raster(), "Dresses", RemoteEncoder(url, 4))

    def test_http_error(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/encode_text"] = lambda body: (503, {"error": "overloaded"})
        with pytest.raises(BackendUnavailable, match="overloaded"):
            encode_text("x", RemoteEncoder(url, 4))

    def test_wrong_dimension(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/encode_text"] = lambda body: (200, {"embedding": [1.0] * 256})
        with pytest.raises(DimensionMismatch):
            encode_text("x", RemoteEncoder(url, 512))

    def test_zero_vector(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/encode_text"] = lambda body: (200, {"embedding": [0, 0]})
        with pytest.raises(ZeroVector):
            encode_text("x", RemoteEncoder(url, 2))

    def test_concurrent_calls(self, stub_encoder):
        url, stub = stub_encoder
        stub.routes["/encode_text"] = lambda body: (200, {"embedding": [1, len(body["text"])]})
        enc = RemoteEncoder(url, 2, max_in_flight=3)
        out: list = []
        threads = [threading.Thread(target=lambda i=i: out.append(encode_text("x" * i, enc))) for i in range(1, 13)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(out) == 12 and enc.calls == 12
