import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmem.embedding import (
    EmbeddingError,
    EmbeddingProviderConfig,
    content_hash,
    cosine,
    embed_batch,
)

HASH64 = EmbeddingProviderConfig(kind="hash", dim=64, seed=0)


def test_hash_provider_deterministic():
    a = embed_batch(["same text", "same text"], HASH64)
    assert np.array_equal(a.values[0], a.values[1])
    b = embed_batch(["same text"], HASH64)
    assert np.array_equal(a.values[0], b.values[0])


def test_hash_provider_seed_sensitivity():
    other = EmbeddingProviderConfig(kind="hash", dim=64, seed=1)
    a = embed_batch(["same text"], HASH64).values[0]
    b = embed_batch(["same text"], other).values[0]
    assert not np.allclose(a, b)


def test_rows_unit_normalized():
    mat = embed_batch(["alpha", "beta gamma", "x"], HASH64)
    norms = np.linalg.norm(mat.values, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)


def test_zero_vector_replaced_and_counted():
    mat = embed_batch([""], HASH64)
    assert mat.zero_replaced == 1
    assert np.isclose(np.linalg.norm(mat.values[0]), 1.0)


def test_unrelated_random_strings_decorrelated():
    rng = np.random.default_rng(123)
    alphabet = np.array(list("abcdefghijklmnopqrstuvwxyz "))
    texts = ["".join(rng.choice(alphabet, size=200)) for _ in range(400)]
    mats = embed_batch(texts, HASH64).values
    cos = np.sum(mats[0::2] * mats[1::2], axis=1)
    assert np.all(np.abs(cos) < 0.5)


def test_cosine_endpoints():
    u = np.zeros(8)
    u[0] = 1.0
    v = np.zeros(8)
    v[1] = 1.0
    assert cosine(u, u) == 1.0
    assert cosine(u, -u) == -1.0
    assert cosine(u, v) == 0.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine(np.ones(3) / np.sqrt(3), np.ones(4) / 2.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cosine_symmetric_and_clamped(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=16)
    u /= np.linalg.norm(u)
    v = rng.normal(size=16)
    v /= np.linalg.norm(v)
    assert cosine(u, v) == cosine(v, u)
    assert -1.0 <= cosine(u, v) <= 1.0


def test_file_provider_hit_and_miss(tmp_path):
    cache = tmp_path / "cache.json"
    vec = [1.0] + [0.0] * 63
    cache.write_text(json.dumps({content_hash("known text"): vec}))
    cfg = EmbeddingProviderConfig(kind="file", dim=64, cache_path=str(cache))
    mat = embed_batch(["known text"], cfg)
    assert np.isclose(mat.values[0][0], 1.0)
    with pytest.raises(EmbeddingError, match="cache miss"):
        embed_batch(["unknown text"], cfg)


class _EmbedStub(BaseHTTPRequestHandler):
    failures = 0

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        if _EmbedStub.failures > 0:
            _EmbedStub.failures -= 1
            self.send_response(503)
            self.end_headers()
            return
        dim = 8
        data = [{"embedding": [float(i + 1)] + [0.0] * (dim - 1)}
                for i, _ in enumerate(body["input"])]
        payload = json.dumps({"data": data}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def embed_server():
    server = HTTPServer(("127.0.0.1", 0), _EmbedStub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/embed"
    server.shutdown()


def test_http_provider_round_trip_and_cache(tmp_path, embed_server):
    cache = tmp_path / "http_cache.json"
    cfg = EmbeddingProviderConfig(kind="http", dim=8, endpoint=embed_server,
                                  cache_path=str(cache))
    mat = embed_batch(["hello", "world"], cfg)
    assert mat.rows == 2
    assert np.allclose(np.linalg.norm(mat.values, axis=1), 1.0)
    saved = json.loads(cache.read_text())
    assert content_hash("hello") in saved
    # Second call is served from the write-through cache (stub not needed).
    again = embed_batch(["hello"], EmbeddingProviderConfig(
        kind="file", dim=8, cache_path=str(cache)))
    assert np.allclose(again.values[0], mat.values[0])


def test_http_provider_retries_then_fails(tmp_path, embed_server):
    _EmbedStub.failures = 99
    cfg = EmbeddingProviderConfig(kind="http", dim=8, endpoint=embed_server,
                                  cache_path=str(tmp_path / "c.json"), max_attempts=2)
    try:
        with pytest.raises(EmbeddingError, match="after 2 attempts"):
            embed_batch(["x"], cfg)
    finally:
        _EmbedStub.failures = 0


def test_config_validation():
    with pytest.raises(ValueError):
        EmbeddingProviderConfig(kind="hash", dim=1)
    with pytest.raises(ValueError):
        EmbeddingProviderConfig(kind="http", dim=8)
    with pytest.raises(ValueError):
        EmbeddingProviderConfig(kind="nope", dim=8)
