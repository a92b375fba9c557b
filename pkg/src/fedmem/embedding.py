"""Dense embedding providers and the small vector math used downstream.

Every vector leaving this module is L2-normalized, so cosine similarity is a
plain dot product everywhere else. The hash provider (signed feature hashing
of character 3-5-grams) is the hermetic default: deterministic in
(text, seed, dim) across platforms.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import normalize

log = logging.getLogger(__name__)

_NORM_TOL = 1e-6
_cache_lock = threading.Lock()


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    kind: str = "hash"  # hash | file | http
    dim: int = 64
    seed: int = 0
    cache_path: str | None = None
    endpoint: str | None = None
    model: str | None = None
    max_attempts: int = 5
    timeout: float = 60.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dim must be >= 2")
        if self.kind not in ("hash", "file", "http"):
            raise ValueError(f"unknown provider kind: {self.kind}")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http provider requires an endpoint")
        if self.kind == "file" and not self.cache_path:
            raise ValueError("file provider requires a cache_path")


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    zero_replaced: int = 0

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise EmbeddingError("embedding matrix contains NaN/Inf")
        norms = np.linalg.norm(self.values, axis=1)
        if self.rows and (norms.min() < 1 - _NORM_TOL or norms.max() > 1 + _NORM_TOL):
            raise EmbeddingError("embedding rows are not unit-normalized")


def content_hash(text: str) -> str:
    return hashlib.sha256(normalize(text).encode("utf-8")).hexdigest()


def _unit_fallback(dim: int) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = 1.0
    return v


def _finalize(raw: np.ndarray) -> EmbeddingMatrix:
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1)
    zero = norms < 1e-12
    n_zero = int(zero.sum())
    if n_zero:
        log.warning("replacing %d zero embedding(s) with the fixed unit vector", n_zero)
        raw[zero] = _unit_fallback(raw.shape[1])
        norms = np.linalg.norm(raw, axis=1)
    mat = EmbeddingMatrix(raw / norms[:, None], zero_replaced=n_zero)
    mat.validate()
    return mat


def _hash_vector(text: str, dim: int, seed: int) -> np.ndarray:
    key = seed.to_bytes(8, "little", signed=True)
    vec = np.zeros(dim)
    norm = normalize(text)
    for n in (3, 4, 5):
        for i in range(len(norm) - n + 1):
            gram = norm[i : i + n]
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
            h = int.from_bytes(digest, "little")
            sign = 1.0 if h & 1 else -1.0
            vec[(h >> 1) % dim] += sign
    return vec


def _load_cache(path: str) -> dict[str, list[float]]:
    p = Path(path)
    if not p.exists():
        return {}
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def _write_cache(path: str, cache: dict[str, list[float]]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(cache, fh, sort_keys=True)


def _http_embed(texts: list[str], cfg: EmbeddingProviderConfig) -> list[list[float]]:
    import os

    import requests

    headers = {}
    api_key = os.environ.get("FEDMEM_EMBED_API_KEY", "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {"input": texts, "model": cfg.model or "default"}
    delay = 0.5
    last = None
    for attempt in range(1, cfg.max_attempts + 1):
        try:
            resp = requests.post(cfg.endpoint, json=payload, headers=headers,
                                 timeout=cfg.timeout)
            if resp.status_code >= 500:
                raise EmbeddingError(f"server error {resp.status_code}")
            resp.raise_for_status()
            data = resp.json()["data"]
            return [row["embedding"] for row in data]
        except Exception as exc:  # noqa: BLE001 - retried transport failures
            last = exc
            if attempt == cfg.max_attempts:
                break
            time.sleep(delay)
            delay *= 2
    raise EmbeddingError(f"embedding endpoint failed after {cfg.max_attempts} attempts: {last}")


def embed_batch(texts: list[str], provider: EmbeddingProviderConfig) -> EmbeddingMatrix:
    """One unit row per input text, order preserved."""
    if not texts:
        raise ValueError("embed_batch requires at least one text")
    if provider.kind == "hash":
        raw = np.stack([_hash_vector(t, provider.dim, provider.seed) for t in texts])
        return _finalize(raw)
    if provider.kind == "file":
        cache = _load_cache(provider.cache_path)
        rows = []
        for t in texts:
            key = content_hash(t)
            if key not in cache:
                raise EmbeddingError(f"embedding cache miss for content hash {key}")
            rows.append(cache[key])
        return _finalize(np.asarray(rows))
    # http with write-through cache
    cache = _load_cache(provider.cache_path) if provider.cache_path else {}
    missing = [t for t in texts if content_hash(t) not in cache]
    if missing:
        fetched = _http_embed(missing, provider)
        if len(fetched) != len(missing):
            raise EmbeddingError("embedding endpoint returned wrong row count")
        with _cache_lock:
            for t, vec in zip(missing, fetched):
                cache[content_hash(t)] = list(map(float, vec))
            if provider.cache_path:
                _write_cache(provider.cache_path, cache)
    return _finalize(np.asarray([cache[content_hash(t)] for t in texts]))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of unit vectors, clamped against rounding."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.clip(np.dot(u, v), -1.0, 1.0))
