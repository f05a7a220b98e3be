"""Text-to-vector backends and similarity scoring.

Two interchangeable backends produce fixed-dimension vectors: a remote
embedding service (wire format: POST ``{model, input}`` returning
``{data: [{embedding: [...]}]}``) and a deterministic offline
feature-hashing embedder used for tests and network-free runs.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import DimensionMismatch, ServiceUnavailable

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 1536
EMBED_API_KEY_VAR = "LTP_EMBED_API_KEY"

_TOKEN_RE = re.compile(r"[0-9a-z]+")


class EmbedBackend(Protocol):
    """string -> vector, deterministic per backend instance + model id."""

    dimension: int
    model: str

    def embed(self, text: str) -> np.ndarray: ...


def embed_text(backend: EmbedBackend, text: str) -> np.ndarray:
    """Embed ``text``, enforcing the dimension contract at the boundary."""
    vec = np.asarray(backend.embed(text), dtype=np.float64)
    if vec.shape != (backend.dimension,):
        raise DimensionMismatch(
            f"backend returned shape {vec.shape}, expected ({backend.dimension},)"
        )
    if not np.isfinite(vec).all():
        raise DimensionMismatch("backend returned non-finite entries")
    return vec


def embed_many(
    backend: EmbedBackend, texts: list[str], max_workers: int = 4
) -> list[np.ndarray]:
    """Embed texts with bounded parallelism, preserving input order."""
    if max_workers <= 1 or len(texts) <= 1:
        return [embed_text(backend, t) for t in texts]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda t: embed_text(backend, t), texts))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a,b)/(|a||b|); defined as 0.0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class HashingEmbedder:
    """Deterministic offline backend: signed feature-hashing bag of tokens.

    Text is lowercased and split into ASCII-alphanumeric runs; each token
    is hashed with 64-bit BLAKE2b, bucketed by ``hash % dimension`` with a
    sign taken from bit 63, and the accumulated vector is L2-normalized.
    The zero vector (e.g. for "") stays zero. Not a semantic model; it
    approximates lexical overlap reproducibly and needs no network.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.model = "feature-hash-blake2b64"

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            sign = -1.0 if (h >> 63) & 1 else 1.0
            vec[h % self.dimension] += sign
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec


def cache_key(model: str, text: str) -> str:
    """Content address for one (model, text) pair."""
    digest = hashlib.sha256()
    digest.update(model.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(text.encode("utf-8"))
    return digest.hexdigest()


def _write_atomic(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        os.write(fd, payload)
    finally:
        os.close(fd)
    os.replace(tmp, path)


class RemoteEmbedder:
    """Client for a hosted embedding service, with retry and a replay cache.

    Responses are cached as raw little-endian float32 vectors in files
    named by the SHA-256 of ``model || 0x00 || text``, so a run can be
    replayed offline once every input has been seen. Cache writes go
    through a temp file and an atomic rename.
    """

    def __init__(
        self,
        model: str,
        dimension: int = DEFAULT_DIMENSION,
        base_url: str = "https://api.openai.com/v1/embeddings",
        api_key: str | None = None,
        cache_dir: str | Path | None = None,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        timeout_s: float = 30.0,
    ):
        self.model = model
        self.dimension = dimension
        self.base_url = base_url
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_API_KEY_VAR)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s

    def _cache_path(self, text: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / cache_key(self.model, text)

    def _cache_load(self, text: str) -> np.ndarray | None:
        path = self._cache_path(text)
        if path is None or not path.exists():
            return None
        raw = path.read_bytes()
        if len(raw) != 4 * self.dimension:
            logger.warning("cache entry %s has wrong size; refetching", path.name)
            return None
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def _cache_store(self, text: str, vec: np.ndarray) -> None:
        path = self._cache_path(text)
        if path is None:
            return
        _write_atomic(path, vec.astype("<f4").tobytes())

    def _request(self, text: str) -> np.ndarray:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    self.base_url,
                    json={"model": self.model, "input": text},
                    headers=headers,
                    timeout=self.timeout_s,
                )
                resp.raise_for_status()
                payload = resp.json()
                return np.asarray(payload["data"][0]["embedding"], dtype=np.float64)
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                logger.warning("embedding request failed (try %d): %s", attempt + 1, exc)
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_s * (attempt + 1))
        raise ServiceUnavailable(
            f"embedding service unreachable after {self.max_retries} tries: {last_error}"
        )

    def embed(self, text: str) -> np.ndarray:
        cached = self._cache_load(text)
        if cached is not None:
            return cached
        vec = self._request(text)
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(
                f"service returned {vec.shape[0] if vec.ndim == 1 else vec.shape} "
                f"values, expected {self.dimension}"
            )
        self._cache_store(text, vec)
        # quantize to the cache precision so a later cache hit returns
        # bit-identical values
        return vec.astype("<f4").astype(np.float64)
