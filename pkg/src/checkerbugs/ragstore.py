"""Dense-vector store over rendered code changes with cosine retrieval.

Vectors are L2-normalized at index time and stored as float32; retrieval
is an exhaustive scan computing float64 cosines so an independent pass
over the on-disk files reproduces the ranking exactly. Two embedding
providers are available: a remote embedding API client and a
deterministic feature-hashing provider for offline runs (token
unigrams/bigrams hashed into the configured number of buckets with
integer accumulation before normalization).
"""
from __future__ import annotations

import errno
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

__all__ = [
    "EmbeddedDocument",
    "HashingEmbeddingProvider",
    "RemoteEmbeddingProvider",
    "VectorStore",
    "embed_batch",
    "get_provider",
    "ProviderUnavailable",
    "StorageFull",
    "CorruptIndex",
    "EmptyStore",
    "DuplicateDocId",
    "DEFAULT_DIMENSION",
]

DEFAULT_DIMENSION = 384
DEFAULT_BATCH_SIZE = 50

_MANIFEST = "manifest.json"
_VECTORS = "vectors.f32"
_DOCS = "docs.jsonl"
_TOKEN_RE = re.compile(r"[a-z0-9_]+")


class ProviderUnavailable(RuntimeError):
    pass


class StorageFull(RuntimeError):
    pass


class CorruptIndex(RuntimeError):
    pass


class EmptyStore(RuntimeError):
    pass


class DuplicateDocId(ValueError):
    pass


@dataclass
class EmbeddedDocument:
    doc_id: str
    text: str
    vector: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)


class HashingEmbeddingProvider:
    """Deterministic offline embedder: token n-grams feature-hashed into
    fixed buckets, signed, integer-accumulated, then L2-normalized.

    Stable across runs and platforms: bucketing uses blake2b digests of
    the salted n-gram bytes, never Python's randomized hash().
    """

    name = "hashing"

    def __init__(self, dimension: int = DEFAULT_DIMENSION, salt: str = "checkerbugs-rag-v1"):
        self.dimension = dimension
        self._salt = salt
        self._bucket_cache: dict[str, tuple[int, int]] = {}

    def _bucket(self, gram: str) -> tuple[int, int]:
        cached = self._bucket_cache.get(gram)
        if cached is None:
            digest = hashlib.blake2b((self._salt + "\x00" + gram).encode("utf-8"), digest_size=8)
            value = int.from_bytes(digest.digest(), "little")
            cached = (value % self.dimension, 1 if value & (1 << 63) else -1)
            self._bucket_cache[gram] = cached
        return cached

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float32)
        for row, text in enumerate(texts):
            tokens = _TOKEN_RE.findall(text.lower())
            counts = np.zeros(self.dimension, dtype=np.int64)
            for gram in tokens:
                bucket, sign = self._bucket(gram)
                counts[bucket] += sign
            for a, b in zip(tokens, tokens[1:]):
                bucket, sign = self._bucket(a + " " + b)
                counts[bucket] += sign
            norm = np.sqrt(float(np.dot(counts, counts)))
            if norm > 0.0:
                out[row] = (counts / norm).astype(np.float32)
        return out


def _requests_transport(
    url: str, payload: dict, headers: dict, timeout: float
) -> tuple[int, dict]:
    try:
        response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise ProviderUnavailable(f"embedding request failed: {exc}") from exc
    body = response.json() if response.content else {}
    return response.status_code, body


class RemoteEmbeddingProvider:
    """Client for an embeddings HTTP endpoint (POST {base_url}/embeddings,
    bearer token from the configured env var)."""

    name = "remote"

    def __init__(
        self,
        base_url: str,
        model: str = "all-MiniLM-L6-v2",
        dimension: int = DEFAULT_DIMENSION,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 30.0,
        transport: Callable[[str, dict, dict, float], tuple[int, dict]] | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dimension = dimension
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._transport = transport or _requests_transport

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        headers = {}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        status, body = self._transport(
            f"{self.base_url}/embeddings",
            {"model": self.model, "input": list(texts)},
            headers,
            self.timeout,
        )
        if status == 429 or status >= 500:
            raise ProviderUnavailable(f"embedding endpoint returned {status}")
        if status != 200:
            raise RuntimeError(f"embedding endpoint returned {status}: {body}")
        rows = sorted(body.get("data", []), key=lambda item: item.get("index", 0))
        if len(rows) != len(texts):
            raise ProviderUnavailable(
                f"embedding endpoint returned {len(rows)} vectors for {len(texts)} inputs"
            )
        matrix = np.asarray([row["embedding"] for row in rows], dtype=np.float32)
        if matrix.shape != (len(texts), self.dimension):
            raise RuntimeError(f"unexpected embedding shape {matrix.shape}")
        return matrix


def embed_batch(
    provider,
    texts: Sequence[str],
    batch_size: int = DEFAULT_BATCH_SIZE,
    retries: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> np.ndarray:
    """Embed texts in provider calls of at most batch_size, order
    preserved. Transient provider failures are retried with exponential
    backoff and propagate once retries are exhausted."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    chunks: list[np.ndarray] = []
    for start in range(0, len(texts), batch_size):
        chunk = list(texts[start : start + batch_size])
        attempt = 0
        while True:
            try:
                vectors = provider.embed(chunk)
                break
            except ProviderUnavailable:
                attempt += 1
                if attempt > retries:
                    raise
                sleep(backoff * (2 ** (attempt - 1)))
        if len(vectors) != len(chunk):
            raise RuntimeError("provider returned wrong number of vectors")
        chunks.append(np.asarray(vectors, dtype=np.float32))
    if not chunks:
        return np.zeros((0, provider.dimension), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


@dataclass(frozen=True)
class _StoreState:
    """Immutable snapshot of the whole store; readers grab it once, the
    writer swaps in a fresh one, so retrievals never see a half-applied
    batch."""

    ids: tuple[str, ...]
    rows: dict[str, int]
    matrix: np.ndarray
    texts: dict[str, str]
    metadata: dict[str, dict]


def _empty_state(dimension: int) -> _StoreState:
    return _StoreState((), {}, np.zeros((0, dimension), dtype=np.float32), {}, {})


class VectorStore:
    """On-disk store: little-endian float32 vectors (row-major), a
    line-delimited doc file, and a manifest with dimension, provider name,
    and count. Re-indexing an existing doc_id replaces it.

    Concurrency: many readers, one writer; index() serializes writers and
    publishes a new immutable snapshot atomically.
    """

    def __init__(self, directory: str | Path, provider, dimension: int | None = None):
        self.directory = Path(directory)
        self.provider = provider
        self.dimension = dimension or provider.dimension
        self._state = _empty_state(self.dimension)
        self._write_lock = threading.Lock()

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, directory: str | Path, provider) -> "VectorStore":
        store = cls(directory, provider)
        store.directory.mkdir(parents=True, exist_ok=True)
        store._save(store._state)
        return store

    @classmethod
    def open(cls, directory: str | Path, provider=None) -> "VectorStore":
        directory = Path(directory)
        manifest_path = directory / _MANIFEST
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptIndex(f"cannot read manifest: {exc}") from exc
        for key in ("dimension", "provider", "count"):
            if key not in manifest:
                raise CorruptIndex(f"manifest missing {key!r}")
        dimension = int(manifest["dimension"])
        count = int(manifest["count"])
        if provider is None:
            provider = get_provider(manifest["provider"], dimension=dimension)
        store = cls(directory, provider, dimension=dimension)

        vec_path = directory / _VECTORS
        expected = count * dimension * 4
        try:
            raw = vec_path.read_bytes()
        except OSError as exc:
            raise CorruptIndex(f"cannot read vectors: {exc}") from exc
        if len(raw) != expected:
            raise CorruptIndex(
                f"vector file holds {len(raw)} bytes, manifest implies {expected}"
            )
        matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dimension).copy()

        ids: list[str] = []
        texts: dict[str, str] = {}
        metadata: dict[str, dict] = {}
        try:
            doc_lines = (directory / _DOCS).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise CorruptIndex(f"cannot read docs: {exc}") from exc
        for line in doc_lines:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptIndex(f"corrupt doc record: {exc}") from exc
            ids.append(record["doc_id"])
            texts[record["doc_id"]] = record.get("text", "")
            metadata[record["doc_id"]] = record.get("metadata", {})
        if len(ids) != count:
            raise CorruptIndex(f"doc file holds {len(ids)} records, manifest says {count}")

        store._state = _StoreState(
            ids=tuple(ids),
            rows={doc_id: row for row, doc_id in enumerate(ids)},
            matrix=matrix,
            texts=texts,
            metadata=metadata,
        )
        return store

    # -- persistence -------------------------------------------------------

    def _save(self, state: _StoreState) -> None:
        try:
            tmp_vectors = self.directory / (_VECTORS + ".tmp")
            tmp_vectors.write_bytes(state.matrix.astype("<f4").tobytes())
            os.replace(tmp_vectors, self.directory / _VECTORS)

            tmp_docs = self.directory / (_DOCS + ".tmp")
            with open(tmp_docs, "w", encoding="utf-8") as fh:
                for doc_id in state.ids:
                    fh.write(
                        json.dumps(
                            {
                                "doc_id": doc_id,
                                "text": state.texts[doc_id],
                                "metadata": state.metadata[doc_id],
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
            os.replace(tmp_docs, self.directory / _DOCS)

            manifest = {
                "dimension": self.dimension,
                "provider": self.provider.name,
                "count": len(state.ids),
                "schema": 1,
            }
            tmp_manifest = self.directory / (_MANIFEST + ".tmp")
            tmp_manifest.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
            os.replace(tmp_manifest, self.directory / _MANIFEST)
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise

    # -- operations --------------------------------------------------------

    @property
    def count(self) -> int:
        return len(self._state.ids)

    def get_text(self, doc_id: str) -> str:
        return self._state.texts[doc_id]

    def get_metadata(self, doc_id: str) -> dict:
        return self._state.metadata[doc_id]

    def index(self, docs: Sequence[EmbeddedDocument]) -> int:
        """Upsert documents (normalized vectors) and persist; returns the
        number of documents indexed by this call."""
        seen: set[str] = set()
        for doc in docs:
            if doc.doc_id in seen:
                raise DuplicateDocId(doc.doc_id)
            seen.add(doc.doc_id)
            vector = np.asarray(doc.vector, dtype=np.float64)
            if vector.shape != (self.dimension,):
                raise ValueError(
                    f"vector for {doc.doc_id!r} has shape {vector.shape}, "
                    f"expected ({self.dimension},)"
                )
            if not np.isfinite(vector).all():
                raise ValueError(f"vector for {doc.doc_id!r} contains NaN or Inf")

        with self._write_lock:
            state = self._state
            ids = list(state.ids)
            rows = dict(state.rows)
            texts = dict(state.texts)
            metadata = dict(state.metadata)
            matrix = state.matrix.copy()

            new_rows: list[np.ndarray] = []
            for doc in docs:
                vector = np.asarray(doc.vector, dtype=np.float64)
                norm = float(np.linalg.norm(vector))
                unit = (vector / norm).astype(np.float32) if norm > 0.0 else np.zeros(
                    self.dimension, dtype=np.float32
                )
                if doc.doc_id in rows:
                    matrix[rows[doc.doc_id]] = unit
                else:
                    rows[doc.doc_id] = len(ids)
                    ids.append(doc.doc_id)
                    new_rows.append(unit)
                texts[doc.doc_id] = doc.text
                metadata[doc.doc_id] = dict(doc.metadata)
            if new_rows:
                matrix = np.concatenate([matrix, np.vstack(new_rows)], axis=0)

            new_state = _StoreState(tuple(ids), rows, matrix, texts, metadata)
            self._save(new_state)
            self._state = new_state  # publish only after a durable write
        return len(docs)

    def retrieve(self, query_text: str, k: int) -> list[tuple[str, float]]:
        """Top-k by cosine similarity, scores descending, ties broken by
        doc_id ascending. Zero vectors are excluded from results.

        Scores are float64 cosines of the stored float32 vectors, each row
        re-normalized at query time, so an independent scan over the
        on-disk vectors reproduces the ranking bit for bit.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        state = self._state  # one consistent snapshot for the whole scan
        if not state.ids:
            raise EmptyStore(str(self.directory))
        query = np.asarray(self.provider.embed([query_text])[0], dtype=np.float64)
        norm = float(np.linalg.norm(query))
        if norm > 0.0:
            query = query / norm
        ranked = []
        for row, doc_id in enumerate(state.ids):
            vector = state.matrix[row].astype(np.float64)
            vector_norm = float(np.linalg.norm(vector))
            if vector_norm == 0.0:
                continue
            score = float(np.dot(vector / vector_norm, query))
            ranked.append((score, doc_id))
        ranked.sort(key=lambda pair: (-pair[0], pair[1]))
        return [(doc_id, score) for score, doc_id in ranked[:k]]


_PROVIDER_FACTORIES = {
    "hashing": lambda dimension, **cfg: HashingEmbeddingProvider(dimension=dimension),
    "remote": lambda dimension, **cfg: RemoteEmbeddingProvider(dimension=dimension, **cfg),
}


def get_provider(name: str, dimension: int = DEFAULT_DIMENSION, **cfg):
    try:
        factory = _PROVIDER_FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown embedding provider {name!r}") from None
    return factory(dimension, **cfg)
