"""Sentence embeddings: provider interface, average pooling, binary cache.

Layer 0 is the static input-embedding lookup; layer 1 is the output of the
first transformer block (the first contextualized layer, the default used
for routing). A provider owns tokenization; this module never tokenizes.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .errors import FormatError, TransportError, ValidationError

DEFAULT_LAYER = 1

CACHE_MAGIC = b"EIAR"
CACHE_VERSION = 1


@dataclass(frozen=True)
class TokenEmbeddingSequence:
    """Per-token vectors for one text at one layer."""

    vectors: np.ndarray  # shape (token_count, dim)
    layer: int

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"expected a non-empty (tokens, dim) array, got shape {v.shape}")
        if self.layer < 0:
            raise ValidationError("layer must be >= 0")
        object.__setattr__(self, "vectors", v)

    @property
    def token_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class SentenceEmbedding:
    """A pooled fixed-dimension vector tagged with its source layer."""

    values: np.ndarray
    layer: int
    query_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ValidationError(f"embedding must be 1-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Anything that can produce per-token embeddings at a chosen layer.

    Must be deterministic for a fixed (text, layer, include_bos) and safe
    for concurrent calls.
    """

    dim: int
    max_layer: int

    def embed(self, text: str, layer: int, include_bos: bool = False) -> TokenEmbeddingSequence:
        ...


def average_pool(seq: TokenEmbeddingSequence, query_id: str = "") -> SentenceEmbedding:
    """Arithmetic mean over the token axis; layer is propagated unchanged.

    Each column is sorted before summation so the reduction order, and
    therefore the result, is bitwise invariant to token permutation.
    """
    mean = np.sort(seq.vectors, axis=0).mean(axis=0)
    return SentenceEmbedding(values=mean, layer=seq.layer, query_id=query_id)


def sentence_embedding(
    question: str,
    provider: EmbeddingProvider,
    layer: int = DEFAULT_LAYER,
    include_bos: bool = False,
    query_id: str = "",
) -> SentenceEmbedding:
    """Tokenize + embed at `layer` via the provider, then average-pool."""
    if not (0 <= layer <= provider.max_layer):
        raise ValidationError(
            f"layer {layer} out of range [0, {provider.max_layer}] for provider"
        )
    seq = provider.embed(question, layer, include_bos=include_bos)
    return average_pool(seq, query_id=query_id)


class StubEmbeddingProvider:
    """Deterministic text-to-pseudorandom-vector provider for tests/benchmarks.

    Each whitespace token of the text maps to a seeded pseudorandom vector.
    Optional signal coordinates are added on top: a per-text offset of
    +/-`signal_scale` in designated coordinate blocks, applied only at
    layers >= `signal_min_layer`. That lets a benchmark inject a linearly
    recoverable label into contextualized layers while leaving layer 0
    uninformative.
    """

    def __init__(
        self,
        dim: int = 32,
        max_layer: int = 4,
        seed: int = 0,
        noise_scale: float = 1.0,
        signal_scale: float = 0.0,
        signals: Optional[dict[str, Sequence[float]]] = None,
        signal_coords: Optional[Sequence[Sequence[int]]] = None,
        signal_min_layer: int = 1,
    ):
        self.dim = dim
        self.max_layer = max_layer
        self.seed = seed
        self.noise_scale = noise_scale
        self.signal_scale = signal_scale
        # signals maps text -> per-block signs (e.g. (+1, -1)); block i is
        # added at the coordinates listed in signal_coords[i].
        self.signals = dict(signals or {})
        self.signal_coords = [list(c) for c in (signal_coords or [])]
        self.signal_min_layer = signal_min_layer

    def _token_vector(self, token: str, position: int, layer: int) -> np.ndarray:
        key = f"{self.seed}|{layer}|{position}|{token}".encode("utf-8")
        digest = hashlib.sha256(key).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim) * self.noise_scale

    def embed(self, text: str, layer: int, include_bos: bool = False) -> TokenEmbeddingSequence:
        if not (0 <= layer <= self.max_layer):
            raise ValidationError(f"layer {layer} out of range [0, {self.max_layer}]")
        tokens = text.split() or [""]
        vectors = [self._token_vector(tok, i, layer) for i, tok in enumerate(tokens)]
        if include_bos:
            vectors.insert(0, self._token_vector("<bos>", -1, layer))
        mat = np.stack(vectors)
        if layer >= self.signal_min_layer and text in self.signals:
            signs = self.signals[text]
            for block, sign in zip(self.signal_coords, signs):
                mat[:, block] += sign * self.signal_scale
        return TokenEmbeddingSequence(vectors=mat, layer=layer)


class HttpEmbeddingProvider:
    """Provider backed by a `POST /embed` endpoint.

    Wire format: request {"text": str, "layer": int, "include_bos": bool},
    response {"dim": int, "layer": int, "vectors": [[number, ...], ...]}.
    """

    def __init__(
        self,
        base_url: str,
        dim: int,
        max_layer: int,
        timeout: float = 30.0,
        retries: int = 2,
        max_concurrency: int = 8,
        client: Optional[httpx.Client] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.dim = dim
        self.max_layer = max_layer
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)
        self._semaphore = threading.Semaphore(max_concurrency)

    def embed(self, text: str, layer: int, include_bos: bool = False) -> TokenEmbeddingSequence:
        if not (0 <= layer <= self.max_layer):
            raise ValidationError(f"layer {layer} out of range [0, {self.max_layer}]")
        payload = {"text": text, "layer": layer, "include_bos": include_bos}
        last_exc = None
        for attempt in range(1, self.retries + 2):
            try:
                with self._semaphore:
                    resp = self._client.post(self.base_url + "/embed", json=payload)
                resp.raise_for_status()
                body = resp.json()
                return TokenEmbeddingSequence(
                    vectors=np.asarray(body["vectors"], dtype=np.float32),
                    layer=int(body["layer"]),
                )
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_exc = exc
        raise TransportError(f"embed call failed: {last_exc}", attempts=self.retries + 1)


class CacheEmbeddingProvider:
    """Provider that serves pooled embeddings from a binary cache file.

    Serves already-pooled vectors keyed by the text given at embed time,
    so each `embed` returns a single-token sequence whose pooled value is
    the cached embedding.
    """

    def __init__(self, path, key_by: str = "query_id"):
        embeddings = read_embedding_cache(path)
        if not embeddings:
            raise ValidationError(f"embedding cache {path} is empty")
        self._table = {e.query_id: e for e in embeddings}
        self.dim = embeddings[0].dim
        self.layer = embeddings[0].layer
        self.max_layer = self.layer

    def embed(self, text: str, layer: int, include_bos: bool = False) -> TokenEmbeddingSequence:
        try:
            emb = self._table[text]
        except KeyError:
            raise ValidationError(f"no cached embedding under key {text!r}") from None
        if layer != emb.layer:
            raise ValidationError(f"cache holds layer {emb.layer}, requested {layer}")
        return TokenEmbeddingSequence(vectors=emb.values[None, :], layer=emb.layer)

    def lookup(self, query_id: str) -> SentenceEmbedding:
        try:
            return self._table[query_id]
        except KeyError:
            raise ValidationError(f"no cached embedding for id {query_id!r}") from None


def write_embedding_cache(embeddings: Sequence[SentenceEmbedding], path) -> None:
    """Write embeddings to the binary cache format (little-endian).

    Layout: magic `EIAR`, u32 version=1, u32 dim, u32 layer, u64 count,
    then per record: u32 id_length, id bytes (UTF-8), dim float32 values.
    All embeddings must share dim and layer.
    """
    if embeddings:
        dim = embeddings[0].dim
        layer = embeddings[0].layer
        for e in embeddings:
            if e.dim != dim or e.layer != layer:
                raise ValidationError("all cached embeddings must share dim and layer")
    else:
        dim, layer = 0, 0
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIIQ", CACHE_VERSION, dim, layer, len(embeddings)))
        for e in embeddings:
            id_bytes = e.query_id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(np.asarray(e.values, dtype="<f4").tobytes())


def read_embedding_cache(path) -> list[SentenceEmbedding]:
    """Read back a cache written by write_embedding_cache (bit-exact values)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CACHE_MAGIC!r}")
    try:
        version, dim, layer, count = struct.unpack_from("<IIIQ", data, 4)
    except struct.error as exc:
        raise FormatError("truncated header") from exc
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    offset = 4 + struct.calcsize("<IIIQ")
    out = []
    for _ in range(count):
        try:
            (id_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            query_id = data[offset : offset + id_len].decode("utf-8")
            offset += id_len
            raw = data[offset : offset + 4 * dim]
            if len(raw) != 4 * dim or id_len != len(query_id.encode("utf-8")):
                raise FormatError("truncated record")
            offset += 4 * dim
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt cache record: {exc}") from exc
        values = np.frombuffer(raw, dtype="<f4").copy()
        out.append(SentenceEmbedding(values=values, layer=layer, query_id=query_id))
    return out
