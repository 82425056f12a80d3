"""Vector primitives, distance functions, and embedding providers.

All three metrics are converted to "smaller is better" at this boundary so the
priority queues in the traversal code never need per-metric logic:

* ``l2``      -> squared Euclidean distance (no square root; only orderings
  matter downstream and the squared form keeps oracles exact).
* ``ip``      -> negated inner product.
* ``cosine``  -> negated cosine similarity.

The synthetic provider replaces a real text encoder with a fully pinned
deterministic function (see :func:`synthetic_embed`), which makes every
fixture in the test suite reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ProtocolError, ProviderError

METRICS = ("l2", "ip", "cosine")

_U53 = float(2**53)


@dataclass(frozen=True)
class EmbeddingRequest:
    """One unit of work for a provider: a node id plus its raw payload."""

    item_id: int
    content: bytes


@dataclass(frozen=True)
class ProviderConfig:
    """Embedding provider configuration persisted alongside the index.

    kind is "synthetic" (pinned hash-based generator, default for tests) or
    "external" (line-delimited JSON protocol over a socket, see
    :class:`ExternalProvider`). ``seed`` only applies to the synthetic kind,
    ``endpoint`` only to the external kind.
    """

    kind: str = "synthetic"
    dim: int = 32
    seed: int = 0
    endpoint: str = ""
    max_batch: int = 64
    timeout_s: float = 10.0
    retries: int = 2

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "external"):
            raise InvalidArgumentError(f"unknown provider kind: {self.kind!r}")
        if self.dim < 2:
            raise InvalidArgumentError("provider dim must be >= 2")
        if self.max_batch < 1:
            raise InvalidArgumentError("max_batch must be >= 1")


def provider_hash(config: ProviderConfig) -> str:
    """Stable digest of the fields that determine embedding values.

    Transport knobs (endpoint, timeout, retries, max_batch) are excluded:
    the same model served from a different address must hash identically,
    and the endpoint may be overridden by environment variables.
    """
    if config.kind == "synthetic":
        key = f"synthetic:{config.dim}:{config.seed}"
    else:
        key = f"external:{config.dim}"
    return hashlib.blake2b(key.encode(), digest_size=8).hexdigest()


def as_matrix(rows, dim: int | None = None) -> np.ndarray:
    """Validate and convert a vector batch to a float32 (n, dim) array."""
    arr = np.asarray(rows, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if dim is not None and arr.shape[1] != dim:
        raise InvalidArgumentError(f"expected dim {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("vector contains NaN or Inf")
    return arr


def distance(a, b, metric: str = "cosine") -> float:
    """Distance between two vectors; smaller is always better.

    l2 returns the squared Euclidean distance; ip and cosine return the
    negated similarity. Summation order is fixed so distance(a, b) is
    bitwise equal to distance(b, a) for l2 and cosine.
    """
    av = np.asarray(a, dtype=np.float32)
    bv = np.asarray(b, dtype=np.float32)
    if av.shape != bv.shape or av.ndim != 1:
        raise InvalidArgumentError(
            f"dimension mismatch: {av.shape} vs {bv.shape}"
        )
    if metric == "l2":
        d = av - bv
        return float(np.dot(d, d))
    if metric == "ip":
        return float(-np.dot(av, bv))
    if metric == "cosine":
        denom = float(np.sqrt(np.dot(av, av))) * float(np.sqrt(np.dot(bv, bv)))
        if denom == 0.0:
            raise InvalidArgumentError("cosine distance undefined for zero vector")
        return float(-np.dot(av, bv) / np.float32(denom))
    raise InvalidArgumentError(f"unknown metric: {metric!r}")


def distance_many(rows: np.ndarray, q: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Distances from each row to q, vectorized; same convention as distance().

    Uses einsum so the accumulation order is fixed (deterministic across runs
    and thread counts).
    """
    if rows.shape[1] != q.shape[0]:
        raise InvalidArgumentError(
            f"dimension mismatch: {rows.shape[1]} vs {q.shape[0]}"
        )
    if metric == "l2":
        d = rows - q
        return np.einsum("ij,ij->i", d, d)
    if metric == "ip":
        return -np.einsum("ij,j->i", rows, q)
    if metric == "cosine":
        dots = np.einsum("ij,j->i", rows, q)
        row_norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
        qn = np.float32(np.sqrt(np.dot(q, q)))
        return -(dots / (row_norms * qn))
    raise InvalidArgumentError(f"unknown metric: {metric!r}")


# --- Synthetic embedding generator -----------------------------------------
#
# The generator is pinned so fixtures reproduce across platforms:
#   1. blocks[i] = blake2b(content, digest_size=64, key=seed_le8, salt=i_le8)
#   2. the concatenated digest bytes are read as little-endian uint64 words;
#      each word w maps to a uniform u = ((w >> 11) + 1) * 2^-53 in (0, 1]
#   3. consecutive uniform pairs feed the Box-Muller transform to produce
#      standard normals; the first `dim` normals are kept
#   4. the vector is normalized to unit L2 norm in float64, then cast to
#      float32
# blake2b output is bit-exact everywhere; the float pipeline uses IEEE-754
# double arithmetic (log/cos/sin may differ by ULPs on exotic libms, which is
# irrelevant within one platform and far below any fixture tolerance).


def _hash_words(content: bytes, seed: int, n_words: int) -> np.ndarray:
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    blocks = []
    for i in range((n_words * 8 + 63) // 64):
        h = hashlib.blake2b(content, digest_size=64, key=key, salt=struct.pack("<Q", i))
        blocks.append(h.digest())
    raw = b"".join(blocks)[: n_words * 8]
    return np.frombuffer(raw, dtype="<u8")


def synthetic_embed(content: bytes, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm embedding of a byte payload.

    Pure function of (content, dim, seed): calling twice yields bitwise-equal
    vectors. Requires dim >= 2.
    """
    if dim < 2:
        raise InvalidArgumentError("synthetic_embed requires dim >= 2")
    if isinstance(content, str):
        content = content.encode("utf-8")
    n_pairs = (dim + 1) // 2
    words = _hash_words(content, seed, 2 * n_pairs)
    u = ((words >> np.uint64(11)).astype(np.float64) + 1.0) / _U53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    normals = np.empty(2 * n_pairs, dtype=np.float64)
    normals[0::2] = r * np.cos(theta)
    normals[1::2] = r * np.sin(theta)
    vec = normals[:dim]
    vec = vec / np.sqrt(np.dot(vec, vec))
    return vec.astype(np.float32)


# --- Providers --------------------------------------------------------------


class SyntheticProvider:
    """Default provider: wraps synthetic_embed; pure and thread-safe."""

    def __init__(self, config: ProviderConfig) -> None:
        self.config = config

    def embed_batch(self, requests: list[EmbeddingRequest]) -> np.ndarray:
        if not requests:
            raise InvalidArgumentError("embed_batch requires a non-empty batch")
        if len(requests) > self.config.max_batch:
            raise InvalidArgumentError(
                f"batch of {len(requests)} exceeds max_batch {self.config.max_batch}"
            )
        out = np.empty((len(requests), self.config.dim), dtype=np.float32)
        for i, req in enumerate(requests):
            out[i] = synthetic_embed(req.content, self.config.dim, self.config.seed)
        return out


class ExternalProvider:
    """Client for the line-delimited embedding protocol.

    One request per line: ``{"ids": [...], "texts": [...]}``; the reply line is
    ``{"vectors": [[...], ...]}`` with exactly len(ids) rows of dim floats.
    Connects per batch over TCP ("host:port") or a unix socket ("unix:/path"),
    retrying up to config.retries times on transport failure.
    """

    def __init__(self, config: ProviderConfig) -> None:
        if not config.endpoint:
            raise InvalidArgumentError("external provider requires an endpoint")
        self.config = config

    def _connect(self) -> socket.socket:
        ep = self.config.endpoint
        if ep.startswith("unix:"):
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(self.config.timeout_s)
            sock.connect(ep[len("unix:"):])
        else:
            host, _, port = ep.rpartition(":")
            sock = socket.create_connection(
                (host, int(port)), timeout=self.config.timeout_s
            )
        return sock

    def _round_trip(self, payload: bytes) -> bytes:
        sock = self._connect()
        try:
            sock.sendall(payload)
            chunks = []
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                chunks.append(data)
                if data.endswith(b"\n"):
                    break
            return b"".join(chunks)
        finally:
            sock.close()

    def embed_batch(self, requests: list[EmbeddingRequest]) -> np.ndarray:
        if not requests:
            raise InvalidArgumentError("embed_batch requires a non-empty batch")
        if len(requests) > self.config.max_batch:
            raise InvalidArgumentError(
                f"batch of {len(requests)} exceeds max_batch {self.config.max_batch}"
            )
        line = json.dumps(
            {
                "ids": [r.item_id for r in requests],
                "texts": [r.content.decode("utf-8", errors="replace") for r in requests],
            }
        ).encode() + b"\n"
        last_err: Exception | None = None
        for attempt in range(self.config.retries + 1):
            try:
                reply = self._round_trip(line)
                break
            except OSError as exc:
                last_err = exc
        else:
            raise ProviderError(
                f"provider unreachable at {self.config.endpoint}: {last_err}",
                retries=self.config.retries + 1,
            )
        try:
            parsed = json.loads(reply)
            vectors = parsed["vectors"]
        except (ValueError, KeyError) as exc:
            raise ProtocolError(f"malformed provider reply: {exc}") from exc
        if len(vectors) != len(requests):
            raise ProtocolError(
                f"provider returned {len(vectors)} rows for {len(requests)} requests"
            )
        arr = np.asarray(vectors, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != self.config.dim:
            raise ProtocolError(
                f"provider returned dim {arr.shape[-1] if arr.ndim == 2 else '?'},"
                f" expected {self.config.dim}"
            )
        return arr


def make_provider(config: ProviderConfig):
    if config.kind == "synthetic":
        return SyntheticProvider(config)
    return ExternalProvider(config)


def embed_batch(requests: list[EmbeddingRequest], provider) -> np.ndarray:
    """Single provider call; the batch must fit the provider's max_batch."""
    return provider.embed_batch(list(requests))


def embed_all(requests: list[EmbeddingRequest], provider) -> np.ndarray:
    """Embed an arbitrary number of requests, splitting at max_batch.

    Splitting never changes values: embed_all(xs + ys) equals
    embed_all(xs) stacked with embed_all(ys) elementwise.
    """
    if not requests:
        raise InvalidArgumentError("embed_all requires a non-empty sequence")
    max_batch = provider.config.max_batch
    parts = [
        provider.embed_batch(requests[i : i + max_batch])
        for i in range(0, len(requests), max_batch)
    ]
    return parts[0] if len(parts) == 1 else np.vstack(parts)


@dataclass
class ResidentCounter:
    """Tracks how many exact embeddings are simultaneously held in memory.

    A first-class instrument, not an estimate: build pipelines call add()
    when a batch of exact vectors materializes and remove() when it is
    discarded, so the storage-discipline claims are directly testable.
    """

    current: int = 0
    peak: int = 0

    def add(self, count: int) -> None:
        self.current += count
        if self.current > self.peak:
            self.peak = self.current

    def remove(self, count: int) -> None:
        self.current -= count
