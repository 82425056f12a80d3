"""Product quantization: codebook training, encoding, and ADC lookup tables.

Straight PQ with 256 centroids per subspace (1 byte per code), used purely as
a cheap filtering signal ahead of exact recomputation. No OPQ rotation, no
IVF-PQ hybrids, no sub-byte codes.

The default subspace count targets roughly 100x compression of FP32 input:
m = round(dim / 25.6), so a dim-768 vector's 3072 bytes shrink to 30 bytes.
When dim is not divisible by the subspace count, vectors are zero-padded up
to the next multiple; the padded width is recorded in the file header.

Distances are asymmetric (exact query subvector vs. database centroid), the
strictly more accurate of the two classic forms. Under ip/cosine the table
holds negated partial dot products; cosine additionally normalizes the query
and assumes unit-norm data vectors (true for every provider in this package).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .cluster import kmeans
from .errors import BuildError, FormatError, InvalidArgumentError
from .vectors import METRICS

CENTROIDS_PER_SUBSPACE = 256

_MAGIC = b"LPQ1"
_HEADER = struct.Struct("<4sHIIHBxQ")  # magic, version, dim, padded, m, metric, n


def default_m_pq(dim: int) -> int:
    """Default subspace count: max(1, round(dim / 25.6))."""
    return max(1, int(round(dim / 25.6)))


@dataclass
class PQModel:
    dim: int
    padded_dim: int
    m_pq: int
    metric: str
    codebooks: np.ndarray  # (m_pq, 256, padded_dim // m_pq) float32

    @property
    def sub_dim(self) -> int:
        return self.padded_dim // self.m_pq

    def pad(self, x: np.ndarray) -> np.ndarray:
        if self.padded_dim == self.dim:
            return x
        padded = np.zeros((x.shape[0], self.padded_dim), dtype=np.float32)
        padded[:, : self.dim] = x
        return padded


@dataclass
class PQCodes:
    """Per-node codes; row i is the code of node i."""

    codes: np.ndarray  # (n, m_pq) uint8

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def m_pq(self) -> int:
        return self.codes.shape[1]

    def nbytes(self) -> int:
        return self.n * self.m_pq


def pq_train(sample: np.ndarray, m_pq: int, iters: int = 10, seed: int = 0,
             metric: str = "cosine") -> PQModel:
    """Train one 256-centroid codebook per subspace on the given sample.

    Deterministic given (sample order, seed): per-subspace k-means runs for a
    fixed number of iterations from a pinned k-means++ initialization.
    """
    sample = np.ascontiguousarray(sample, dtype=np.float32)
    n, dim = sample.shape
    if n < CENTROIDS_PER_SUBSPACE:
        raise BuildError(
            f"PQ training needs >= {CENTROIDS_PER_SUBSPACE} sample vectors, got {n};"
            " provide more data or reduce m_pq"
        )
    if m_pq < 1:
        raise InvalidArgumentError("m_pq must be >= 1")
    if metric not in METRICS:
        raise InvalidArgumentError(f"unknown metric: {metric!r}")
    padded_dim = dim if dim % m_pq == 0 else dim + (m_pq - dim % m_pq)
    model = PQModel(
        dim=dim,
        padded_dim=padded_dim,
        m_pq=m_pq,
        metric=metric,
        codebooks=np.empty((m_pq, CENTROIDS_PER_SUBSPACE, padded_dim // m_pq),
                           dtype=np.float32),
    )
    x = model.pad(sample)
    sub = model.sub_dim
    for s in range(m_pq):
        block = x[:, s * sub : (s + 1) * sub]
        model.codebooks[s] = kmeans(block, CENTROIDS_PER_SUBSPACE, iters, seed + s)
    return model


def pq_encode(model: PQModel, x: np.ndarray) -> np.ndarray:
    """Encode vectors to (n, m_pq) uint8 codes; nearest centroid per subspace.

    Ties break to the lowest centroid index (argmin semantics).
    """
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[1] != model.dim:
        raise InvalidArgumentError(f"expected dim {model.dim}, got {x.shape[1]}")
    x = model.pad(x)
    sub = model.sub_dim
    codes = np.empty((x.shape[0], model.m_pq), dtype=np.uint8)
    for s in range(model.m_pq):
        block = x[:, s * sub : (s + 1) * sub]
        cb = model.codebooks[s]
        d = (
            np.einsum("ij,ij->i", cb, cb)[None, :]
            - 2.0 * (block @ cb.T)
        )
        codes[:, s] = np.argmin(d, axis=1).astype(np.uint8)
    return codes[0] if single else codes


def pq_decode(model: PQModel, codes: np.ndarray) -> np.ndarray:
    """Reconstruct float32 vectors (original dim, padding stripped)."""
    codes = np.asarray(codes, dtype=np.uint8)
    single = codes.ndim == 1
    if single:
        codes = codes.reshape(1, -1)
    out = np.empty((codes.shape[0], model.padded_dim), dtype=np.float32)
    sub = model.sub_dim
    for s in range(model.m_pq):
        out[:, s * sub : (s + 1) * sub] = model.codebooks[s][codes[:, s]]
    out = out[:, : model.dim]
    return out[0] if single else out


def adc_build(model: PQModel, q: np.ndarray) -> np.ndarray:
    """Per-query lookup table of partial distances, shape (m_pq, 256).

    approx_distance(q, code) == sum over subspaces of table[s][code[s]],
    matching the smaller-is-better convention of the exact metrics.
    """
    q = np.asarray(q, dtype=np.float32)
    if q.shape[0] != model.dim:
        raise InvalidArgumentError(f"expected dim {model.dim}, got {q.shape[0]}")
    if model.metric == "cosine":
        norm = float(np.sqrt(np.dot(q, q)))
        if norm == 0.0:
            raise InvalidArgumentError("cosine ADC undefined for zero query")
        q = q / np.float32(norm)
    qp = model.pad(q.reshape(1, -1))[0]
    sub = model.sub_dim
    table = np.empty((model.m_pq, CENTROIDS_PER_SUBSPACE), dtype=np.float32)
    for s in range(model.m_pq):
        qs = qp[s * sub : (s + 1) * sub]
        cb = model.codebooks[s]
        if model.metric == "l2":
            d = cb - qs
            table[s] = np.einsum("ij,ij->i", d, d)
        else:
            table[s] = -np.einsum("ij,j->i", cb, qs)
    return table


def approx_distance(table: np.ndarray, code: np.ndarray) -> float:
    """O(m_pq) table-lookup distance for one code."""
    return float(table[np.arange(table.shape[0]), code].sum(dtype=np.float64))


def approx_distance_many(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Table-lookup distances for a batch of codes, shape (n,)."""
    rows = np.arange(table.shape[0])
    return table[rows[None, :], codes].sum(axis=1, dtype=np.float64).astype(np.float32)


# --- Persistence ------------------------------------------------------------

_METRIC_TAGS = {name: i for i, name in enumerate(METRICS)}
_TAG_METRICS = {i: name for name, i in _METRIC_TAGS.items()}


def pq_header_bytes(model: PQModel) -> int:
    """Size of everything before the raw code bytes in pq.bin."""
    return _HEADER.size + model.codebooks.nbytes


def save_pq(model: PQModel, codes: PQCodes, path) -> None:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(_MAGIC, 1, model.dim, model.padded_dim, model.m_pq,
                           _METRIC_TAGS[model.metric], codes.n))
    buf.write(np.ascontiguousarray(model.codebooks, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(codes.codes, dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_pq(path) -> tuple[PQModel, PQCodes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("pq.header", "file truncated before header")
    magic, version, dim, padded_dim, m_pq, metric_tag, n = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError("pq.magic", f"bad magic {magic!r}")
    if version != 1:
        raise FormatError("pq.version", f"unsupported version {version}")
    if metric_tag not in _TAG_METRICS:
        raise FormatError("pq.metric", f"unknown metric tag {metric_tag}")
    if m_pq < 1 or padded_dim % m_pq != 0:
        raise FormatError("pq.header", f"invalid geometry dim={dim} m={m_pq}")
    cb_bytes = m_pq * CENTROIDS_PER_SUBSPACE * (padded_dim // m_pq) * 4
    offset = _HEADER.size
    if len(data) < offset + cb_bytes:
        raise FormatError("pq.codebooks", "file truncated inside codebooks")
    codebooks = np.frombuffer(
        data, dtype="<f4", count=cb_bytes // 4, offset=offset
    ).reshape(m_pq, CENTROIDS_PER_SUBSPACE, padded_dim // m_pq).copy()
    if not np.all(np.isfinite(codebooks)):
        raise FormatError("pq.codebooks", "non-finite centroid entries")
    offset += cb_bytes
    if len(data) != offset + n * m_pq:
        raise FormatError(
            "pq.codes", f"expected {n * m_pq} code bytes, found {len(data) - offset}"
        )
    codes = np.frombuffer(data, dtype=np.uint8, count=n * m_pq, offset=offset)
    model = PQModel(dim=dim, padded_dim=padded_dim, m_pq=m_pq,
                    metric=_TAG_METRICS[metric_tag], codebooks=codebooks)
    return model, PQCodes(codes=codes.reshape(n, m_pq).copy())
