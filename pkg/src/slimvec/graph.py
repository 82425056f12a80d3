"""The compact persisted graph: per-level CSR adjacency, delete flags, stats.

Node ids are dense 0..n-1 in insertion order; item-store row i is node i, so
the hot path needs no id-mapping table. The base layer (level 0) is the only
pruned layer; upper layers are tiny navigation layers stored in the same CSR
format, one block per level. Neighbor ids are fixed u32 (no delta/varint
compression) to keep the byte accounting exact: metadata bytes are simply
4 * (total stored neighbor entries).

Soft deletion keeps adjacency untouched: the delete bitset lives in its own
file so flag flips never rewrite the graph. Deleted nodes stay traversable;
result filtering happens at query end.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgumentError

_MAGIC = b"LGR1"
_HEADER = struct.Struct("<4sHQHHQ")  # magic, version, n, M, level_count, entry
_DEL_MAGIC = b"LDL1"


@dataclass
class PrunedGraph:
    """Frozen CSR graph; immutable and safe for unlimited concurrent readers."""

    n: int
    max_degree: int
    entry_point: int
    levels: np.ndarray                 # (n,) uint16, hierarchy layer per node
    level_offsets: list[np.ndarray]    # per level: (n+1,) uint64
    level_neighbors: list[np.ndarray]  # per level: flat uint32
    deleted: np.ndarray = field(default=None)  # (n,) bool

    def __post_init__(self) -> None:
        if self.deleted is None:
            self.deleted = np.zeros(self.n, dtype=bool)

    @property
    def level_count(self) -> int:
        return len(self.level_offsets)

    def neighbors(self, v: int, level: int = 0) -> np.ndarray:
        off = self.level_offsets[level]
        return self.level_neighbors[level][off[v] : off[v + 1]]

    def degree(self, v: int, level: int = 0) -> int:
        off = self.level_offsets[level]
        return int(off[v + 1] - off[v])

    def out_degrees(self, level: int = 0) -> np.ndarray:
        off = self.level_offsets[level]
        return np.diff(off).astype(np.int64)

    def mark_deleted(self, v: int) -> None:
        if not 0 <= v < self.n:
            raise InvalidArgumentError(f"node id {v} out of range [0, {self.n})")
        self.deleted[v] = True

    def is_deleted(self, v: int) -> bool:
        if not 0 <= v < self.n:
            raise InvalidArgumentError(f"node id {v} out of range [0, {self.n})")
        return bool(self.deleted[v])

    def deleted_fraction(self) -> float:
        return float(self.deleted.sum()) / self.n if self.n else 0.0


@dataclass
class GraphStats:
    avg_degree: float                      # base layer
    degree_histogram: dict[int, int]       # base layer out-degree -> count
    metadata_bytes: int                    # all levels, 4 bytes per neighbor id
    upper_level_bytes: int                 # the slice of metadata_bytes above level 0
    n_active: int


def degree_stats(g: PrunedGraph) -> GraphStats:
    """Exact degree histogram and byte accounting (4 bytes per stored id)."""
    degs = g.out_degrees(0)
    values, counts = np.unique(degs, return_counts=True)
    total_entries = sum(len(nb) for nb in g.level_neighbors)
    upper_entries = total_entries - len(g.level_neighbors[0])
    return GraphStats(
        avg_degree=float(degs.mean()) if g.n else 0.0,
        degree_histogram={int(v): int(c) for v, c in zip(values, counts)},
        metadata_bytes=total_entries * 4,
        upper_level_bytes=upper_entries * 4,
        n_active=int(g.n - g.deleted.sum()),
    )


def validate(g: PrunedGraph) -> None:
    """CSR well-formedness walker; raises FormatError on the first violation."""
    if g.levels.shape[0] != g.n:
        raise FormatError("graph.levels", f"levels length {g.levels.shape[0]} != n {g.n}")
    if g.n and not 0 <= g.entry_point < g.n:
        raise FormatError("graph.entry", f"entry point {g.entry_point} out of range")
    if g.n and int(g.levels[g.entry_point]) != int(g.levels.max()):
        raise FormatError("graph.entry", "entry point is not at the maximal level")
    for lvl, (off, nbrs) in enumerate(zip(g.level_offsets, g.level_neighbors)):
        if off.shape[0] != g.n + 1:
            raise FormatError(f"graph.level{lvl}.offsets", "offsets length != n + 1")
        if np.any(np.diff(off.astype(np.int64)) < 0):
            raise FormatError(f"graph.level{lvl}.offsets", "offsets not nondecreasing")
        if int(off[-1]) != nbrs.shape[0]:
            raise FormatError(
                f"graph.level{lvl}.offsets",
                f"offsets[n]={int(off[-1])} != neighbor count {nbrs.shape[0]}",
            )
        if nbrs.size and int(nbrs.max()) >= g.n:
            raise FormatError(f"graph.level{lvl}.neighbors", "neighbor id out of range")
        degs = np.diff(off.astype(np.int64))
        if np.any(degs > g.max_degree):
            raise FormatError(
                f"graph.level{lvl}.neighbors",
                f"degree {int(degs.max())} exceeds cap {g.max_degree}",
            )
        for v in range(g.n):
            row = nbrs[off[v] : off[v + 1]]
            if row.size == 0:
                continue
            if np.any(row == v):
                raise FormatError(f"graph.level{lvl}.neighbors", f"self-loop at {v}")
            if len(np.unique(row)) != row.size:
                raise FormatError(
                    f"graph.level{lvl}.neighbors", f"duplicate neighbor at {v}"
                )


def save_graph(g: PrunedGraph, path) -> None:
    """Serialize to the LGR1 format; load(save(g)) is bitwise-identical."""
    buf = io.BytesIO()
    buf.write(_HEADER.pack(_MAGIC, 1, g.n, g.max_degree, g.level_count, g.entry_point))
    buf.write(np.ascontiguousarray(g.levels, dtype="<u2").tobytes())
    for off, nbrs in zip(g.level_offsets, g.level_neighbors):
        buf.write(struct.pack("<Q", nbrs.shape[0]))
        buf.write(np.ascontiguousarray(off, dtype="<u8").tobytes())
        buf.write(np.ascontiguousarray(nbrs, dtype="<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_graph(path) -> PrunedGraph:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("graph.header", "file truncated before header")
    magic, version, n, max_degree, level_count, entry = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError("graph.magic", f"bad magic {magic!r}")
    if version != 1:
        raise FormatError("graph.version", f"unsupported version {version}")
    offset = _HEADER.size
    if len(data) < offset + 2 * n:
        raise FormatError("graph.levels", "file truncated inside level array")
    levels = np.frombuffer(data, dtype="<u2", count=n, offset=offset).copy()
    offset += 2 * n
    level_offsets: list[np.ndarray] = []
    level_neighbors: list[np.ndarray] = []
    for lvl in range(level_count):
        if len(data) < offset + 8:
            raise FormatError(f"graph.level{lvl}", "file truncated before block header")
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        need = 8 * (n + 1) + 4 * count
        if len(data) < offset + need:
            raise FormatError(f"graph.level{lvl}", "file truncated inside CSR block")
        off = np.frombuffer(data, dtype="<u8", count=n + 1, offset=offset).copy()
        offset += 8 * (n + 1)
        nbrs = np.frombuffer(data, dtype="<u4", count=count, offset=offset).copy()
        offset += 4 * count
        level_offsets.append(off)
        level_neighbors.append(nbrs)
    if offset != len(data):
        raise FormatError("graph.trailer", f"{len(data) - offset} unexpected trailing bytes")
    g = PrunedGraph(
        n=n,
        max_degree=max_degree,
        entry_point=entry,
        levels=levels,
        level_offsets=level_offsets,
        level_neighbors=level_neighbors,
    )
    validate(g)
    return g


def save_deleted(deleted: np.ndarray, path) -> None:
    packed = np.packbits(deleted.astype(np.uint8), bitorder="little")
    with open(path, "wb") as fh:
        fh.write(_DEL_MAGIC)
        fh.write(struct.pack("<Q", deleted.shape[0]))
        fh.write(packed.tobytes())


def load_deleted(path, n: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != _DEL_MAGIC:
        raise FormatError("deleted.header", "bad magic or truncated header")
    (count,) = struct.unpack_from("<Q", data, 4)
    if count != n:
        raise FormatError("deleted.header", f"bitset length {count} != n {n}")
    need = (n + 7) // 8
    if len(data) != 12 + need:
        raise FormatError("deleted.bits", "bitset payload has the wrong size")
    bits = np.frombuffer(data, dtype=np.uint8, offset=12)
    return np.unpackbits(bits, count=n, bitorder="little").astype(bool)


def graphs_equal(a: PrunedGraph, b: PrunedGraph) -> bool:
    """Bitwise equality over all structural fields (delete flags included)."""
    if (a.n, a.max_degree, a.entry_point, a.level_count) != (
        b.n, b.max_degree, b.entry_point, b.level_count
    ):
        return False
    if not np.array_equal(a.levels, b.levels) or not np.array_equal(a.deleted, b.deleted):
        return False
    for ao, bo in zip(a.level_offsets, b.level_offsets):
        if not np.array_equal(ao, bo):
            return False
    for an, bn in zip(a.level_neighbors, b.level_neighbors):
        if not np.array_equal(an, bn):
            return False
    return True
