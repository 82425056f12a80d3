"""Online mutations: single adds in three cost variants, batched adds with
delayed insertion, and soft deletion.

Mutations never rewrite the frozen CSR in place. They operate on an
adjacency-list overlay shadowing the loaded graph; compact() refreezes the
overlay into a new CSR snapshot. A replayable append-only mutation log makes
acknowledged adds and deletes crash-safe between drain and compact.

The add variants differ only in bookkeeping, never in the resulting graph for
naive vs cached (memoization is pure):

* naive      - recomputes every embedding and pairwise distance from scratch;
* cached     - memoizes embeddings and pairwise distances within the add (and
               across adds when a drain shares its global cache);
* simplified - replaces relative-neighborhood checks with seeded random
               selection, eliminating pairwise distance work entirely.

Counters on each add record exact distance evaluations and embedding
computations; they are measurements, not estimates.
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .builder import assign_level, rng_shrink
from .errors import InvalidArgumentError
from .graph import PrunedGraph
from .pq import PQCodes, PQModel, pq_encode
from .vectors import EmbeddingRequest, distance, embed_all

ADD_VARIANTS = ("naive", "cached", "simplified")
DELETE_REBUILD_THRESHOLD = 0.05
_CACHE_ENTRY_BYTES = 20  # two u64 ids + one f32 value


class ListStore:
    """In-memory payload store for library use; mirrors the on-disk ItemStore."""

    def __init__(self, items: list[bytes] | None = None) -> None:
        self._items = list(items) if items else []

    @property
    def n(self) -> int:
        return len(self._items)

    def get(self, i: int) -> bytes:
        return self._items[i]

    def append(self, content: bytes) -> int:
        self._items.append(content)
        return len(self._items) - 1

    def truncate(self, n: int) -> None:
        del self._items[n:]


@dataclass
class AddCounters:
    distance_computations: int = 0
    embedding_computations: int = 0


@dataclass
class AddBuffer:
    """Pending items awaiting delayed insertion, plus the global distance cache.

    Buffered embedding bytes and cache bytes together must stay at or below
    byte_budget; crossing it clears the cache first and then drains.
    """

    byte_budget: int = 1 << 20
    pending: list[tuple[int, bytes, np.ndarray]] = field(default_factory=list)
    distance_cache: dict[tuple[int, int], float] = field(default_factory=dict)

    def embedding_bytes(self) -> int:
        return sum(vec.shape[0] * 4 for _, _, vec in self.pending)

    def cache_bytes(self) -> int:
        return len(self.distance_cache) * _CACHE_ENTRY_BYTES

    def total_bytes(self) -> int:
        return self.embedding_bytes() + self.cache_bytes()


class OverlayGraph:
    """Adjacency-list overlay over a frozen CSR graph (base may be None)."""

    def __init__(self, base: PrunedGraph | None) -> None:
        self.base = base
        self.n = base.n if base else 0
        self.max_degree = base.max_degree if base else 0
        self.entry_point = base.entry_point if base else -1
        self._levels: list[int] = list(base.levels.tolist()) if base else []
        self._level_count = base.level_count if base else 0
        self._deleted: list[bool] = list(base.deleted.tolist()) if base else []
        self.overrides: list[dict[int, list[int]]] = [
            {} for _ in range(self._level_count)
        ]

    @property
    def level_count(self) -> int:
        return self._level_count

    def node_level(self, v: int) -> int:
        return self._levels[v]

    def neighbors(self, v: int, level: int = 0) -> np.ndarray:
        if level < len(self.overrides):
            row = self.overrides[level].get(v)
            if row is not None:
                return np.asarray(row, dtype=np.uint32)
        if self.base is not None and v < self.base.n and level < self.base.level_count:
            return self.base.neighbors(v, level)
        return np.empty(0, dtype=np.uint32)

    def neighbor_list(self, v: int, level: int = 0) -> list[int]:
        if level < len(self.overrides):
            row = self.overrides[level].get(v)
            if row is not None:
                return list(row)
        if self.base is not None and v < self.base.n and level < self.base.level_count:
            return self.base.neighbors(v, level).tolist()
        return []

    def set_neighbors(self, v: int, level: int, row: list[int]) -> None:
        while len(self.overrides) <= level:
            self.overrides.append({})
            self._level_count += 1
        self.overrides[level][v] = row

    def append_node(self, level: int) -> int:
        v = self.n
        self.n += 1
        self._levels.append(level)
        self._deleted.append(False)
        for lvl in range(level + 1):
            self.set_neighbors(v, lvl, [])
        if self.entry_point < 0 or level > self._levels[self.entry_point]:
            self.entry_point = v
        return v

    def is_deleted(self, v: int) -> bool:
        return self._deleted[v]

    def mark_deleted(self, v: int) -> None:
        if not 0 <= v < self.n:
            raise InvalidArgumentError(f"node id {v} out of range [0, {self.n})")
        self._deleted[v] = True
        if self.base is not None and v < self.base.n:
            self.base.deleted[v] = True

    def deleted_fraction(self) -> float:
        return sum(self._deleted) / self.n if self.n else 0.0

    def freeze(self, max_degree: int) -> PrunedGraph:
        level_offsets: list[np.ndarray] = []
        level_neighbors: list[np.ndarray] = []
        for lvl in range(self._level_count):
            offsets = np.zeros(self.n + 1, dtype=np.uint64)
            rows: list[list[int]] = []
            total = 0
            for v in range(self.n):
                row = self.neighbor_list(v, lvl)
                if row:
                    rows.append(row)
                    total += len(row)
                offsets[v + 1] = total
            flat = (
                np.fromiter((w for r in rows for w in r), dtype=np.uint32, count=total)
                if total
                else np.empty(0, dtype=np.uint32)
            )
            level_offsets.append(offsets)
            level_neighbors.append(flat)
        return PrunedGraph(
            n=self.n,
            max_degree=max_degree,
            entry_point=self.entry_point,
            levels=np.asarray(self._levels, dtype=np.uint16),
            level_offsets=level_offsets,
            level_neighbors=level_neighbors,
            deleted=np.asarray(self._deleted, dtype=bool),
        )


class _AddFetcher:
    """Embedding access during one add; the variant decides the memo policy."""

    def __init__(self, provider, store, counters: AddCounters,
                 memoize: bool, memo: dict[int, np.ndarray] | None = None) -> None:
        self.provider = provider
        self.store = store
        self.counters = counters
        self.memo = (memo if memo is not None else {}) if memoize else None

    def get_many(self, ids: list[int]) -> list[np.ndarray]:
        if self.memo is None:
            vecs = embed_all(
                [EmbeddingRequest(i, self.store.get(i)) for i in ids], self.provider
            )
            self.counters.embedding_computations += len(ids)
            return [vecs[j] for j in range(len(ids))]
        missing = [i for i in ids if i not in self.memo]
        if missing:
            vecs = embed_all(
                [EmbeddingRequest(i, self.store.get(i)) for i in missing],
                self.provider,
            )
            self.counters.embedding_computations += len(missing)
            for j, i in enumerate(missing):
                self.memo[i] = vecs[j]
        return [self.memo[i] for i in ids]

    def get(self, i: int) -> np.ndarray:
        return self.get_many([i])[0]


def _add_rng(seed: int, label: str, node_id: int, extra: int = 0) -> np.random.Generator:
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(
        f"{label}:{node_id}:{extra}".encode(), digest_size=8, key=key
    ).digest()
    return np.random.Generator(np.random.PCG64(struct.unpack("<Q", digest)[0]))


class MutableIndex:
    """Single-writer mutation surface over a loaded index.

    Searches may run concurrently against the overlay plus a snapshot of the
    buffer; one mutation at a time is the caller's responsibility (the engine
    enforces it with the directory lock). Node ids stay dense: the payload
    store is the id authority and direct adds drain the buffer first.
    """

    def __init__(self, graph: PrunedGraph | None, pq_model: PQModel | None,
                 pq_codes: PQCodes | None, provider, store, *,
                 max_degree: int, ef_construction: int, seed: int,
                 metric: str = "cosine", buffer_budget: int = 1 << 20) -> None:
        self.overlay = OverlayGraph(graph)
        self.pq_model = pq_model
        self._code_rows: list[np.ndarray] = (
            [pq_codes.codes] if pq_codes is not None and pq_codes.n else []
        )
        self._codes_cache: np.ndarray | None = None
        self.provider = provider
        self.store = store
        self.max_degree = max_degree
        self.ef_construction = ef_construction
        self.seed = seed
        self.metric = metric
        self.buffer = AddBuffer(byte_budget=buffer_budget)
        self.rebuild_advisories: list[str] = []

    # -- code bookkeeping --

    @property
    def pq_codes(self) -> PQCodes | None:
        if self.pq_model is None:
            return None
        if self._codes_cache is None or self._codes_cache.shape[0] != self.overlay.n:
            self._codes_cache = (
                np.vstack(self._code_rows)
                if self._code_rows
                else np.empty((0, self.pq_model.m_pq), dtype=np.uint8)
            )
        return PQCodes(codes=self._codes_cache)

    def _append_code(self, vec: np.ndarray) -> None:
        if self.pq_model is not None:
            self._code_rows.append(pq_encode(self.pq_model, vec).reshape(1, -1))
            self._codes_cache = None

    # -- single add --

    def add_node(self, content: bytes, variant: str = "cached",
                 embedding: np.ndarray | None = None,
                 shared_embed_memo: dict[int, np.ndarray] | None = None,
                 global_cache: dict[tuple[int, int], float] | None = None,
                 reserved_id: int | None = None) -> tuple[int, AddCounters]:
        """Insert one item; returns (new node id, cost counters).

        The mutation is staged: a provider failure aborts with the index (and
        the payload store) unchanged. reserved_id is used when a buffered item
        already owns its id; fresh adds drain the buffer first so ids stay
        dense.
        """
        if variant not in ADD_VARIANTS:
            raise InvalidArgumentError(f"unknown add variant: {variant!r}")
        if reserved_id is None and self.buffer.pending:
            self.drain()
        counters = AddCounters()
        overlay = self.overlay
        if embedding is None:
            vec = embed_all([EmbeddingRequest(overlay.n, content)], self.provider)[0]
            counters.embedding_computations += 1
        else:
            vec = embedding
        if reserved_id is None:
            v = self.store.append(content)
        else:
            v = reserved_id
        if v != overlay.n:
            raise InvalidArgumentError(
                f"non-dense add: id {v} but graph holds {overlay.n} nodes"
            )
        level_v = assign_level(v, self.seed, max(2, self.max_degree))
        try:
            staged = self._plan_edges(v, level_v, vec, variant, counters,
                                      shared_embed_memo, global_cache)
        except Exception:
            if reserved_id is None:
                self.store.truncate(overlay.n)
            raise
        nid = overlay.append_node(level_v)
        for (lvl, node), row in staged.items():
            overlay.set_neighbors(node, lvl, row)
        self._append_code(vec)
        return nid, counters

    def _plan_edges(self, v: int, level_v: int, vec: np.ndarray, variant: str,
                    counters: AddCounters,
                    shared_embed_memo: dict[int, np.ndarray] | None,
                    global_cache: dict[tuple[int, int], float] | None
                    ) -> dict[tuple[int, int], list[int]]:
        overlay = self.overlay
        staged: dict[tuple[int, int], list[int]] = {}
        if overlay.n == 0 or overlay.entry_point < 0:
            return staged
        memoize = variant != "naive"
        fetcher = _AddFetcher(self.provider, self.store, counters,
                              memoize, shared_embed_memo if memoize else None)
        if fetcher.memo is not None:
            fetcher.memo[v] = vec
        pair_cache = (
            (global_cache if global_cache is not None else {}) if memoize else None
        )

        def effective(level: int, node: int) -> list[int]:
            row = staged.get((level, node))
            if row is not None:
                return row
            return overlay.neighbor_list(node, level)

        def query_dist(node: int) -> float:
            counters.distance_computations += 1
            return distance(vec, fetcher.get(node), self.metric)

        def pair_dist(a: int, b: int) -> float:
            key = (a, b) if a < b else (b, a)
            if pair_cache is not None:
                hit = pair_cache.get(key)
                if hit is not None:
                    return hit
            counters.distance_computations += 1
            va, vb = fetcher.get_many([a, b])
            d = distance(va, vb, self.metric)
            if pair_cache is not None:
                pair_cache[key] = d
            return d

        entry = overlay.entry_point
        cur, cur_d = entry, query_dist(entry)
        top = overlay.level_count - 1
        for lvl in range(top, level_v, -1):
            cur, cur_d = self._greedy(lvl, effective, query_dist, cur, cur_d)
        entries = [(cur_d, cur)]
        for lvl in range(min(level_v, top), -1, -1):
            found = self._search_level(lvl, effective, query_dist, entries,
                                       self.ef_construction)
            if variant == "simplified":
                rng = _add_rng(self.seed, "addsel", v, lvl)
                take = min(self.max_degree, len(found))
                idx = sorted(rng.choice(len(found), size=take, replace=False).tolist())
                selected = [found[j][1] for j in idx]
            else:
                selected = rng_shrink(
                    [(i, d) for d, i in found], self.max_degree, pair_dist
                )
            staged[(lvl, v)] = list(selected)
            for u in selected:
                row = list(effective(lvl, u))
                row.append(v)
                if len(row) > self.max_degree:
                    if variant == "simplified":
                        rng = _add_rng(self.seed, "addrev", v, u * 64 + lvl)
                        keep = set(
                            rng.choice(len(row), size=self.max_degree,
                                       replace=False).tolist()
                        )
                        row = [x for j, x in enumerate(row) if j in keep]
                    else:
                        cand = sorted((pair_dist(u, x), x) for x in row)
                        row = rng_shrink(
                            [(i, d) for d, i in cand], self.max_degree, pair_dist
                        )
                staged[(lvl, u)] = row
            entries = found
        return staged

    def _greedy(self, level: int, effective, query_dist, cur: int,
                cur_d: float) -> tuple[int, float]:
        seen = {cur}
        while True:
            nbrs = [w for w in effective(level, cur) if w not in seen]
            if not nbrs:
                return cur, cur_d
            seen.update(nbrs)
            best = (cur_d, cur)
            for w in nbrs:
                dw = query_dist(w)
                if (dw, w) < best:
                    best = (dw, w)
            if best == (cur_d, cur):
                return cur, cur_d
            cur_d, cur = best

    def _search_level(self, level: int, effective, query_dist,
                      entries: list[tuple[float, int]], ef: int
                      ) -> list[tuple[float, int]]:
        visited = set()
        cands: list[tuple[float, int]] = []
        results: list[tuple[float, int]] = []
        for d, e in entries:
            if e in visited:
                continue
            visited.add(e)
            heapq.heappush(cands, (d, e))
            heapq.heappush(results, (-d, -e))
        while len(results) > ef:
            heapq.heappop(results)
        while cands:
            d, u = heapq.heappop(cands)
            wd, wi = -results[0][0], -results[0][1]
            if len(results) == ef and (d, u) > (wd, wi):
                break
            for w in effective(level, u):
                if w in visited:
                    continue
                visited.add(w)
                dw = query_dist(w)
                if len(results) < ef or (dw, w) < (wd, wi):
                    heapq.heappush(cands, (dw, w))
                    heapq.heappush(results, (-dw, -w))
                    if len(results) > ef:
                        heapq.heappop(results)
                    wd, wi = -results[0][0], -results[0][1]
        return sorted((-nd, -ni) for nd, ni in results)

    # -- buffered add & drain --

    def buffered_add(self, contents: list[bytes]) -> list[int]:
        """Embed once, reserve ids, and hold items for delayed insertion."""
        if not contents:
            return []
        next_id = self.store.n
        vecs = embed_all(
            [EmbeddingRequest(next_id + j, c) for j, c in enumerate(contents)],
            self.provider,
        )
        ids = []
        for j, content in enumerate(contents):
            nid = self.store.append(content)
            self.buffer.pending.append((nid, content, vecs[j]))
            ids.append(nid)
        self._enforce_budget()
        return ids

    def _enforce_budget(self) -> None:
        if self.buffer.total_bytes() <= self.buffer.byte_budget:
            return
        self.buffer.distance_cache.clear()
        if self.buffer.total_bytes() > self.buffer.byte_budget:
            self.drain()

    def buffer_scan(self, q: np.ndarray) -> list[tuple[int, float]]:
        """Brute-force exact distances over the pending buffer."""
        return [
            (nid, distance(q, vec, self.metric))
            for nid, _, vec in self.buffer.pending
        ]

    def drain(self) -> list[AddCounters]:
        """Insert every pending item via the simplified variant, in order.

        Reuses the buffered embeddings and shares one embedding memo plus the
        buffer's global distance cache across the whole drain; the cache is
        cleared whenever the byte budget is crossed.
        """
        shared_memo: dict[int, np.ndarray] = {
            nid: vec for nid, _, vec in self.buffer.pending
        }
        results = []
        pending = self.buffer.pending
        self.buffer.pending = []
        for nid, content, vec in pending:
            _, counters = self.add_node(
                content,
                variant="simplified",
                embedding=vec,
                shared_embed_memo=shared_memo,
                global_cache=self.buffer.distance_cache,
                reserved_id=nid,
            )
            results.append(counters)
            if self.buffer.cache_bytes() > self.buffer.byte_budget:
                self.buffer.distance_cache.clear()
        return results

    # -- delete --

    def delete(self, node_id: int) -> bool:
        """Soft-delete; returns True when the rebuild advisory fires."""
        self.overlay.mark_deleted(node_id)
        fraction = self.overlay.deleted_fraction()
        if fraction >= DELETE_REBUILD_THRESHOLD:
            self.rebuild_advisories.append(
                f"deleted fraction {fraction:.3f} crossed "
                f"{DELETE_REBUILD_THRESHOLD:.0%}; consider a rebuild"
            )
            return True
        return False

    def compact(self) -> tuple[PrunedGraph, PQCodes | None]:
        """Refreeze the overlay into CSR form (plus stacked PQ codes)."""
        graph = self.overlay.freeze(self.max_degree)
        return graph, self.pq_codes


# --- Mutation log -------------------------------------------------------------


class MutationLog:
    """Append-only JSONL log of acknowledged mutations; replayable in order."""

    def __init__(self, path) -> None:
        self.path = path

    def append_add(self, node_id: int, content: bytes, variant: str) -> None:
        self._append(
            {
                "op": "add",
                "id": node_id,
                "variant": variant,
                "content": base64.b64encode(content).decode("ascii"),
            }
        )

    def append_delete(self, node_id: int) -> None:
        self._append({"op": "delete", "id": node_id})

    def _append(self, record: dict) -> None:
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

    def entries(self) -> list[dict]:
        try:
            with open(self.path, encoding="ascii") as fh:
                return [json.loads(line) for line in fh if line.strip()]
        except FileNotFoundError:
            return []

    def clear(self) -> None:
        with open(self.path, "w", encoding="ascii"):
            pass


def replay_log(log: MutationLog, index: MutableIndex) -> int:
    """Re-apply logged mutations onto a freshly loaded snapshot."""
    applied = 0
    for record in log.entries():
        if record["op"] == "add":
            if record["id"] < index.overlay.n:
                continue  # already compacted into the snapshot
            content = base64.b64decode(record["content"])
            if record["id"] >= index.store.n:
                appended = index.store.append(content)
                if appended != record["id"]:
                    raise InvalidArgumentError(
                        f"log id {record['id']} does not match store row {appended}"
                    )
            index.add_node(content, variant=record.get("variant", "simplified"),
                           reserved_id=record["id"])
            applied += 1
        elif record["op"] == "delete":
            if record["id"] < index.overlay.n:
                index.overlay.mark_deleted(record["id"])
                applied += 1
    return applied
