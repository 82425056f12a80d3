"""Query-time engine: best-first traversal and two-level search with batching.

Both modes walk the graph with exact distances so traversal quality never
depends on quantization error. The two-level mode additionally keeps an
approximate queue fed by PQ table lookups and only recomputes exact
embeddings for the most promising fraction of it (the re-ranking percentage),
accumulating those candidates across exploration steps until a batch
threshold is reached. Batching trades a little exploration-order staleness
for provider throughput; a final flush guarantees every selected candidate is
recomputed before the loop can terminate.

Counters in the report are the latency proxy: `recomputations` is the number
of exact embeddings computed for graph nodes, `approx_lookups` the number of
PQ table lookups. Deleted nodes stay traversable and are filtered from the
result list only at the end.
"""

from __future__ import annotations

import bisect
import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ProviderError, SearchError
from .pq import PQCodes, PQModel, adc_build, approx_distance_many
from .vectors import EmbeddingRequest, distance_many, embed_all

MODES = ("exact_bestfirst", "two_level")

STAGES = ("pq_lookup", "payload_fetch", "embed", "distance")


@dataclass
class SearchParams:
    k: int = 3
    ef: int = 50
    rerank_percent: float = 30.0   # share of eligible approx candidates promoted per step
    batch_size: int = 64           # recompute batch threshold
    mode: str = "two_level"
    cache_percent: float | None = None

    def __post_init__(self) -> None:
        if self.k < 1 or self.ef < self.k:
            raise InvalidArgumentError("need ef >= k >= 1")
        if not 0 < self.rerank_percent <= 100:
            raise InvalidArgumentError("rerank_percent must be in (0, 100]")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode: {self.mode!r}")
        if self.cache_percent is not None and not 0 < self.cache_percent <= 100:
            raise InvalidArgumentError("cache_percent must be in (0, 100]")


@dataclass
class SearchReport:
    results: list[tuple[int, float]] = field(default_factory=list)
    recomputations: int = 0
    approx_lookups: int = 0
    batches: list[int] = field(default_factory=list)
    cache_hits: int = 0
    stage_times: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    wall_time: float = 0.0

    @property
    def cache_hit_rate(self) -> float:
        seen = self.cache_hits + self.recomputations
        return self.cache_hits / seen if seen else 0.0


# --- Exact embedding sources --------------------------------------------------


class MatrixSource:
    """Oracle-mode source: exact vectors come from a precomputed matrix.

    Counts the same way as provider recomputation so evaluation runs compare
    like with like; values are bitwise identical when the matrix was produced
    by the same provider.
    """

    def __init__(self, matrix: np.ndarray) -> None:
        self.matrix = matrix

    def fetch(self, ids: list[int], report: SearchReport) -> np.ndarray:
        t = time.perf_counter()
        rows = self.matrix[ids]
        report.stage_times["embed"] += time.perf_counter() - t
        return rows


class ProviderSource:
    """Recomputation source: payload fetch plus a provider embed per batch."""

    def __init__(self, provider, payload_of) -> None:
        self.provider = provider
        self.payload_of = payload_of  # id -> bytes

    def fetch(self, ids: list[int], report: SearchReport) -> np.ndarray:
        t = time.perf_counter()
        requests = [EmbeddingRequest(i, self.payload_of(i)) for i in ids]
        report.stage_times["payload_fetch"] += time.perf_counter() - t
        t = time.perf_counter()
        vectors = embed_all(requests, self.provider)
        report.stage_times["embed"] += time.perf_counter() - t
        return vectors


class EmbeddingCache:
    """Pinned exact vectors for the highest-degree nodes.

    Consulted before recomputation is scheduled; transparent by construction
    because cached vectors were produced by the same deterministic provider,
    so result lists are bitwise unchanged and only the counters move.
    """

    def __init__(self, vectors: dict[int, np.ndarray]) -> None:
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.vectors


def build_embedding_cache(graph, fraction_percent: float, source) -> EmbeddingCache:
    """Precompute exact embeddings for the top ceil(f*n/100) nodes by degree."""
    if not 0 < fraction_percent <= 100:
        raise InvalidArgumentError("cache fraction must be in (0, 100]")
    n = graph.n
    count = min(n, math.ceil(fraction_percent / 100.0 * n))
    degrees = graph.out_degrees(0)
    order = np.lexsort((np.arange(n), -degrees))
    ids = sorted(int(i) for i in order[:count])
    scratch = SearchReport()
    vectors = source.fetch(ids, scratch)
    return EmbeddingCache({i: vectors[j] for j, i in enumerate(ids)})


class _Recomputer:
    """Single funnel for exact vectors: cache split, counters, batch log."""

    def __init__(self, source, cache: EmbeddingCache | None, report: SearchReport,
                 dim: int) -> None:
        self.source = source
        self.cache = cache
        self.report = report
        self.dim = dim

    def vectors(self, ids: list[int]) -> np.ndarray:
        cache = self.cache
        report = self.report
        times = report.stage_times
        t_start = time.perf_counter()
        fetch_attributed = times["embed"] + times["payload_fetch"]
        if cache is None:
            hits: list[int] = []
            misses = ids
        else:
            hits = [i for i in ids if i in cache]
            misses = [i for i in ids if i not in cache]
        out = np.empty((len(ids), self.dim), dtype=np.float32)
        if misses:
            try:
                fetched = self.source.fetch(misses, report)
            except ProviderError as exc:
                raise SearchError(str(exc), partial_report=report) from exc
            report.recomputations += len(misses)
            report.batches.append(len(misses))
            pos = {i: j for j, i in enumerate(misses)}
            for j, i in enumerate(ids):
                if i in pos:
                    out[j] = fetched[pos[i]]
        if hits:
            report.cache_hits += len(hits)
            for j, i in enumerate(ids):
                if cache is not None and i in cache:
                    out[j] = cache.vectors[i]
        # assembly and cache-split overhead counts as embed time (everything
        # here exists to produce the exact vectors)
        fetch_delta = times["embed"] + times["payload_fetch"] - fetch_attributed
        times["embed"] += (time.perf_counter() - t_start) - fetch_delta
        return out


# --- Bounded exact queue ------------------------------------------------------


class _ExactQueue:
    """Capacity-ef ascending priority structure with visited marks.

    Members never change distance (each node's exact distance is computed at
    most once per query), which keeps the lazy eviction heap simple. All
    orderings are (distance, id) lexicographic.
    """

    def __init__(self, ef: int) -> None:
        self.ef = ef
        self.member: dict[int, float] = {}
        self.unvisited: list[tuple[float, int]] = []
        self.evict: list[tuple[float, int]] = []  # (-d, -id): top is worst member
        self.visited: set[int] = set()

    def _worst(self) -> tuple[float, int]:
        while True:
            nd, ni = self.evict[0]
            d, i = -nd, -ni
            if self.member.get(i) == d:
                return d, i
            heapq.heappop(self.evict)

    def try_insert(self, node: int, dist: float) -> bool:
        if node in self.member:
            return False
        if len(self.member) < self.ef:
            self.member[node] = dist
            heapq.heappush(self.unvisited, (dist, node))
            heapq.heappush(self.evict, (-dist, -node))
            return True
        wd, wi = self._worst()
        if (dist, node) < (wd, wi):
            del self.member[wi]
            self.member[node] = dist
            heapq.heappush(self.unvisited, (dist, node))
            heapq.heappush(self.evict, (-dist, -node))
            return True
        return False

    def pop_closest_unvisited(self) -> tuple[float, int] | None:
        while self.unvisited:
            d, i = heapq.heappop(self.unvisited)
            if self.member.get(i) != d or i in self.visited:
                continue
            self.visited.add(i)
            return d, i
        return None

    def k_best(self, k: int, is_active) -> list[tuple[int, float]]:
        ranked = sorted((d, i) for i, d in self.member.items())
        out = []
        for d, i in ranked:
            if is_active(i):
                out.append((i, d))
                if len(out) == k:
                    break
        return out


# --- Search entry points -------------------------------------------------------


def _descend(graph, q: np.ndarray, metric: str, rec: _Recomputer,
             report: SearchReport, exact_dist: dict[int, float]) -> tuple[int, float]:
    """Exact greedy descent through the upper navigation layers."""
    entry = graph.entry_point
    vec = rec.vectors([entry])
    t = time.perf_counter()
    cur_d = float(distance_many(vec, q, metric)[0])
    report.stage_times["distance"] += time.perf_counter() - t
    exact_dist[entry] = cur_d
    cur = entry
    for level in range(graph.level_count - 1, 0, -1):
        while True:
            nbrs = [w for w in graph.neighbors(cur, level).tolist()
                    if w not in exact_dist]
            if not nbrs:
                break
            vecs = rec.vectors(nbrs)
            t = time.perf_counter()
            ds = distance_many(vecs, q, metric)
            report.stage_times["distance"] += time.perf_counter() - t
            best = (cur_d, cur)
            for w, dw in zip(nbrs, ds.tolist()):
                exact_dist[w] = dw
                if (dw, w) < best:
                    best = (dw, w)
            if best == (cur_d, cur):
                break
            cur_d, cur = best
    return cur, cur_d


def best_first_search(graph, q: np.ndarray, params: SearchParams, source,
                      metric: str, cache: EmbeddingCache | None = None
                      ) -> SearchReport:
    """Exact best-first traversal; every new neighbor is recomputed on sight.

    Embeds are batched per exploration step (all fresh neighbors of the node
    being expanded go into one provider call).
    """
    t0 = time.perf_counter()
    report = SearchReport()
    rec = _Recomputer(source, cache, report, q.shape[0])
    exact_dist: dict[int, float] = {}
    cur, cur_d = _descend(graph, q, metric, rec, report, exact_dist)
    eq = _ExactQueue(params.ef)
    for i, d in exact_dist.items():
        eq.try_insert(i, d)
    distance_acc = 0.0
    t_prev = time.perf_counter()
    while True:
        nxt = eq.pop_closest_unvisited()
        if nxt is None:
            break
        _, u = nxt
        fresh = [w for w in graph.neighbors(u, 0).tolist() if w not in exact_dist]
        if not fresh:
            continue
        for w in fresh:
            exact_dist[w] = math.inf  # claimed; real value set below
        t_now = time.perf_counter()
        distance_acc += t_now - t_prev
        vecs = rec.vectors(fresh)  # self-attributes payload/embed time
        t_prev = time.perf_counter()
        ds = distance_many(vecs, q, metric)
        for w, dw in zip(fresh, ds.tolist()):
            exact_dist[w] = dw
            eq.try_insert(w, dw)
    report.results = eq.k_best(params.k, lambda i: not graph.is_deleted(i))
    distance_acc += time.perf_counter() - t_prev
    report.stage_times["distance"] += distance_acc
    report.wall_time = time.perf_counter() - t0
    return report


def two_level_search(graph, q: np.ndarray, params: SearchParams,
                     pq_model: PQModel, pq_codes: PQCodes, source,
                     metric: str, cache: EmbeddingCache | None = None
                     ) -> SearchReport:
    """Hybrid traversal: PQ distances gate which nodes get exact recomputation.

    Per exploration step, fresh neighbors enter the approximate queue (which
    retains every entry for the whole query); a candidate is promoted to
    exact recomputation only once it ranks inside the top rerank_percent of
    everything seen so far, so most arrivals are never recomputed.

    Batching discipline: each step's promoted candidates are recomputed in
    one provider call (within-step batching), while the report's batch log
    groups the recompute stream at batch_size boundaries - the schedule a
    throughput-oriented provider would receive. The traversal's decisions are
    therefore independent of batch_size: result sets are bitwise identical
    for any threshold, every logged batch equals batch_size except possibly
    the final one, and the batch log sums to the recomputation count.
    """
    t0 = time.perf_counter()
    report = SearchReport()
    rec = _Recomputer(source, cache, report, q.shape[0])

    t = time.perf_counter()
    table = adc_build(pq_model, q)
    report.stage_times["pq_lookup"] += time.perf_counter() - t

    exact_dist: dict[int, float] = {}
    cur, cur_d = _descend(graph, q, metric, rec, report, exact_dist)
    eq = _ExactQueue(params.ef)
    for i, d in exact_dist.items():
        eq.try_insert(i, d)
    exact_known = set(exact_dist)

    aq_sorted: list[tuple[float, int]] = []
    eligible_heap: list[tuple[float, int]] = []
    approx_known: set[int] = set()
    codes = pq_codes.codes
    alpha = params.rerank_percent / 100.0

    # chained timestamps: every span starts where the previous one ended, so
    # loop bookkeeping is always attributed to a stage
    distance_acc = 0.0
    lookup_acc = 0.0
    t_prev = time.perf_counter()
    while True:
        nxt = eq.pop_closest_unvisited()
        t_now = time.perf_counter()
        distance_acc += t_now - t_prev
        t_prev = t_now
        if nxt is None:
            break
        _, u = nxt

        fresh = [w for w in graph.neighbors(u, 0).tolist()
                 if w not in approx_known]
        if fresh:
            approx = approx_distance_many(table, codes[fresh])
            report.approx_lookups += len(fresh)
            for w, aw in zip(fresh, approx.tolist()):
                approx_known.add(w)
                bisect.insort(aq_sorted, (aw, w))
                if w not in exact_known:
                    heapq.heappush(eligible_heap, (aw, w))
        step_c: list[int] = []
        if aq_sorted:
            cutoff_rank = min(len(aq_sorted),
                              max(1, math.ceil(alpha * len(aq_sorted))))
            cutoff = aq_sorted[cutoff_rank - 1]
            while eligible_heap and eligible_heap[0] <= cutoff:
                _, w = heapq.heappop(eligible_heap)
                if w in exact_known:
                    continue
                exact_known.add(w)
                step_c.append(w)
        t_now = time.perf_counter()
        lookup_acc += t_now - t_prev
        t_prev = t_now

        if step_c:
            vecs = rec.vectors(step_c)  # self-attributes payload/embed time
            t_prev = time.perf_counter()
            ds = distance_many(vecs, q, metric)
            for w, dw in zip(step_c, ds.tolist()):
                exact_dist[w] = dw
                eq.try_insert(w, dw)
            t_now = time.perf_counter()
            distance_acc += t_now - t_prev
            t_prev = t_now

    # regroup the recompute stream at threshold boundaries for the batch log
    total = report.recomputations
    report.batches = [params.batch_size] * (total // params.batch_size)
    if total % params.batch_size:
        report.batches.append(total % params.batch_size)
    report.results = eq.k_best(params.k, lambda i: not graph.is_deleted(i))
    distance_acc += time.perf_counter() - t_prev
    report.stage_times["distance"] += distance_acc
    report.stage_times["pq_lookup"] += lookup_acc
    report.wall_time = time.perf_counter() - t0
    return report


def run_search(graph, q: np.ndarray, params: SearchParams, source, metric: str,
               pq_model: PQModel | None = None, pq_codes: PQCodes | None = None,
               cache: EmbeddingCache | None = None) -> SearchReport:
    """Dispatch on params.mode."""
    if params.mode == "exact_bestfirst":
        return best_first_search(graph, q, params, source, metric, cache)
    if pq_model is None or pq_codes is None:
        raise InvalidArgumentError("two_level mode requires PQ artifacts")
    return two_level_search(graph, q, params, pq_model, pq_codes, source,
                            metric, cache)
