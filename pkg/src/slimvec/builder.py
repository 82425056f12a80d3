"""Incremental graph construction with high-degree-preserving pruning.

The build is a two-pass procedure:

* pass 1 inserts every item with a uniform degree cap M, producing an
  unpruned reference graph whose out-degrees serve as the node-importance
  oracle (and as the comparison baseline in the eval harness);
* pass 2 rebuilds from scratch with hub-aware caps: the top beta percent of
  nodes by pass-1 degree may keep up to M outgoing edges at insertion, all
  others are capped at the lower m. Every node may still fill up to M via
  bidirectional backlinks from later insertions, which is what preserves the
  hub structure.

Neighbor selection uses the relative-neighborhood rule: walking candidates in
ascending distance order, a candidate x is dropped when some already-kept y
is closer to x than the insertion target is (the longest edge of the
triangle). Insertion order is item order with a pinned seed for level draws,
so two builds from the same inputs are bitwise identical.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BudgetInfeasibleError, BuildError, InvalidArgumentError
from .graph import PrunedGraph
from .pq import PQCodes, PQModel, default_m_pq, pq_encode, pq_train
from .vectors import METRICS, EmbeddingRequest, ResidentCounter, embed_all

_MAX_LEVEL = 24
_BACKFILL_FACTOR = 2.0  # calibrated reverse-edge inflation constant, see profile_m
_PQ_SAMPLE_CAP = 100_000
_ENCODE_CHUNK = 4096


@dataclass
class BuildParams:
    """Construction knobs; flag names in the CLI mirror these one to one."""

    ef_construction: int = 64
    max_degree: int = 16          # cap for hub nodes (and all reverse links)
    low_degree: int | None = None  # cap for non-hubs at insertion; default M // 5
    hub_percent: float = 2.0      # fraction of nodes designated hubs, in percent
    budget_bytes: int | None = None
    recall_floor: float | None = None  # acceptance-run target, informational
    metric: str = "cosine"
    seed: int = 0
    pq_subspaces: int | None = None    # None -> default_m_pq(dim)
    pq_iters: int = 10

    def __post_init__(self) -> None:
        if self.max_degree < 2:
            raise InvalidArgumentError("max_degree must be >= 2")
        if self.low_degree is None:
            self.low_degree = max(1, self.max_degree // 5)
        if not 0 < self.low_degree < self.max_degree:
            raise InvalidArgumentError("need 0 < low_degree < max_degree")
        if not 0 < self.hub_percent <= 100:
            raise InvalidArgumentError("hub_percent must be in (0, 100]")
        if self.ef_construction < self.max_degree:
            raise InvalidArgumentError("ef_construction must be >= max_degree")
        if self.metric not in METRICS:
            raise InvalidArgumentError(f"unknown metric: {self.metric!r}")


@dataclass
class BuildResult:
    graph: PrunedGraph
    pq_model: PQModel | None
    pq_codes: PQCodes | None
    unpruned: PrunedGraph | None
    degrees: np.ndarray          # pass-1 base out-degrees, the hub oracle
    hub_ids: np.ndarray
    trim_iterations: int = 0


def assign_level(node_id: int, seed: int, max_degree: int) -> int:
    """Geometric level draw with ratio 1/ln(M), keyed by (seed, node id).

    Keyed by id rather than by a sequential stream so the draw is identical
    no matter which shard (or pass) inserts the node.
    """
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(
        b"level:%d" % node_id, digest_size=8, key=key
    ).digest()
    (word,) = struct.unpack("<Q", digest)
    u = ((word >> 11) + 1) / float(2**53)
    level = int(-math.log(u) / math.log(max_degree))
    return min(level, _MAX_LEVEL)


def rng_shrink(candidates, cap: int, dist) -> list[int]:
    """Relative-neighborhood selection over distance-sorted candidates.

    candidates: (id, distance-to-target) pairs in ascending distance order.
    dist: pairwise oracle dist(a_id, b_id). Keeps a candidate x iff no
    already-kept y satisfies dist(x, y) < dist(x, target); stops once cap
    candidates are kept.
    """
    if cap < 1:
        raise InvalidArgumentError("cap must be >= 1")
    kept: list[int] = []
    for cid, cd in candidates:
        if len(kept) == cap:
            break
        for kid in kept:
            if dist(cid, kid) < cd:
                break
        else:
            kept.append(cid)
    return kept


def select_hubs(degrees: np.ndarray, hub_percent: float, n: int) -> np.ndarray:
    """Deterministic top-ceil(beta*n/100) ids by (degree desc, id asc)."""
    if not 0 < hub_percent <= 100:
        raise InvalidArgumentError("hub_percent must be in (0, 100]")
    count = min(n, math.ceil(hub_percent / 100.0 * n))
    order = np.lexsort((np.arange(n), -np.asarray(degrees, dtype=np.int64)))
    return np.sort(order[:count])


def profile_m(n: int, budget_bytes: int, hub_percent: float) -> tuple[int, int]:
    """Pick the largest degree cap whose predicted metadata fits the budget.

    Predicted average degree is beta*M + (1-beta)*c*m with c=2.0, the
    measured reverse-edge backfill factor (non-hubs insert with m edges but
    accept backlinks up to M, roughly doubling their realized degree). The
    prediction intentionally ignores the tiny upper navigation layers; the
    post-build trim loop enforces the hard bound.
    """
    floor = 8 * n
    if budget_bytes < floor:
        raise BudgetInfeasibleError(
            f"budget {budget_bytes} B below achievable floor for n={n}",
            min_achievable_bytes=floor,
        )
    beta = hub_percent / 100.0
    best = None
    for m_cap in range(2, 4097):
        low = max(1, m_cap // 5)
        pred_avg = beta * m_cap + (1.0 - beta) * _BACKFILL_FACTOR * low
        if n * pred_avg * 4 <= budget_bytes:
            best = m_cap
        else:
            break
    if best is None:
        raise BudgetInfeasibleError(
            f"no degree cap fits budget {budget_bytes} B for n={n}",
            min_achievable_bytes=floor,
        )
    return best, max(1, best // 5)


# --- Mutable build-time graph ------------------------------------------------


class GraphAccum:
    """Adjacency-list graph under construction; frozen to CSR when done."""

    def __init__(self, n: int, max_degree: int) -> None:
        self.n = n
        self.max_degree = max_degree
        self.base: list[list[int] | None] = [None] * n
        self.upper: list[dict[int, list[int]]] = []
        self.node_level = np.zeros(n, dtype=np.uint16)
        self.entry_point = -1
        self.max_level = -1
        self.inserted = 0

    def adj(self, level: int, v: int) -> list[int]:
        if level == 0:
            return self.base[v]
        return self.upper[level - 1][v]

    def freeze(self) -> PrunedGraph:
        level_offsets: list[np.ndarray] = []
        level_neighbors: list[np.ndarray] = []
        for lvl in range(self.max_level + 1):
            offsets = np.zeros(self.n + 1, dtype=np.uint64)
            chunks: list[list[int]] = []
            total = 0
            for v in range(self.n):
                row = self.base[v] if lvl == 0 else self.upper[lvl - 1].get(v)
                if row:
                    chunks.append(row)
                    total += len(row)
                offsets[v + 1] = total
            flat = (
                np.fromiter(
                    (w for row in chunks for w in row), dtype=np.uint32, count=total
                )
                if total
                else np.empty(0, dtype=np.uint32)
            )
            level_offsets.append(offsets)
            level_neighbors.append(flat)
        return PrunedGraph(
            n=self.n,
            max_degree=self.max_degree,
            entry_point=self.entry_point,
            levels=self.node_level.copy(),
            level_offsets=level_offsets,
            level_neighbors=level_neighbors,
        )


class _DistanceKernel:
    """Vectorized batch distances against one fixed embedding matrix.

    einsum keeps the accumulation order fixed, which makes builds bitwise
    reproducible run to run.
    """

    def __init__(self, matrix: np.ndarray, metric: str) -> None:
        self.matrix = matrix
        self.metric = metric
        if metric == "cosine":
            norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
            if np.any(norms == 0.0):
                bad = int(np.argmin(norms))
                raise BuildError(
                    f"item {bad} has a zero embedding; cosine metric undefined"
                )
            self.norms = norms
        else:
            self.norms = None

    def to_query(self, ids: list[int], q: np.ndarray, qn: float) -> np.ndarray:
        rows = self.matrix[ids]
        if self.metric == "l2":
            d = rows - q
            return np.einsum("ij,ij->i", d, d)
        dots = np.einsum("ij,j->i", rows, q)
        if self.metric == "ip":
            return -dots
        return -(dots / (self.norms[ids] * qn))

    def pairwise(self, ids: list[int]) -> np.ndarray:
        rows = self.matrix[ids]
        if self.metric == "l2":
            sq = np.einsum("ij,ij->i", rows, rows)
            g = np.einsum("ik,jk->ij", rows, rows)
            return sq[:, None] + sq[None, :] - 2.0 * g
        g = np.einsum("ik,jk->ij", rows, rows)
        if self.metric == "ip":
            return -g
        nr = self.norms[ids]
        return -(g / (nr[:, None] * nr[None, :]))

    def query_norm(self, v: int) -> float:
        return float(self.norms[v]) if self.norms is not None else 1.0


def _rng_select_fast(
    cand: list[tuple[float, int]], cap: int, kernel: _DistanceKernel
) -> list[int]:
    """Fast path of rng_shrink: one pairwise matrix instead of lazy oracle."""
    if len(cand) <= 1:
        return [i for _, i in cand[:cap]]
    ids = [i for _, i in cand]
    pair = kernel.pairwise(ids)
    kept: list[int] = []
    out: list[int] = []
    for j, (dj, idj) in enumerate(cand):
        if len(out) == cap:
            break
        row = pair[j]
        for kk in kept:
            if row[kk] < dj:
                break
        else:
            kept.append(j)
            out.append(idj)
    return out


class _Inserter:
    """Shared insertion machinery for one build pass over one matrix."""

    def __init__(self, accum: GraphAccum, kernel: _DistanceKernel,
                 ef_construction: int) -> None:
        self.accum = accum
        self.kernel = kernel
        self.efc = ef_construction
        # generation-marked visits; a plain list beats numpy scalar indexing here
        self.visited = [0] * accum.n
        self.gen = 0

    def _greedy(self, level: int, q: np.ndarray, qn: float,
                cur: int, cur_d: float) -> tuple[int, float]:
        adj = self.accum.adj
        while True:
            nbrs = adj(level, cur)
            if not nbrs:
                return cur, cur_d
            ds = self.kernel.to_query(nbrs, q, qn)
            j = int(np.argmin(ds))
            best_d = float(ds[j])
            best_i = nbrs[j]
            # resolve argmin ties toward the lower id for determinism
            for k in range(j + 1, len(nbrs)):
                if ds[k] == best_d and nbrs[k] < best_i:
                    best_i = nbrs[k]
            if (best_d, best_i) < (cur_d, cur):
                cur, cur_d = best_i, best_d
            else:
                return cur, cur_d

    def _search_layer(self, level: int, q: np.ndarray, qn: float,
                      entries: list[tuple[float, int]], ef: int
                      ) -> list[tuple[float, int]]:
        self.gen += 1
        gen = self.gen
        visited = self.visited
        adj = self.accum.adj
        kernel = self.kernel
        cands: list[tuple[float, int]] = []
        results: list[tuple[float, int]] = []  # (-d, -id): heap top is worst
        for d, e in entries:
            if visited[e] == gen:
                continue
            visited[e] = gen
            heapq.heappush(cands, (d, e))
            heapq.heappush(results, (-d, -e))
        while len(results) > ef:
            heapq.heappop(results)
        while cands:
            d, u = heapq.heappop(cands)
            wd, wi = -results[0][0], -results[0][1]
            if len(results) == ef and (d, u) > (wd, wi):
                break
            fresh = [w for w in adj(level, u) if visited[w] != gen]
            if not fresh:
                continue
            for w in fresh:
                visited[w] = gen
            ds = kernel.to_query(fresh, q, qn)
            full = len(results) == ef
            for w, dw in zip(fresh, ds.tolist()):
                if not full or (dw, w) < (wd, wi):
                    heapq.heappush(cands, (dw, w))
                    heapq.heappush(results, (-dw, -w))
                    if len(results) > ef:
                        heapq.heappop(results)
                    wd, wi = -results[0][0], -results[0][1]
                    full = len(results) == ef
        out = sorted((-nd, -ni) for nd, ni in results)
        return out

    def _shrink_node(self, level: int, v: int, cap: int) -> None:
        lst = self.accum.adj(level, v)
        q = self.kernel.matrix[v]
        qn = self.kernel.query_norm(v)
        ds = self.kernel.to_query(lst, q, qn)
        cand = sorted(zip(ds.tolist(), lst))
        kept = _rng_select_fast(cand, cap, self.kernel)
        lst[:] = kept

    def insert(self, v: int, level_v: int, base_cap: int) -> None:
        accum = self.accum
        accum.node_level[v] = level_v
        accum.base[v] = []
        while len(accum.upper) < level_v:
            accum.upper.append({})
        for lvl in range(1, level_v + 1):
            accum.upper[lvl - 1][v] = []
        if accum.entry_point < 0:
            accum.entry_point = v
            accum.max_level = level_v
            accum.inserted += 1
            return
        q = self.kernel.matrix[v]
        qn = self.kernel.query_norm(v)
        cur = accum.entry_point
        cur_d = float(self.kernel.to_query([cur], q, qn)[0])
        for lvl in range(accum.max_level, level_v, -1):
            cur, cur_d = self._greedy(lvl, q, qn, cur, cur_d)
        entries = [(cur_d, cur)]
        max_deg = accum.max_degree
        for lvl in range(min(level_v, accum.max_level), -1, -1):
            found = self._search_layer(lvl, q, qn, entries, self.efc)
            cap = base_cap if lvl == 0 else max_deg
            selected = _rng_select_fast(found, cap, self.kernel)
            accum.adj(lvl, v)[:] = selected
            for u in selected:
                ulist = accum.adj(lvl, u)
                ulist.append(v)
                if len(ulist) > max_deg:
                    self._shrink_node(lvl, u, max_deg)
            entries = found
        if level_v > accum.max_level:
            accum.max_level = level_v
            accum.entry_point = v
        accum.inserted += 1


def build_graph(
    matrix: np.ndarray,
    params: BuildParams,
    hub_mask: np.ndarray | None,
    level_of,
) -> GraphAccum:
    """One insertion pass. hub_mask None means the uniform-cap reference pass."""
    n = matrix.shape[0]
    accum = GraphAccum(n, params.max_degree)
    kernel = _DistanceKernel(matrix, params.metric)
    inserter = _Inserter(accum, kernel, params.ef_construction)
    for v in range(n):
        if hub_mask is None or hub_mask[v]:
            cap = params.max_degree
        else:
            cap = params.low_degree
        inserter.insert(v, level_of(v), cap)
    return accum


def _metadata_bytes(accum: GraphAccum) -> int:
    total = sum(len(row) for row in accum.base if row)
    for level in accum.upper:
        total += sum(len(row) for row in level.values())
    return total * 4


def _trim_to_budget(accum: GraphAccum, kernel: _DistanceKernel,
                    budget_bytes: int) -> int:
    """Iteratively lower the base-layer cap until metadata fits the budget."""
    inserter = _Inserter(accum, kernel, 0)
    cap = accum.max_degree
    iterations = 0
    while _metadata_bytes(accum) > budget_bytes:
        cap -= 1
        if cap < 1:
            raise BudgetInfeasibleError(
                f"cannot trim below {_metadata_bytes(accum)} B",
                min_achievable_bytes=_metadata_bytes(accum),
            )
        for v in range(accum.n):
            if len(accum.base[v]) > cap:
                inserter._shrink_node(0, v, cap)
        iterations += 1
    return iterations


def embed_items(
    items: list[bytes],
    provider,
    counter: ResidentCounter | None = None,
    global_ids: list[int] | None = None,
) -> np.ndarray:
    """Embed every item into one resident matrix, instrumenting the counter."""
    if not items:
        raise BuildError("cannot build an index over zero items")
    ids = global_ids if global_ids is not None else range(len(items))
    requests = [EmbeddingRequest(i, content) for i, content in zip(ids, items)]
    matrix = embed_all(requests, provider)
    if counter is not None:
        counter.add(len(items))
    return matrix


def pq_train_sample(matrix: np.ndarray, sample_size: int | None = None) -> np.ndarray:
    """First-k training sample; cycles rows when fewer than 256 are available."""
    cap = min(matrix.shape[0], sample_size or _PQ_SAMPLE_CAP)
    sample = matrix[:cap]
    if sample.shape[0] < 256:
        reps = -(-256 // sample.shape[0])
        sample = np.tile(sample, (reps, 1))[:256]
    return sample


def train_and_encode_pq(
    matrix: np.ndarray, params: BuildParams, sample_size: int | None = None
) -> tuple[PQModel, PQCodes]:
    dim = matrix.shape[1]
    m_pq = params.pq_subspaces or default_m_pq(dim)
    model = pq_train(
        pq_train_sample(matrix, sample_size),
        m_pq,
        iters=params.pq_iters,
        seed=params.seed,
        metric=params.metric,
    )
    chunks = [
        pq_encode(model, matrix[i : i + _ENCODE_CHUNK])
        for i in range(0, matrix.shape[0], _ENCODE_CHUNK)
    ]
    codes = PQCodes(codes=np.vstack(chunks) if len(chunks) > 1 else chunks[0])
    return model, codes


def build_index(
    items: list[bytes],
    params: BuildParams,
    provider,
    *,
    counter: ResidentCounter | None = None,
    keep_unpruned: bool = False,
    with_pq: bool = True,
) -> BuildResult:
    """Full monolithic build: two graph passes, budget trim, PQ artifacts.

    The embedding matrix is resident for the whole build and discarded on
    return; only the pruned graph and PQ codes survive.
    """
    n = len(items)
    if params.budget_bytes is not None and n > 0 and params.budget_bytes < 8 * n:
        raise BudgetInfeasibleError(
            f"budget {params.budget_bytes} B below floor 8n = {8 * n} B",
            min_achievable_bytes=8 * n,
        )
    matrix = embed_items(items, provider, counter)
    try:
        level_of = lambda v: assign_level(v, params.seed, params.max_degree)
        pass1 = build_graph(matrix, params, None, level_of)
        degrees = np.array(
            [len(row) if row else 0 for row in pass1.base], dtype=np.int64
        )
        hub_ids = select_hubs(degrees, params.hub_percent, n)
        hub_mask = np.zeros(n, dtype=bool)
        hub_mask[hub_ids] = True
        pass2 = build_graph(matrix, params, hub_mask, level_of)
        trims = 0
        if params.budget_bytes is not None:
            kernel = _DistanceKernel(matrix, params.metric)
            trims = _trim_to_budget(pass2, kernel, params.budget_bytes)
        model, codes = (None, None)
        if with_pq:
            model, codes = train_and_encode_pq(matrix, params)
        return BuildResult(
            graph=pass2.freeze(),
            pq_model=model,
            pq_codes=codes,
            unpruned=pass1.freeze() if keep_unpruned else None,
            degrees=degrees,
            hub_ids=hub_ids,
            trim_iterations=trims,
        )
    finally:
        if counter is not None:
            counter.remove(n)


def build_uniform_graph(
    matrix: np.ndarray, params: BuildParams, degree_cap: int | None = None,
    level_of=None,
) -> PrunedGraph:
    """Single-pass build at one uniform cap (the small-M style of graph)."""
    cap = degree_cap if degree_cap is not None else params.max_degree
    if cap < 2:
        raise InvalidArgumentError("uniform cap must be >= 2")
    uniform = BuildParams(
        ef_construction=max(params.ef_construction, cap),
        max_degree=cap,
        low_degree=max(1, cap // 5),
        hub_percent=params.hub_percent,
        metric=params.metric,
        seed=params.seed,
    )
    if level_of is None:
        level_of = lambda v: assign_level(v, uniform.seed, cap)
    return build_graph(matrix, uniform, None, level_of).freeze()
