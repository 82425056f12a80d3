"""Storage-bounded index construction: shard, build, merge.

The pipeline keeps peak exact-embedding residency far below the dataset size:

1. soft assignment: k-means over an embedded sample (discarded immediately),
   then a streaming pass assigns every item to its two nearest centroids and
   discards each embedding after assignment;
2. shard-wise construction: each shard re-embeds only its own members, builds
   its graph, and discards the matrix. Because every item lives in two
   shards, the merged graph keeps good global connectivity;
3. merging: duplicated nodes take the higher of their two levels; edge lists
   are unioned per level and randomly dropped down to the degree cap with a
   pinned seed.

Hub selection spans shards: pass-1 degrees are summed per global id before
picking the top beta percent, then every shard's pass 2 uses that shared hub
set. The resident-embedding counter is threaded through every stage so the
peak-storage claim is measured, not estimated.
"""

from __future__ import annotations

import hashlib
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .builder import (
    BuildParams,
    BuildResult,
    assign_level,
    build_graph,
    select_hubs,
)
from .cluster import kmeans
from .errors import BuildError, InvalidArgumentError
from .graph import PrunedGraph, save_graph
from .pq import PQCodes, default_m_pq, pq_decode, pq_encode, pq_train
from .vectors import EmbeddingRequest, ResidentCounter, embed_all, embed_batch

_KMEANS_ITERS = 25


@dataclass
class ShardPlan:
    k_shards: int
    centroids: np.ndarray      # (k, dim) float32
    assignment: np.ndarray     # (n, 2) int32: primary and secondary shard


@dataclass
class ShardGraph:
    graph: PrunedGraph
    global_ids: np.ndarray     # local node id -> global node id
    dim: int
    metric: str


def default_plan_sample(n: int) -> int:
    """Planning sample default: half the corpus, capped at 20k.

    min(n, 20k) would hold the whole corpus resident at desk scale, defeating
    the pipeline's own peak-storage bound, so the sample is halved below 40k
    items (identical to min(n, 20k) above that).
    """
    return max(1, min(n // 2 if n >= 2 else n, 20_000))


def plan_shards(items: list[bytes], k_shards: int, sample_size: int,
                provider, seed: int,
                counter: ResidentCounter | None = None) -> ShardPlan:
    """Soft k-means assignment of every item to its two nearest centroids."""
    n = len(items)
    if k_shards < 1:
        raise InvalidArgumentError("k_shards must be >= 1")
    if sample_size < k_shards:
        raise InvalidArgumentError("sample_size must be >= k_shards")
    counter = counter if counter is not None else ResidentCounter()
    dim = provider.config.dim
    if k_shards == 1:
        return ShardPlan(
            k_shards=1,
            centroids=np.zeros((1, dim), dtype=np.float32),
            assignment=np.zeros((n, 2), dtype=np.int32),
        )

    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5AD5))
    sample_ids = np.sort(rng.choice(n, size=min(n, sample_size), replace=False))
    sample = embed_all(
        [EmbeddingRequest(int(i), items[int(i)]) for i in sample_ids], provider
    )
    counter.add(sample.shape[0])
    centroids = kmeans(sample, k_shards, _KMEANS_ITERS, seed)
    del sample
    counter.remove(int(sample_ids.shape[0]))

    assignment = np.empty((n, 2), dtype=np.int32)
    batch = provider.config.max_batch
    c_norms = np.einsum("ij,ij->i", centroids, centroids)
    for start in range(0, n, batch):
        chunk = list(range(start, min(n, start + batch)))
        try:
            vecs = embed_batch(
                [EmbeddingRequest(i, items[i]) for i in chunk], provider
            )
        except Exception as exc:
            raise BuildError(f"provider failed while assigning item {start}: {exc}")
        counter.add(len(chunk))
        d = c_norms[None, :] - 2.0 * (vecs @ centroids.T)
        order = np.argsort(d, axis=1, kind="stable")
        assignment[chunk[0] : chunk[-1] + 1] = order[:, :2]
        del vecs
        counter.remove(len(chunk))
    return ShardPlan(k_shards=k_shards, centroids=centroids, assignment=assignment)


def shard_members(plan: ShardPlan, n: int) -> list[np.ndarray]:
    """Sorted global ids per shard (insertion order follows item order)."""
    members: list[list[int]] = [[] for _ in range(plan.k_shards)]
    for gid in range(n):
        primary, secondary = int(plan.assignment[gid, 0]), int(plan.assignment[gid, 1])
        members[primary].append(gid)
        if secondary != primary:
            members[secondary].append(gid)
    return [np.asarray(m, dtype=np.int64) for m in members]


def build_shard(items: list[bytes], global_ids: np.ndarray, params: BuildParams,
                provider, hub_mask_global: np.ndarray | None,
                counter: ResidentCounter | None = None,
                unpruned: bool = False) -> tuple[ShardGraph, np.ndarray]:
    """One shard pass; returns the shard graph and its local base out-degrees.

    Levels are drawn from global ids, so a node duplicated into two shards is
    assigned the same layer in both, and a single shard covering the whole
    dataset reproduces the monolithic build exactly.
    """
    counter = counter if counter is not None else ResidentCounter()
    shard_items = [items[int(g)] for g in global_ids]
    matrix = embed_all(
        [EmbeddingRequest(int(g), c) for g, c in zip(global_ids, shard_items)],
        provider,
    )
    counter.add(len(shard_items))
    try:
        level_of = lambda local: assign_level(
            int(global_ids[local]), params.seed, params.max_degree
        )
        if unpruned or hub_mask_global is None:
            hub_mask = None
        else:
            hub_mask = hub_mask_global[global_ids]
        accum = build_graph(matrix, params, hub_mask, level_of)
        degrees = np.array(
            [len(row) if row else 0 for row in accum.base], dtype=np.int64
        )
        shard = ShardGraph(
            graph=accum.freeze(),
            global_ids=np.asarray(global_ids, dtype=np.int64),
            dim=matrix.shape[1],
            metric=params.metric,
        )
        return shard, degrees
    finally:
        counter.remove(len(shard_items))


def _merge_rng(seed: int, node: int, level: int) -> np.random.Generator:
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(
        f"merge:{node}:{level}".encode(), digest_size=8, key=key
    ).digest()
    return np.random.Generator(np.random.PCG64(struct.unpack("<Q", digest)[0]))


def merge_shards(shards: list[ShardGraph], max_degree: int, seed: int,
                 n_global: int | None = None,
                 keep_nearest_by_pq: tuple | None = None) -> PrunedGraph:
    """Union the shard graphs into one; cap degrees by seeded random drops.

    Duplicated nodes take the max of their levels (a formality here, since
    levels are keyed by global id). keep_nearest_by_pq, when set to
    (pq_model, codes_matrix), protects each node's nearest merged neighbor by
    reconstructed distance from the random drop; it defaults to off to stay
    with plain uniform drops.
    """
    if not shards:
        raise BuildError("merge requires at least one shard")
    dims = {s.dim for s in shards}
    metrics = {s.metric for s in shards}
    if len(dims) > 1 or len(metrics) > 1:
        raise BuildError(
            f"inconsistent shards: dims={sorted(dims)} metrics={sorted(metrics)}"
        )
    if n_global is None:
        n_global = max(int(s.global_ids.max()) for s in shards) + 1

    seen = np.zeros(n_global, dtype=np.int8)
    levels = np.zeros(n_global, dtype=np.int32)
    max_level = max(s.graph.level_count for s in shards) - 1
    adj: list[dict[int, list[int]]] = [{} for _ in range(max_level + 1)]

    for shard in shards:
        g = shard.graph
        gids = shard.global_ids
        for local in range(g.n):
            gid = int(gids[local])
            seen[gid] += 1
            levels[gid] = max(levels[gid], int(g.levels[local]))
            for lvl in range(min(int(g.levels[local]), g.level_count - 1) + 1):
                row = g.neighbors(local, lvl)
                if row.size == 0:
                    continue
                mapped = [int(gids[w]) for w in row.tolist()]
                existing = adj[lvl].get(gid)
                if existing is None:
                    adj[lvl][gid] = mapped
                else:
                    known = set(existing)
                    for w in mapped:
                        if w not in known:
                            existing.append(w)
                            known.add(w)

    uncovered = np.flatnonzero(seen == 0)
    if uncovered.size:
        raise BuildError(f"merge coverage hole: node {int(uncovered[0])} in no shard")
    if np.any(seen > 2):
        raise BuildError("an item appears in more than two shards")

    for lvl, table in enumerate(adj):
        for gid, row in table.items():
            if len(row) <= max_degree:
                continue
            protect = -1
            if keep_nearest_by_pq is not None:
                model, codes = keep_nearest_by_pq
                own = pq_decode(model, codes[gid])
                others = pq_decode(model, codes[np.asarray(row)])
                d = np.einsum("ij,ij->i", others - own, others - own)
                protect = int(np.argmin(d))
            rng = _merge_rng(seed, gid, lvl)
            pool = [j for j in range(len(row)) if j != protect]
            keep_n = max_degree - (1 if protect >= 0 else 0)
            kept = set(rng.choice(len(pool), size=keep_n, replace=False).tolist())
            chosen = {pool[j] for j in kept}
            if protect >= 0:
                chosen.add(protect)
            table[gid] = [w for j, w in enumerate(row) if j in chosen]

    level_offsets: list[np.ndarray] = []
    level_neighbors: list[np.ndarray] = []
    for lvl in range(max_level + 1):
        offsets = np.zeros(n_global + 1, dtype=np.uint64)
        total = 0
        chunks = []
        table = adj[lvl]
        for gid in range(n_global):
            row = table.get(gid)
            if row:
                chunks.append(row)
                total += len(row)
            offsets[gid + 1] = total
        flat = (
            np.fromiter((w for r in chunks for w in r), dtype=np.uint32, count=total)
            if total
            else np.empty(0, dtype=np.uint32)
        )
        level_offsets.append(offsets)
        level_neighbors.append(flat)

    top = int(levels.max())
    entry = int(np.flatnonzero(levels == top)[0])
    return PrunedGraph(
        n=n_global,
        max_degree=max_degree,
        entry_point=entry,
        levels=levels.astype(np.uint16),
        level_offsets=level_offsets,
        level_neighbors=level_neighbors,
    )


def build_sharded(items: list[bytes], params: BuildParams, provider,
                  k_shards: int, *, counter: ResidentCounter | None = None,
                  plan_sample_size: int | None = None,
                  pq_sample_size: int | None = None,
                  shard_dir: str | Path | None = None,
                  keep_shards: bool = False) -> tuple[BuildResult, ShardPlan]:
    """Full sharded pipeline; functionally parallel to builder.build_index.

    PQ training streams a capped sample (half the corpus at desk scale) and
    the encode pass streams batches, so the counter peak is governed by the
    largest shard, not the corpus.
    """
    n = len(items)
    if n == 0:
        raise BuildError("cannot build an index over zero items")
    counter = counter if counter is not None else ResidentCounter()
    plan = plan_shards(
        items,
        k_shards,
        plan_sample_size if plan_sample_size is not None else default_plan_sample(n),
        provider,
        params.seed,
        counter,
    )
    members = shard_members(plan, n)
    for s, m in enumerate(members):
        if k_shards > 1 and m.size == 0:
            raise BuildError(f"shard {s} received no items; lower k_shards")

    degrees = np.zeros(n, dtype=np.int64)
    for m in members:
        if m.size == 0:
            continue
        _, shard_deg = build_shard(items, m, params, provider, None,
                                   counter, unpruned=True)
        degrees[m] += shard_deg

    hub_ids = select_hubs(degrees, params.hub_percent, n)
    hub_mask = np.zeros(n, dtype=bool)
    hub_mask[hub_ids] = True

    shards: list[ShardGraph] = []
    tmp = Path(shard_dir) if shard_dir is not None else None
    if tmp is not None:
        tmp.mkdir(parents=True, exist_ok=True)
    for s, m in enumerate(members):
        if m.size == 0:
            continue
        shard, _ = build_shard(items, m, params, provider, hub_mask, counter)
        if tmp is not None:
            save_graph(shard.graph, tmp / f"shard_{s:03d}.graph.bin")
            (tmp / f"shard_{s:03d}.ids.bin").write_bytes(
                shard.global_ids.astype("<u8").tobytes()
            )
        shards.append(shard)

    merged = merge_shards(shards, params.max_degree, params.seed, n_global=n)
    if tmp is not None and not keep_shards:
        shutil.rmtree(tmp, ignore_errors=True)

    model, codes = _streamed_pq(items, params, provider, counter, pq_sample_size)
    result = BuildResult(
        graph=merged,
        pq_model=model,
        pq_codes=codes,
        unpruned=None,
        degrees=degrees,
        hub_ids=hub_ids,
    )
    return result, plan


def _streamed_pq(items: list[bytes], params: BuildParams, provider,
                 counter: ResidentCounter, pq_sample_size: int | None):
    """PQ training on a capped resident sample, then a streaming encode pass."""
    n = len(items)
    cap = pq_sample_size if pq_sample_size is not None else max(256, min(n // 2, 100_000))
    cap = min(n, cap)
    sample_items = items[:cap]
    sample = embed_all(
        [EmbeddingRequest(i, c) for i, c in enumerate(sample_items)], provider
    )
    counter.add(cap)
    if sample.shape[0] < 256:
        reps = -(-256 // sample.shape[0])
        sample = np.tile(sample, (reps, 1))[:256]
    m_pq = params.pq_subspaces or default_m_pq(sample.shape[1])
    model = pq_train(sample, m_pq, iters=params.pq_iters, seed=params.seed,
                     metric=params.metric)
    del sample
    counter.remove(cap)

    batch = provider.config.max_batch
    rows = []
    for start in range(0, n, batch):
        chunk = list(range(start, min(n, start + batch)))
        vecs = embed_batch([EmbeddingRequest(i, items[i]) for i in chunk], provider)
        counter.add(len(chunk))
        rows.append(pq_encode(model, vecs))
        del vecs
        counter.remove(len(chunk))
    codes = PQCodes(codes=np.vstack(rows) if len(rows) > 1 else rows[0])
    return model, codes
