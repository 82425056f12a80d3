"""Ground-truth oracles, recall measurement, baselines, and the experiment
harness.

The recompute counter, not wall time, is the primary latency proxy throughout
(exact-embedding recomputation dominates query cost in this design); wall
time is reported informationally. All harness outputs are reproducible bit
for bit given the config seed, and queries run sequentially so the counters
are stable.

The standard desk-scale fixture used by the acceptance suite is pinned here:
10k synthetic items, dim 32, 100 queries, k=3, fixed seeds.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .builder import BuildParams
from .errors import InvalidArgumentError
from .graph import PrunedGraph, degree_stats
from .search import MatrixSource, SearchParams, run_search
from .vectors import distance_many

STANDARD_FIXTURE = {
    "n": 10_000,
    "dim": 32,
    "n_queries": 100,
    "k": 3,
    "seed": 42,
    "metric": "cosine",
    "ef_construction": 64,
    "max_degree": 16,
    "low_degree": 5,
    "hub_percent": 8.0,
    "pq_subspaces": 8,
    "rerank_percent": 30.0,
    "batch_size": 64,
}


def fixture_items(n: int) -> list[bytes]:
    return [b"synthetic item %08d" % i for i in range(n)]


def fixture_queries(n_queries: int) -> list[bytes]:
    return [b"synthetic query %08d" % i for i in range(n_queries)]


def fixture_build_params(overrides: dict | None = None) -> BuildParams:
    cfg = dict(STANDARD_FIXTURE)
    if overrides:
        cfg.update(overrides)
    return BuildParams(
        ef_construction=cfg["ef_construction"],
        max_degree=cfg["max_degree"],
        low_degree=cfg["low_degree"],
        hub_percent=cfg["hub_percent"],
        metric=cfg["metric"],
        seed=cfg["seed"],
        pq_subspaces=cfg["pq_subspaces"],
    )


# --- Exact oracles ------------------------------------------------------------


@dataclass
class GroundTruth:
    """Per-query exact top-k id lists (ties broken by id)."""

    ids: list[list[int]]
    metric: str
    k: int


def brute_force_topk(matrix: np.ndarray, q: np.ndarray, k: int,
                     metric: str = "cosine",
                     active: np.ndarray | None = None) -> list[int]:
    """Exhaustive scan over active rows; (distance, id) tie order."""
    ds = distance_many(matrix, q, metric).astype(np.float64)
    if active is not None:
        ds = np.where(active, ds, np.inf)
    order = np.lexsort((np.arange(matrix.shape[0]), ds))
    out = []
    for i in order[:k]:
        if active is not None and not active[i]:
            break
        out.append(int(i))
    return out


def ground_truth(matrix: np.ndarray, queries: np.ndarray, k: int,
                 metric: str = "cosine",
                 active: np.ndarray | None = None) -> GroundTruth:
    return GroundTruth(
        ids=[brute_force_topk(matrix, q, k, metric, active) for q in queries],
        metric=metric,
        k=k,
    )


def recall_at_k(returned: list[int], truth: list[int]) -> float:
    """|returned ∩ truth| / k."""
    if not truth:
        raise InvalidArgumentError("recall undefined for k == 0")
    return len(set(returned) & set(truth)) / len(truth)


def mean_recall(results: list[list[int]], truth: GroundTruth) -> float:
    return float(
        np.mean([recall_at_k(r, t) for r, t in zip(results, truth.ids)])
    )


# --- ef tuning ------------------------------------------------------------------


@dataclass
class TuneResult:
    ef: int
    recall: float
    feasible: bool
    warning: str | None = None


def tune_ef(evaluate, k: int, n: int, target_recall: float) -> TuneResult:
    """Binary search for the minimal ef whose mean recall meets the target.

    evaluate(ef) -> mean recall over the query set. Results are memoized, the
    found endpoint is re-verified, and a non-monotone flip at the lower
    endpoint widens the answer by one step with a warning instead of failing.
    """
    memo: dict[int, float] = {}

    def rec(ef: int) -> float:
        if ef not in memo:
            memo[ef] = evaluate(ef)
        return memo[ef]

    if rec(n) < target_recall:
        return TuneResult(ef=n, recall=rec(n), feasible=False)
    lo, hi = k, n
    while lo < hi:
        mid = (lo + hi) // 2
        if rec(mid) >= target_recall:
            hi = mid
        else:
            lo = mid + 1
    warning = None
    if lo > k and rec(lo - 1) >= target_recall:
        warning = (
            f"non-monotone recall near ef={lo}: ef-1 also meets the target;"
            " widened by one step"
        )
    return TuneResult(ef=lo, recall=rec(lo), feasible=True, warning=warning)


# --- Pruning baselines -----------------------------------------------------------


def baseline_random_prune(g: PrunedGraph, fraction: float,
                          seed: int = 0) -> PrunedGraph:
    """Uniformly remove an exact fraction of stored edges (pinned seed).

    The drop set is sampled without replacement over the whole edge
    population (all levels), so exactly round(fraction * E) edges disappear.
    """
    if not 0 < fraction < 1:
        raise InvalidArgumentError("fraction must be in (0, 1)")
    level_sizes = [nb.shape[0] for nb in g.level_neighbors]
    total = sum(level_sizes)
    remove = int(round(fraction * total))
    key = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
    digest = hashlib.blake2b(b"random-prune", digest_size=8, key=key).digest()
    rng = np.random.Generator(np.random.PCG64(struct.unpack("<Q", digest)[0]))
    drop = np.zeros(total, dtype=bool)
    drop[rng.choice(total, size=remove, replace=False)] = True

    new_offsets_all: list[np.ndarray] = []
    new_neighbors_all: list[np.ndarray] = []
    base = 0
    for offsets, nbrs, size in zip(g.level_offsets, g.level_neighbors, level_sizes):
        keep = ~drop[base : base + size]
        base += size
        new_offsets = np.zeros(g.n + 1, dtype=np.uint64)
        kept_chunks = []
        running = 0
        for v in range(g.n):
            row_mask = keep[int(offsets[v]) : int(offsets[v + 1])]
            row = nbrs[int(offsets[v]) : int(offsets[v + 1])][row_mask]
            if row.size:
                kept_chunks.append(row)
                running += row.size
            new_offsets[v + 1] = running
        new_offsets_all.append(new_offsets)
        new_neighbors_all.append(
            np.concatenate(kept_chunks) if kept_chunks
            else np.empty(0, dtype=np.uint32)
        )
    return PrunedGraph(
        n=g.n,
        max_degree=g.max_degree,
        entry_point=g.entry_point,
        levels=g.levels.copy(),
        level_offsets=new_offsets_all,
        level_neighbors=new_neighbors_all,
        deleted=g.deleted.copy(),
    )


def baseline_small_m(items: list[bytes], params: BuildParams, provider,
                     *, matrix: np.ndarray | None = None) -> PrunedGraph:
    """Full rebuild at the uniform halved degree cap."""
    from .builder import build_uniform_graph, embed_items

    if matrix is None:
        matrix = embed_items(items, provider)
    return build_uniform_graph(matrix, params, degree_cap=max(2, params.max_degree // 2))


# --- Experiment harness -----------------------------------------------------------


@dataclass
class CurveRow:
    mode: str
    alpha: float
    ef: int
    recall: float
    recomputations: float
    approx_lookups: float


@dataclass
class AblationOutputs:
    curve_rows: list[CurveRow] = field(default_factory=list)
    files: list[str] = field(default_factory=list)


def run_queries(graph, queries: np.ndarray, params: SearchParams,
                matrix: np.ndarray, metric: str, pq_model=None, pq_codes=None,
                cache=None) -> tuple[list[list[int]], float, float, float]:
    """Sequential oracle-mode query run; returns ids + mean counters.

    Returns (results, mean recomputations, mean approx lookups, mean wall s).
    """
    source = MatrixSource(matrix)
    ids: list[list[int]] = []
    recomputes = 0
    lookups = 0
    wall = 0.0
    for q in queries:
        rep = run_search(graph, q, params, source, metric, pq_model, pq_codes, cache)
        ids.append([i for i, _ in rep.results])
        recomputes += rep.recomputations
        lookups += rep.approx_lookups
        wall += rep.wall_time
    nq = len(queries)
    return ids, recomputes / nq, lookups / nq, wall / nq


def sweep_curve(graph, queries, truth: GroundTruth, matrix, metric,
                mode: str, alphas: list[float], efs: list[int],
                pq_model=None, pq_codes=None, batch_size: int = 64,
                k: int = 3) -> list[CurveRow]:
    rows = []
    for alpha in alphas:
        for ef in efs:
            params = SearchParams(k=k, ef=max(ef, k), rerank_percent=alpha,
                                  batch_size=batch_size, mode=mode)
            ids, recs, looks, _ = run_queries(
                graph, queries, params, matrix, metric, pq_model, pq_codes
            )
            rows.append(CurveRow(
                mode=mode, alpha=alpha, ef=ef,
                recall=mean_recall(ids, truth),
                recomputations=recs, approx_lookups=looks,
            ))
    return rows


def write_curve_tsv(rows: list[CurveRow], path) -> None:
    lines = ["mode\talpha\tef\trecall\trecomputations\tapprox_lookups"]
    for r in rows:
        lines.append(
            f"{r.mode}\t{r.alpha:g}\t{r.ef}\t{r.recall:.6f}"
            f"\t{r.recomputations:.2f}\t{r.approx_lookups:.2f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_degree_histogram_tsv(graphs: dict[str, PrunedGraph], path) -> None:
    lines = ["variant\tdegree\tcount"]
    for name in sorted(graphs):
        stats = degree_stats(graphs[name])
        for deg in sorted(stats.degree_histogram):
            lines.append(f"{name}\t{deg}\t{stats.degree_histogram[deg]}")
    Path(path).write_text("\n".join(lines) + "\n")


def stage_breakdown(graph, queries, params: SearchParams, matrix, metric,
                    pq_model=None, pq_codes=None) -> dict[str, float]:
    """Mean per-stage seconds per query plus wall time and coverage ratio.

    One warmup query runs unmeasured first; this is an instrumentation-
    coverage check, so cold-start dispatch overhead is excluded.
    """
    source = MatrixSource(matrix)
    run_search(graph, queries[0], params, source, metric, pq_model, pq_codes)
    acc = {"pq_lookup": 0.0, "payload_fetch": 0.0, "embed": 0.0, "distance": 0.0}
    wall = 0.0
    coverages = []
    for q in queries:
        t0 = time.perf_counter()
        rep = run_search(graph, q, params, source, metric, pq_model, pq_codes)
        elapsed = time.perf_counter() - t0
        wall += elapsed
        for key in acc:
            acc[key] += rep.stage_times[key]
        if elapsed > 0:
            coverages.append(sum(rep.stage_times.values()) / elapsed)
    nq = len(queries)
    out = {key: val / nq for key, val in acc.items()}
    out["wall"] = wall / nq
    # median per-query coverage: robust to scheduler preemption in the gaps
    out["coverage"] = float(np.median(coverages)) if coverages else 1.0
    return out


def write_stage_tsv(breakdown: dict[str, float], path) -> None:
    lines = ["stage\tseconds_per_query"]
    for key in ("pq_lookup", "payload_fetch", "embed", "distance", "wall", "coverage"):
        lines.append(f"{key}\t{breakdown[key]:.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_ablation(graphs: dict[str, PrunedGraph], queries: np.ndarray,
                 truth: GroundTruth, matrix: np.ndarray, metric: str,
                 pq_model, pq_codes, out_dir,
                 alphas: list[float] | None = None,
                 efs: list[int] | None = None,
                 batch_size: int = 64) -> AblationOutputs:
    """Sweep modes, alphas, and efs across graph variants; emit TSV tables.

    graphs maps variant name -> graph; the variant named "ours" also gets the
    exact best-first sweep and the stage breakdown.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    alphas = alphas if alphas is not None else [30.0, 100.0]
    efs = efs if efs is not None else [16, 32, 64, 128, 256]
    outputs = AblationOutputs()
    k = truth.k
    for name, graph in sorted(graphs.items()):
        rows = sweep_curve(graph, queries, truth, matrix, metric, "two_level",
                           alphas, efs, pq_model, pq_codes, batch_size, k)
        if name == "ours":
            rows += sweep_curve(graph, queries, truth, matrix, metric,
                                "exact_bestfirst", [100.0], efs,
                                pq_model, pq_codes, batch_size, k)
        path = out_dir / f"curve_{name}.tsv"
        write_curve_tsv(rows, path)
        outputs.curve_rows += rows
        outputs.files.append(str(path))
    hist_path = out_dir / "degree_histograms.tsv"
    write_degree_histogram_tsv(graphs, hist_path)
    outputs.files.append(str(hist_path))
    if "ours" in graphs:
        params = SearchParams(k=k, ef=max(64, k), rerank_percent=alphas[0],
                              batch_size=batch_size, mode="two_level")
        breakdown = stage_breakdown(graphs["ours"], queries, params, matrix,
                                    metric, pq_model, pq_codes)
        stage_path = out_dir / "stage_breakdown.tsv"
        write_stage_tsv(breakdown, stage_path)
        outputs.files.append(str(stage_path))
    return outputs


def evaluate_engine(engine, query_payloads: list, k: int, efs: list[int],
                    alphas: list[float], modes: list[str], batch: int = 64,
                    out_dir=None) -> tuple[list[CurveRow], list[str]]:
    """Sweep a loaded engine against the exact oracle over its own items.

    Ground truth comes from a full provider scan of the active items (the
    standard exact-search-as-proxy protocol). Queries run through the engine
    itself, provider recomputation included.
    """
    from .search import SearchParams
    from .vectors import EmbeddingRequest, embed_all

    items = engine.store.items()
    matrix = embed_all(
        [EmbeddingRequest(i, c) for i, c in enumerate(items)], engine.provider
    )
    queries = np.stack([
        qp if isinstance(qp, np.ndarray) else engine.embed_query(qp)
        for qp in query_payloads
    ])
    overlay = engine.mutable.overlay
    active = np.array([not overlay.is_deleted(i) for i in range(overlay.n)])
    truth = ground_truth(matrix, queries, k, engine.metric, active)
    rows: list[CurveRow] = []
    for mode in modes:
        mode_alphas = alphas if mode == "two_level" else [100.0]
        for alpha in mode_alphas:
            for ef in efs:
                params = SearchParams(k=k, ef=max(ef, k), rerank_percent=alpha,
                                      batch_size=batch, mode=mode)
                ids = []
                recomputes = 0
                lookups = 0
                for q in queries:
                    rep = engine.search(q, params)
                    ids.append([i for i, _ in rep.results])
                    recomputes += rep.recomputations
                    lookups += rep.approx_lookups
                rows.append(CurveRow(
                    mode=mode, alpha=alpha, ef=ef,
                    recall=mean_recall(ids, truth),
                    recomputations=recomputes / len(queries),
                    approx_lookups=lookups / len(queries),
                ))
    files: list[str] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        curve_path = out_dir / "curve_index.tsv"
        write_curve_tsv(rows, curve_path)
        files.append(str(curve_path))
        hist_path = out_dir / "degree_histograms.tsv"
        write_degree_histogram_tsv({"index": overlay.freeze(overlay.max_degree
                                                            or 1)}, hist_path)
        files.append(str(hist_path))
    return rows, files


def parse_query_line(line: str, dim: int) -> bytes | np.ndarray:
    """Query-file row: bracketed float vector, or raw text for the provider."""
    stripped = line.strip()
    if stripped.startswith("[") and stripped.endswith("]"):
        values = [float(tok) for tok in stripped[1:-1].split(",") if tok.strip()]
        if len(values) != dim:
            raise InvalidArgumentError(
                f"query vector has dim {len(values)}, index expects {dim}"
            )
        return np.asarray(values, dtype=np.float32)
    return stripped.encode("utf-8")
