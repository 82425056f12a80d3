"""Mutations: add variants and their cost counters, buffers, soft deletes,
the mutation log."""

from __future__ import annotations

import numpy as np
import pytest

from slimvec.builder import BuildParams, build_index
from slimvec.errors import InvalidArgumentError
from slimvec.evaluation import brute_force_topk, recall_at_k
from slimvec.graph import graphs_equal, validate
from slimvec.search import MatrixSource, SearchParams, run_search
from slimvec.update import (
    AddBuffer,
    ListStore,
    MutableIndex,
    MutationLog,
    replay_log,
)
from slimvec.vectors import (
    EmbeddingRequest,
    ProviderConfig,
    embed_all,
    make_provider,
)

DIM = 16


def _provider(seed: int = 0):
    return make_provider(
        ProviderConfig(kind="synthetic", dim=DIM, seed=seed, max_batch=32)
    )


def _mutable_over(n_items: int, seed: int = 0, max_degree: int = 8,
                  efc: int = 24) -> tuple[MutableIndex, list[bytes]]:
    provider = _provider(seed)
    items = [b"upd %d" % i for i in range(n_items)]
    if n_items:
        params = BuildParams(ef_construction=efc, max_degree=max_degree,
                             hub_percent=5.0, seed=seed)
        built = build_index(items, params, provider)
        graph, model, codes = built.graph, built.pq_model, built.pq_codes
    else:
        graph = model = codes = None
    store = ListStore(items)
    index = MutableIndex(graph, model, codes, provider, store,
                         max_degree=max_degree, ef_construction=efc,
                         seed=seed, metric="cosine")
    return index, items


def _matrix_of(index: MutableIndex) -> np.ndarray:
    items = [index.store.get(i) for i in range(index.store.n)]
    return embed_all(
        [EmbeddingRequest(i, c) for i, c in enumerate(items)], index.provider
    )


def test_add_into_empty_index() -> None:
    index, _ = _mutable_over(0)
    nid, counters = index.add_node(b"first", variant="naive")
    assert nid == 0
    assert index.overlay.entry_point == 0
    assert index.overlay.neighbors(0).size == 0
    assert counters.embedding_computations == 1


def test_add_variants_reject_unknown() -> None:
    index, _ = _mutable_over(0)
    with pytest.raises(InvalidArgumentError):
        index.add_node(b"x", variant="bogus")


def test_naive_and_cached_build_identical_graphs() -> None:
    results = {}
    for variant in ("naive", "cached"):
        index, _ = _mutable_over(300, seed=4, max_degree=8, efc=24)
        counters = []
        for j in range(30):
            _, c = index.add_node(b"new %d" % j, variant=variant)
            counters.append(c)
        graph, _ = index.compact()
        results[variant] = (graph, counters)
    g_naive, c_naive = results["naive"]
    g_cached, c_cached = results["cached"]
    assert graphs_equal(g_naive, g_cached)
    total_naive = sum(c.distance_computations for c in c_naive)
    total_cached = sum(c.distance_computations for c in c_cached)
    assert total_cached < total_naive
    embeds_naive = sum(c.embedding_computations for c in c_naive)
    embeds_cached = sum(c.embedding_computations for c in c_cached)
    assert embeds_cached < embeds_naive


class OrthoProvider:
    """Embeds item i as basis vector e_i: all points mutually equidistant.

    The worst-case instance for neighbor maintenance - the selection rule
    never prunes (no triangle is ever violated), so every row pins at its
    degree cap and each reverse edge triggers a full-width shrink. This is
    the regime the add-cost accounting describes.
    """

    def __init__(self, dim: int) -> None:
        self.config = ProviderConfig(kind="synthetic", dim=dim, seed=0,
                                     max_batch=64)
        self.dim = dim

    def embed_batch(self, requests):
        out = np.zeros((len(requests), self.dim), dtype=np.float32)
        for i, req in enumerate(requests):
            out[i, int(req.content)] = 1.0
        return out


def _ortho_mutable(n_items: int, max_degree: int, efc: int,
                   dim: int) -> MutableIndex:
    from slimvec.builder import build_uniform_graph, embed_items

    provider = OrthoProvider(dim)
    items = [b"%d" % i for i in range(n_items)]
    params = BuildParams(ef_construction=max(efc, max_degree),
                         max_degree=max_degree, seed=0, metric="l2")
    graph = build_uniform_graph(embed_items(items, provider), params,
                                degree_cap=max_degree)
    return MutableIndex(graph, None, None, provider, ListStore(items),
                        max_degree=max_degree, ef_construction=efc,
                        seed=0, metric="l2")


def test_counter_scaling_naive_superlinear_simplified_linear() -> None:
    # log-log slope of distance computations over M in {8,16,32} at fixed efC,
    # measured on the worst-case equidistant instance where degree caps bind
    slopes = {}
    for variant in ("naive", "simplified"):
        counts = []
        for max_degree in (8, 16, 32):
            index = _ortho_mutable(300, max_degree=max_degree, efc=32, dim=330)
            total = 0
            for j in range(12):
                _, c = index.add_node(b"%d" % (300 + j), variant=variant)
                total += c.distance_computations
            counts.append(total / 12)
        slope = (np.log(counts[2]) - np.log(counts[0])) / (np.log(32) - np.log(8))
        slopes[variant] = slope
    assert slopes["naive"] >= 2.0
    assert slopes["simplified"] <= 1.3


def test_add_then_search_finds_new_item() -> None:
    index, _ = _mutable_over(200, seed=1)
    nid, _ = index.add_node(b"fresh item", variant="cached")
    matrix = _matrix_of(index)
    graph = index.overlay
    q = matrix[nid]
    rep = run_search(graph, q, SearchParams(k=1, ef=32, mode="exact_bestfirst"),
                     MatrixSource(matrix), "cosine")
    assert rep.results[0][0] == nid


def test_graph_valid_after_mixed_mutations() -> None:
    index, _ = _mutable_over(300, seed=7)
    for j in range(20):
        index.add_node(b"mix %d" % j, variant=("simplified", "cached")[j % 2])
    for v in (3, 50, 301):
        index.delete(v)
    graph, codes = index.compact()
    validate(graph)
    assert graph.n == 320
    assert codes.n == 320
    assert graph.deleted.sum() == 3
    for level in range(graph.level_count):
        assert int(graph.out_degrees(level).max()) <= index.max_degree


# --- buffered adds --------------------------------------------------------------


def test_buffer_scan_makes_new_item_visible_at_rank_one() -> None:
    index, _ = _mutable_over(200, seed=3)
    ids = index.buffered_add([b"buffered thing"])
    assert index.buffer.pending
    q = embed_all([EmbeddingRequest(0, b"buffered thing")], index.provider)[0]
    hits = index.buffer_scan(q)
    assert hits[0][0] == ids[0]
    assert hits[0][1] == pytest.approx(-1.0)


def test_buffer_byte_accounting() -> None:
    index, _ = _mutable_over(50, seed=3)
    index.buffered_add([b"a", b"bb", b"ccc"])
    assert index.buffer.embedding_bytes() == 3 * DIM * 4
    index.buffer.distance_cache[(1, 2)] = 0.5
    assert index.buffer.cache_bytes() == 20
    assert index.buffer.total_bytes() == 3 * DIM * 4 + 20


def test_buffer_budget_overflow_drains() -> None:
    index, _ = _mutable_over(100, seed=5)
    index.buffer.byte_budget = 4 * DIM * 4  # room for 4 embeddings
    index.buffered_add([b"ov %d" % j for j in range(6)])
    assert not index.buffer.pending  # forced synchronous drain
    assert index.overlay.n == 106


def test_drain_matches_eager_adds_bitwise() -> None:
    eager, _ = _mutable_over(150, seed=6)
    for j in range(10):
        eager.add_node(b"batch %d" % j, variant="simplified")
    buffered, _ = _mutable_over(150, seed=6)
    buffered.buffered_add([b"batch %d" % j for j in range(10)])
    buffered.drain()
    g_eager, _ = eager.compact()
    g_buffered, _ = buffered.compact()
    assert graphs_equal(g_eager, g_buffered)


def test_search_over_union_equals_oracle(small_fixture) -> None:
    # graph results merged with a buffer scan must equal brute force over
    # the union of both populations
    fx = small_fixture
    store = ListStore(list(fx.items))
    index = MutableIndex(fx.result.graph, fx.result.pq_model, fx.result.pq_codes,
                         fx.provider, store,
                         max_degree=fx.params.max_degree,
                         ef_construction=fx.params.ef_construction,
                         seed=fx.params.seed, metric="cosine")
    new_items = [b"union %d" % j for j in range(25)]
    index.buffered_add(new_items)
    matrix = _matrix_of(index)
    src = MatrixSource(fx.matrix)
    params = SearchParams(k=3, ef=fx.result.graph.n, rerank_percent=100.0,
                          batch_size=64)
    for q in fx.queries[:15]:
        rep = run_search(fx.result.graph, q, params, src, "cosine",
                         fx.result.pq_model, fx.result.pq_codes)
        merged = [(d, i) for i, d in rep.results]
        merged += [(d, i) for i, d in index.buffer_scan(q)]
        merged.sort()
        got = [i for _, i in merged[:3]]
        want = brute_force_topk(matrix, q, 3, "cosine")
        assert got == want


# --- deletes -------------------------------------------------------------------


def test_delete_promotes_runner_up() -> None:
    index, _ = _mutable_over(400, seed=8)
    matrix = _matrix_of(index)
    q = embed_all([EmbeddingRequest(-1, b"probe")], index.provider)[0]
    before = brute_force_topk(matrix, q, 2, "cosine")
    index.delete(before[0])
    active = np.ones(400, dtype=bool)
    active[before[0]] = False
    rep = run_search(index.overlay, q,
                     SearchParams(k=1, ef=64, mode="exact_bestfirst"),
                     MatrixSource(matrix), "cosine")
    assert rep.results[0][0] == before[1]
    assert rep.results[0][0] == brute_force_topk(matrix, q, 1, "cosine", active)[0]


def test_delete_all_but_k_returns_survivors() -> None:
    index, _ = _mutable_over(30, seed=9)
    matrix = _matrix_of(index)
    survivors = [4, 11, 23]
    for v in range(30):
        if v not in survivors:
            index.delete(v)
    rep = run_search(index.overlay, matrix[0],
                     SearchParams(k=3, ef=30, mode="exact_bestfirst"),
                     MatrixSource(matrix), "cosine")
    assert sorted(i for i, _ in rep.results) == survivors


def test_delete_advisory_fires_at_threshold() -> None:
    index, _ = _mutable_over(1000, seed=10)
    fired_at = None
    for j in range(60):
        if index.delete(j) and fired_at is None:
            fired_at = j + 1
    assert fired_at == 50  # 5% of 1000
    assert index.rebuild_advisories


def test_delete_out_of_range() -> None:
    index, _ = _mutable_over(10, seed=0)
    with pytest.raises(InvalidArgumentError):
        index.delete(10)


# --- mutation log ----------------------------------------------------------------


def test_mutation_log_replay_reproduces_graph(tmp_path) -> None:
    log = MutationLog(tmp_path / "mutations.log")
    live, _ = _mutable_over(120, seed=11)
    for j in range(8):
        nid, _ = live.add_node(b"logged %d" % j, variant="simplified")
        log.append_add(nid, b"logged %d" % j, "simplified")
    live.delete(5)
    log.append_delete(5)
    g_live, _ = live.compact()

    fresh, _ = _mutable_over(120, seed=11)
    applied = replay_log(log, fresh)
    assert applied == 9
    g_replayed, _ = fresh.compact()
    assert graphs_equal(g_live, g_replayed)

    log.clear()
    assert log.entries() == []


def test_add_rolls_back_store_on_provider_failure() -> None:
    index, _ = _mutable_over(50, seed=12)

    class Bomb:
        config = index.provider.config
        calls = 0

        def embed_batch(self, requests):
            Bomb.calls += 1
            if Bomb.calls > 1:
                raise OSError("provider gone")
            return index.provider.embed_batch(requests)

    index.provider = Bomb()
    n_before = index.store.n
    with pytest.raises(OSError):
        index.add_node(b"doomed", variant="naive")
    assert index.store.n == n_before
    assert index.overlay.n == 50
