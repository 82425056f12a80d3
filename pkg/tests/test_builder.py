"""Construction: the neighborhood-selection rule, hubs, budgets, determinism."""

from __future__ import annotations

import math

import numpy as np
import pytest

from slimvec.builder import (
    BuildParams,
    assign_level,
    build_graph,
    build_index,
    embed_items,
    profile_m,
    rng_shrink,
    select_hubs,
)
from slimvec.errors import BudgetInfeasibleError, BuildError, InvalidArgumentError
from slimvec.graph import degree_stats, graphs_equal, save_graph, validate
from slimvec.vectors import ProviderConfig, distance, make_provider


def _euclid_oracle(points: dict[int, tuple]) -> object:
    return lambda a, b: distance(points[a], points[b], "l2")


def test_rng_shrink_prunes_triangle_long_edge() -> None:
    # target at origin; b sits behind a, so dist(a,b) < dist(target,b) drops b
    points = {0: (1.0, 0.0), 1: (1.8, 0.0)}
    cands = [(0, distance((0, 0), points[0], "l2")),
             (1, distance((0, 0), points[1], "l2"))]
    kept = rng_shrink(cands, cap=4, dist=_euclid_oracle(points))
    assert kept == [0]


def test_rng_shrink_single_candidate_always_kept() -> None:
    kept = rng_shrink([(9, 1.23)], cap=1, dist=lambda a, b: 0.0)
    assert kept == [9]


def test_rng_shrink_cap_stops_after_cap_kept() -> None:
    # three mutually distant points: no pruning triggers, cap cuts at two
    points = {0: (1.0, 0.0), 1: (-1.0, 0.0), 2: (0.0, 1.1)}
    target = (0.0, 0.0)
    cands = sorted(
        ((i, distance(target, p, "l2")) for i, p in points.items()),
        key=lambda pair: pair[1],
    )
    oracle = _euclid_oracle(points)
    # brute-force check that the rule would keep all three without the cap
    assert rng_shrink(cands, cap=3, dist=oracle) == [i for i, _ in cands]
    assert rng_shrink(cands, cap=2, dist=oracle) == [i for i, _ in cands][:2]


def test_rng_shrink_requires_positive_cap() -> None:
    with pytest.raises(InvalidArgumentError):
        rng_shrink([], cap=0, dist=lambda a, b: 0.0)


def test_select_hubs_definition_and_ties() -> None:
    degrees = np.array([5, 9, 9, 1, 7])
    hubs = select_hubs(degrees, 40.0, 5)  # ceil(0.4*5)=2
    assert hubs.tolist() == [1, 2]  # ties at degree 9 break to the lower id
    all_hubs = select_hubs(degrees, 100.0, 5)
    assert all_hubs.tolist() == [0, 1, 2, 3, 4]


def test_select_hubs_exact_count_with_distinct_degrees() -> None:
    degrees = np.arange(1000)
    hubs = select_hubs(degrees, 2.0, 1000)
    assert hubs.shape[0] == 20
    assert hubs.tolist() == list(range(980, 1000))


def test_assign_level_deterministic_and_geometric() -> None:
    levels = [assign_level(i, 42, 16) for i in range(20_000)]
    assert levels == [assign_level(i, 42, 16) for i in range(20_000)]
    share_upper = sum(1 for lv in levels if lv >= 1) / len(levels)
    # geometric with ratio 1/ln(16): P(level >= 1) = 1/16
    assert share_upper == pytest.approx(1 / 16, rel=0.2)
    assert max(levels) < 10


def test_build_params_default_low_degree_is_fifth_of_max() -> None:
    assert BuildParams(max_degree=16).low_degree == 3
    assert BuildParams(max_degree=30).low_degree == 6
    assert BuildParams(max_degree=2).low_degree == 1
    with pytest.raises(InvalidArgumentError):
        BuildParams(max_degree=16, low_degree=16)
    with pytest.raises(InvalidArgumentError):
        BuildParams(max_degree=16, ef_construction=8)
    with pytest.raises(InvalidArgumentError):
        BuildParams(max_degree=16, hub_percent=0.0)


def _tiny_provider(dim: int = 8, seed: int = 0):
    return make_provider(ProviderConfig(kind="synthetic", dim=dim, seed=seed,
                                        max_batch=32))


def test_first_node_becomes_entry_point_no_edges() -> None:
    provider = _tiny_provider()
    result = build_index([b"only"], BuildParams(max_degree=4, ef_construction=8),
                         provider)
    g = result.graph
    assert g.n == 1
    assert g.entry_point == 0
    assert g.neighbors(0).size == 0
    validate(g)


def test_second_node_gets_one_bidirectional_edge() -> None:
    provider = _tiny_provider()
    result = build_index([b"a", b"b"],
                         BuildParams(max_degree=4, ef_construction=8), provider)
    g = result.graph
    assert g.neighbors(0).tolist() == [1]
    assert g.neighbors(1).tolist() == [0]


def test_two_thousand_node_build_obeys_degree_cap() -> None:
    provider = _tiny_provider(dim=16, seed=3)
    items = [b"node %d" % i for i in range(2000)]
    params = BuildParams(ef_construction=32, max_degree=16, low_degree=3,
                         hub_percent=2.0, seed=3)
    result = build_index(items, params, provider)
    g = result.graph
    validate(g)
    for level in range(g.level_count):
        assert int(g.out_degrees(level).max()) <= 16


def test_pruned_degree_below_unpruned(small_fixture) -> None:
    pruned = degree_stats(small_fixture.result.graph)
    unpruned = degree_stats(small_fixture.result.unpruned)
    assert pruned.avg_degree < unpruned.avg_degree


def test_pruning_roughly_halves_storage(standard_fixture) -> None:
    pruned = degree_stats(standard_fixture.result.graph)
    unpruned = degree_stats(standard_fixture.result.unpruned)
    assert pruned.metadata_bytes <= 0.6 * unpruned.metadata_bytes


def test_build_bitwise_deterministic(tmp_path) -> None:
    provider = _tiny_provider(dim=16, seed=9)
    items = [b"det %d" % i for i in range(400)]
    params = BuildParams(ef_construction=32, max_degree=8, low_degree=2,
                         hub_percent=5.0, seed=9)
    paths = []
    for run in range(2):
        result = build_index(items, params, provider)
        path = tmp_path / f"graph_{run}.bin"
        save_graph(result.graph, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_zero_vector_rejected_under_cosine() -> None:
    class ZeroProvider:
        config = ProviderConfig(kind="synthetic", dim=4, seed=0, max_batch=8)

        def embed_batch(self, requests):
            return np.zeros((len(requests), 4), dtype=np.float32)

    with pytest.raises(BuildError):
        build_index([b"a", b"b"],
                    BuildParams(max_degree=4, ef_construction=8, metric="cosine"),
                    ZeroProvider())


def test_zero_vector_allowed_under_l2() -> None:
    class ZeroProvider:
        config = ProviderConfig(kind="synthetic", dim=4, seed=0, max_batch=8)

        def embed_batch(self, requests):
            out = np.zeros((len(requests), 4), dtype=np.float32)
            for i, req in enumerate(requests):
                out[i, 0] = float(req.item_id)
            return out

    result = build_index([b"a", b"b", b"c"],
                         BuildParams(max_degree=4, ef_construction=8, metric="l2"),
                         ZeroProvider())
    validate(result.graph)


def test_duplicate_vectors_allowed() -> None:
    provider = _tiny_provider()
    items = [b"same"] * 20 + [b"other %d" % i for i in range(20)]
    result = build_index(items, BuildParams(max_degree=4, ef_construction=8),
                         provider)
    validate(result.graph)


# --- budget profiling ----------------------------------------------------------


def test_profile_m_collapses_at_full_hub_share() -> None:
    n, budget = 1000, 200_000
    max_degree, low = profile_m(n, budget, 100.0)
    assert max_degree == budget // (4 * n)
    assert low == max(1, max_degree // 5)


def test_profile_m_rejects_budget_below_floor() -> None:
    with pytest.raises(BudgetInfeasibleError) as err:
        profile_m(1000, 8 * 1000 - 1, 2.0)
    assert err.value.min_achievable_bytes == 8000


def test_profile_m_monotone_in_budget() -> None:
    previous = 0
    for budget in (10_000, 40_000, 160_000, 640_000):
        m_cap, low = profile_m(1000, budget, 2.0)
        assert m_cap >= previous
        assert 0 < low < m_cap or m_cap == 1
        previous = m_cap


def test_build_respects_budget_exactly() -> None:
    provider = _tiny_provider(dim=16, seed=5)
    items = [b"bud %d" % i for i in range(500)]
    params = BuildParams(ef_construction=32, max_degree=12, low_degree=3,
                         hub_percent=4.0, seed=5)
    free = build_index(items, params, provider)
    free_bytes = degree_stats(free.graph).metadata_bytes

    # feeding a build its own size back must pass without trimming
    exact = BuildParams(ef_construction=32, max_degree=12, low_degree=3,
                        hub_percent=4.0, seed=5, budget_bytes=free_bytes)
    unchanged = build_index(items, exact, provider)
    assert unchanged.trim_iterations == 0
    assert graphs_equal(unchanged.graph, free.graph)

    # a tighter budget forces trimming and must be honored exactly
    tight = BuildParams(ef_construction=32, max_degree=12, low_degree=3,
                        hub_percent=4.0, seed=5,
                        budget_bytes=int(free_bytes * 0.8))
    trimmed = build_index(items, tight, provider)
    assert trimmed.trim_iterations >= 1
    assert degree_stats(trimmed.graph).metadata_bytes <= tight.budget_bytes
    validate(trimmed.graph)


def test_build_budget_below_floor_fails_before_heavy_work() -> None:
    provider = _tiny_provider()
    items = [b"x %d" % i for i in range(100)]
    params = BuildParams(max_degree=4, ef_construction=8, budget_bytes=100)
    with pytest.raises(BudgetInfeasibleError):
        build_index(items, params, provider)


def test_full_exploration_reaches_nearly_all_nodes(small_fixture) -> None:
    # best-first from the entry point with ef=n must reach >= 99% of nodes
    from slimvec.search import MatrixSource, SearchParams, run_search

    g = small_fixture.result.graph
    params = SearchParams(k=3, ef=g.n, mode="exact_bestfirst")
    rep = run_search(g, small_fixture.queries[0], params,
                     MatrixSource(small_fixture.matrix), "cosine")
    assert rep.recomputations >= math.floor(0.99 * g.n)
