"""Shared fixtures: a cheap 600-item index for module tests and the full
standard fixture (10k items, dim 32, 100 queries, k=3) for acceptance runs.

Both are session-scoped; the standard fixture is the expensive one (two build
passes over 10k items) and is shared by every acceptance criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pytest

from slimvec.builder import BuildParams, BuildResult, build_index, embed_items
from slimvec.evaluation import (
    STANDARD_FIXTURE,
    GroundTruth,
    fixture_build_params,
    fixture_items,
    fixture_queries,
    ground_truth,
)
from slimvec.vectors import EmbeddingRequest, ProviderConfig, embed_all, make_provider


@dataclass
class BuiltFixture:
    items: list[bytes]
    matrix: np.ndarray
    queries: np.ndarray
    truth: GroundTruth
    result: BuildResult
    params: BuildParams
    provider: object
    config: ProviderConfig
    extras: dict = field(default_factory=dict)


def _build_fixture(n: int, n_queries: int, overrides: dict | None = None,
                   keep_unpruned: bool = True) -> BuiltFixture:
    cfg_dict = dict(STANDARD_FIXTURE)
    cfg_dict.update(overrides or {})
    config = ProviderConfig(
        kind="synthetic", dim=cfg_dict["dim"], seed=cfg_dict["seed"], max_batch=64
    )
    provider = make_provider(config)
    items = fixture_items(n)
    matrix = embed_items(items, provider)
    params = fixture_build_params(overrides)
    result = build_index(items, params, provider, keep_unpruned=keep_unpruned)
    queries = embed_all(
        [EmbeddingRequest(-1, q) for q in fixture_queries(n_queries)], provider
    )
    truth = ground_truth(matrix, queries, cfg_dict["k"], cfg_dict["metric"])
    return BuiltFixture(
        items=items, matrix=matrix, queries=queries, truth=truth,
        result=result, params=params, provider=provider, config=config,
    )


@pytest.fixture(scope="session")
def small_fixture() -> BuiltFixture:
    return _build_fixture(600, 30)


@pytest.fixture(scope="session")
def standard_fixture() -> BuiltFixture:
    cfg = STANDARD_FIXTURE
    return _build_fixture(cfg["n"], cfg["n_queries"])


@pytest.fixture(scope="session")
def provider_config() -> ProviderConfig:
    return ProviderConfig(kind="synthetic", dim=STANDARD_FIXTURE["dim"],
                          seed=STANDARD_FIXTURE["seed"], max_batch=64)


_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    _ACCEPTANCE_RESULTS.append((name, f"{status}{' - ' + detail if detail else ''}"))
    assert passed, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, status in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{name}: {status}")
