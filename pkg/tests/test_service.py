"""HTTP service endpoints: lifecycle, search, mutations, error mapping."""

from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from slimvec.service import create_app


@pytest.fixture()
def client() -> TestClient:
    return TestClient(create_app())


def _corpus(tmp_path, n: int = 150):
    records = tmp_path / "records.txt"
    records.write_text("\n".join(f"service doc {i}" for i in range(n)))
    return records


def _build(client, tmp_path, n: int = 150, shards: int = 1) -> str:
    index_dir = str(tmp_path / "index")
    records = _corpus(tmp_path, n)
    resp = client.post("/ingest", json={
        "index_dir": index_dir, "input_path": str(records),
    })
    assert resp.status_code == 200, resp.text
    assert resp.json()["items"] == n
    resp = client.post("/build", json={
        "index_dir": index_dir,
        "provider": {"kind": "synthetic", "dim": 16, "seed": 3, "max_batch": 32},
        "ef_construction": 24,
        "max_degree": 8,
        "hub_percent": 5.0,
        "seed": 3,
        "shards": shards,
    })
    assert resp.status_code == 200, resp.text
    body = resp.json()
    assert body["n"] == n
    assert body["metadata_bytes"] > 0
    return index_dir


def test_healthz(client) -> None:
    resp = client.get("/healthz")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok"}


def test_ingest_build_search_round_trip(client, tmp_path) -> None:
    index_dir = _build(client, tmp_path)
    resp = client.post("/search", json={
        "index_dir": index_dir,
        "query": "service doc 7",
        "k": 3,
        "ef": 64,
        "mode": "exact_bestfirst",
        "with_report": True,
    })
    assert resp.status_code == 200, resp.text
    body = resp.json()
    assert len(body["hits"]) == 3
    top = body["hits"][0]
    assert top["rank"] == 1
    assert top["id"] == 7
    assert "service doc 7" in top["snippet"]
    report = body["report"]
    assert report["recomputations"] > 0
    assert sum(report["batches"]) == report["recomputations"]
    assert set(report["stage_times"]) == {"pq_lookup", "payload_fetch",
                                          "embed", "distance"}


def test_search_with_vector_literal(client, tmp_path) -> None:
    index_dir = _build(client, tmp_path)
    resp = client.post("/search", json={
        "index_dir": index_dir,
        "vector": [0.25] * 16,
        "k": 2,
        "ef": 32,
    })
    assert resp.status_code == 200
    assert len(resp.json()["hits"]) == 2


def test_add_delete_stats_compact_flow(client, tmp_path) -> None:
    index_dir = _build(client, tmp_path)
    resp = client.post("/add", json={
        "index_dir": index_dir, "items": ["fresh service item"],
        "variant": "cached",
    })
    assert resp.status_code == 200
    assert resp.json()["ids"] == [150]

    resp = client.post("/delete", json={"index_dir": index_dir, "ids": [0, 1]})
    assert resp.status_code == 200
    assert resp.json()["deleted_fraction"] == pytest.approx(2 / 151)

    resp = client.post("/stats", json={"index_dir": index_dir})
    assert resp.status_code == 200
    stats = resp.json()
    assert stats["n"] == 151
    assert stats["n_active"] == 149

    resp = client.post("/compact", json={"index_dir": index_dir})
    assert resp.status_code == 200
    assert resp.json()["n"] == 151

    resp = client.post("/search", json={
        "index_dir": index_dir, "query": "fresh service item",
        "k": 1, "ef": 64, "mode": "exact_bestfirst",
    })
    assert resp.json()["hits"][0]["id"] == 150


def test_buffered_add_visible_through_service(client, tmp_path) -> None:
    index_dir = _build(client, tmp_path)
    resp = client.post("/add", json={
        "index_dir": index_dir, "items": ["buffered via api"],
        "buffered": True,
    })
    assert resp.status_code == 200
    assert resp.json()["buffered"] is True
    resp = client.post("/search", json={
        "index_dir": index_dir, "query": "buffered via api",
        "k": 1, "ef": 64, "mode": "exact_bestfirst",
    })
    assert resp.json()["hits"][0]["id"] == 150


def test_eval_endpoint_returns_rows_and_files(client, tmp_path) -> None:
    index_dir = _build(client, tmp_path, n=300)
    out_dir = str(tmp_path / "eval_out")
    resp = client.post("/eval", json={
        "index_dir": index_dir,
        "n_queries": 10,
        "k": 3,
        "efs": [16, 32],
        "alphas": [30.0],
        "modes": ["two_level", "exact_bestfirst"],
        "output_dir": out_dir,
    })
    assert resp.status_code == 200, resp.text
    body = resp.json()
    assert len(body["rows"]) == 4  # 2 efs x (two_level alpha30 + bestfirst)
    for row in body["rows"]:
        assert 0.0 <= row["recall"] <= 1.0
    assert body["files"]


def test_error_mapping_usage_and_data(client, tmp_path) -> None:
    # missing index -> data error (409)
    resp = client.post("/stats", json={"index_dir": str(tmp_path / "nope")})
    assert resp.status_code == 409
    assert resp.json()["error"]["code"] == "data"

    # malformed request -> usage (400)
    resp = client.post("/search", json={"index_dir": "x", "k": "not an int"})
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "usage"

    # neither query nor vector -> usage
    index_dir = _build(client, tmp_path)
    resp = client.post("/search", json={"index_dir": index_dir})
    assert resp.status_code == 400

    # provider mismatch -> usage error category
    resp = client.post("/build", json={
        "index_dir": index_dir,
        "provider": {"kind": "external", "dim": 16, "endpoint": ""},
    })
    assert resp.status_code in (400, 409, 502)


def test_budget_build_via_service_profiles_m(client, tmp_path) -> None:
    index_dir = str(tmp_path / "budget_index")
    records = _corpus(tmp_path, 200)
    client.post("/ingest", json={"index_dir": index_dir,
                                 "input_path": str(records)})
    budget = 8 * 200 + 4000
    resp = client.post("/build", json={
        "index_dir": index_dir,
        "provider": {"kind": "synthetic", "dim": 16, "seed": 1, "max_batch": 32},
        "budget_bytes": budget,
        "hub_percent": 5.0,
        "seed": 1,
    })
    assert resp.status_code == 200, resp.text
    body = resp.json()
    assert body["metadata_bytes"] <= budget
    # infeasible budget is rejected before heavy work
    resp = client.post("/build", json={
        "index_dir": index_dir,
        "provider": {"kind": "synthetic", "dim": 16, "seed": 1, "max_batch": 32},
        "budget_bytes": 100,
    })
    assert resp.status_code == 409
