"""FastAPI application exposing the index lifecycle over HTTP.

Errors map onto stable status codes so thin clients can translate them to
exit codes: usage -> 400, data/format -> 409, provider -> 502. Loaded engines
are cached per index directory; mutations are serialized with an in-process
lock on top of the on-disk directory lock.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..builder import BuildParams, profile_m
from ..errors import SlimvecError
from ..evaluation import evaluate_engine, parse_query_line
from ..index import Engine, build_index_dir
from ..search import SearchParams
from ..store import ingest
from ..vectors import ProviderConfig
from . import schemas

_STATUS_BY_CODE = {"usage": 400, "data": 409, "provider": 502, "internal": 500}


def _provider_config(model: schemas.ProviderModel) -> ProviderConfig:
    return ProviderConfig(
        kind=model.kind, dim=model.dim, seed=model.seed, endpoint=model.endpoint,
        max_batch=model.max_batch, timeout_s=model.timeout_s, retries=model.retries,
    )


class _EngineCache:
    def __init__(self) -> None:
        self._engines: dict[str, Engine] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def get(self, index_dir: str) -> tuple[Engine, threading.Lock]:
        key = str(Path(index_dir).resolve())
        with self._guard:
            if key not in self._engines:
                self._engines[key] = Engine.open(index_dir)
                self._locks[key] = threading.Lock()
            return self._engines[key], self._locks[key]

    def invalidate(self, index_dir: str) -> None:
        key = str(Path(index_dir).resolve())
        with self._guard:
            engine = self._engines.pop(key, None)
            self._locks.pop(key, None)
        if engine is not None:
            engine.close()


def create_app() -> FastAPI:
    app = FastAPI(title="slimvec", version="0.1.0")
    cache = _EngineCache()

    @app.exception_handler(SlimvecError)
    async def _slimvec_error(request: Request, exc: SlimvecError):
        status = _STATUS_BY_CODE.get(exc.code, 500)
        return JSONResponse(
            status_code=status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "usage", "message": str(exc.errors())}},
        )

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/ingest", response_model=schemas.IngestResponse)
    def ingest_endpoint(req: schemas.IngestRequest) -> schemas.IngestResponse:
        warnings: list[str] = []
        count, size = ingest(req.input_path, req.index_dir, req.chunk_bytes,
                             req.chunk_overlap, warn=warnings.append)
        cache.invalidate(req.index_dir)
        return schemas.IngestResponse(items=count, bytes=size, warnings=warnings)

    @app.post("/build", response_model=schemas.BuildResponse)
    def build_endpoint(req: schemas.BuildRequest) -> schemas.BuildResponse:
        max_degree, low_degree = req.max_degree, req.low_degree
        if req.budget_bytes is not None and req.low_degree is None:
            from ..store import ItemStore

            store = ItemStore.open(req.index_dir)
            try:
                n_items = store.n
            finally:
                store.close()
            max_degree, low_degree = profile_m(n_items, req.budget_bytes,
                                               req.hub_percent)
        params = BuildParams(
            ef_construction=max(req.ef_construction, max_degree),
            max_degree=max_degree,
            low_degree=low_degree,
            hub_percent=req.hub_percent,
            budget_bytes=req.budget_bytes,
            metric=req.metric,
            seed=req.seed,
            pq_subspaces=req.pq_subspaces,
        )
        stats = build_index_dir(
            req.index_dir, params, _provider_config(req.provider),
            k_shards=req.shards, keep_shards=req.keep_shards,
        )
        cache.invalidate(req.index_dir)
        return schemas.BuildResponse(
            max_degree=params.max_degree, low_degree=params.low_degree, **stats
        )

    @app.post("/search", response_model=schemas.SearchResponse)
    def search_endpoint(req: schemas.SearchRequest) -> schemas.SearchResponse:
        engine, _ = cache.get(req.index_dir)
        if req.vector is not None:
            query = parse_query_line(str(list(req.vector)), engine.dim)
        elif req.query is not None:
            query = parse_query_line(req.query, engine.dim)
        else:
            return JSONResponse(
                status_code=400,
                content={"error": {"code": "usage",
                                   "message": "query or vector required"}},
            )
        params = SearchParams(
            k=req.k, ef=max(req.ef, req.k), rerank_percent=req.alpha,
            batch_size=req.batch, mode=req.mode, cache_percent=req.cache_percent,
        )
        report = engine.search(query, params)
        hits = []
        for rank, (node_id, dist) in enumerate(report.results, start=1):
            payload = engine.store.get(node_id)
            snippet = payload[: req.snippet_bytes].decode("utf-8", errors="replace")
            hits.append(schemas.SearchHit(rank=rank, id=node_id,
                                          distance=dist, snippet=snippet))
        report_model = None
        if req.with_report:
            report_model = schemas.ReportModel(
                recomputations=report.recomputations,
                approx_lookups=report.approx_lookups,
                batches=report.batches,
                cache_hits=report.cache_hits,
                cache_hit_rate=report.cache_hit_rate,
                stage_times=report.stage_times,
                wall_time=report.wall_time,
            )
        return schemas.SearchResponse(hits=hits, report=report_model)

    @app.post("/add", response_model=schemas.AddResponse)
    def add_endpoint(req: schemas.AddRequest) -> schemas.AddResponse:
        engine, lock = cache.get(req.index_dir)
        with lock:
            ids = engine.add([s.encode("utf-8") for s in req.items],
                             variant=req.variant, buffered=req.buffered)
            if req.drain:
                engine.drain()
        return schemas.AddResponse(ids=ids, buffered=req.buffered and not req.drain)

    @app.post("/delete", response_model=schemas.DeleteResponse)
    def delete_endpoint(req: schemas.DeleteRequest) -> schemas.DeleteResponse:
        engine, lock = cache.get(req.index_dir)
        with lock:
            out = engine.delete(req.ids)
        return schemas.DeleteResponse(**out)

    @app.post("/compact", response_model=schemas.CompactResponse)
    def compact_endpoint(req: schemas.CompactRequest) -> schemas.CompactResponse:
        engine, lock = cache.get(req.index_dir)
        with lock:
            out = engine.compact()
        cache.invalidate(req.index_dir)
        return schemas.CompactResponse(**out)

    @app.post("/stats", response_model=schemas.StatsResponse)
    def stats_endpoint(req: schemas.StatsRequest) -> schemas.StatsResponse:
        engine, _ = cache.get(req.index_dir)
        return schemas.StatsResponse(**engine.stats())

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_endpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
        engine, _ = cache.get(req.index_dir)
        if req.queries_path:
            lines = Path(req.queries_path).read_text().splitlines()
            payloads = [parse_query_line(line, engine.dim)
                        for line in lines if line.strip()]
        else:
            payloads = [b"synthetic query %08d" % i for i in range(req.n_queries)]
        rows, files = evaluate_engine(
            engine, payloads, req.k, req.efs, req.alphas, req.modes,
            req.batch, req.output_dir,
        )
        return schemas.EvalResponse(
            rows=[schemas.EvalRow(**row.__dict__) for row in rows], files=files
        )

    return app


app = create_app()
