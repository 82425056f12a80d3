"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ProviderModel(BaseModel):
    kind: str = "synthetic"
    dim: int = 32
    seed: int = 0
    endpoint: str = ""
    max_batch: int = Field(default=64, ge=1)
    timeout_s: float = 10.0
    retries: int = 2


class IngestRequest(BaseModel):
    index_dir: str
    input_path: str
    chunk_bytes: int = Field(default=1024, ge=1)
    chunk_overlap: int = Field(default=128, ge=0)


class IngestResponse(BaseModel):
    items: int
    bytes: int
    warnings: list[str] = []


class BuildRequest(BaseModel):
    index_dir: str
    provider: ProviderModel = ProviderModel()
    ef_construction: int = 64
    max_degree: int = 16
    low_degree: int | None = None
    hub_percent: float = 2.0
    budget_bytes: int | None = None
    pq_subspaces: int | None = None
    metric: str = "cosine"
    seed: int = 0
    shards: int = Field(default=1, ge=1)
    keep_shards: bool = False


class BuildResponse(BaseModel):
    n: int
    metadata_bytes: int
    avg_degree: float
    pq_bytes: int
    hubs: int
    trim_iterations: int
    peak_resident_embeddings: int
    elapsed_s: float
    max_degree: int
    low_degree: int


class ReportModel(BaseModel):
    recomputations: int
    approx_lookups: int
    batches: list[int]
    cache_hits: int
    cache_hit_rate: float
    stage_times: dict[str, float]
    wall_time: float


class SearchHit(BaseModel):
    rank: int
    id: int
    distance: float
    snippet: str


class SearchRequest(BaseModel):
    index_dir: str
    query: str | None = None
    vector: list[float] | None = None
    k: int = Field(default=3, ge=1)
    ef: int = Field(default=50, ge=1)
    alpha: float = Field(default=30.0, gt=0, le=100)
    batch: int = Field(default=64, ge=1)
    mode: str = "two_level"
    cache_percent: float | None = None
    with_report: bool = False
    snippet_bytes: int = 80


class SearchResponse(BaseModel):
    hits: list[SearchHit]
    report: ReportModel | None = None


class AddRequest(BaseModel):
    index_dir: str
    items: list[str]
    variant: str = "cached"
    buffered: bool = False
    drain: bool = False


class AddResponse(BaseModel):
    ids: list[int]
    buffered: bool


class DeleteRequest(BaseModel):
    index_dir: str
    ids: list[int]


class DeleteResponse(BaseModel):
    deleted_fraction: float
    rebuild_advisory: bool


class CompactRequest(BaseModel):
    index_dir: str


class CompactResponse(BaseModel):
    n: int
    metadata_bytes: int


class StatsRequest(BaseModel):
    index_dir: str


class StatsResponse(BaseModel):
    n: int
    n_active: int
    deleted_fraction: float
    buffer_pending: int
    levels: int
    metadata_bytes: int
    avg_degree: float
    pq_header_bytes: int
    rebuild_advisories: list[str]
    provider_hash: str


class EvalRequest(BaseModel):
    index_dir: str
    queries_path: str | None = None
    n_queries: int = Field(default=100, ge=1)
    k: int = Field(default=3, ge=1)
    efs: list[int] = [16, 32, 64, 128, 256]
    alphas: list[float] = [30.0, 100.0]
    batch: int = 64
    modes: list[str] = ["two_level", "exact_bestfirst"]
    output_dir: str | None = None


class EvalRow(BaseModel):
    mode: str
    alpha: float
    ef: int
    recall: float
    recomputations: float
    approx_lookups: float


class EvalResponse(BaseModel):
    rows: list[EvalRow]
    files: list[str]


class ErrorBody(BaseModel):
    code: str
    message: str
