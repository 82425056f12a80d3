"""slimvec: storage-lean vector search.

Persists only a pruned proximity graph and compact PQ codes; exact embeddings
are recomputed on demand through a pluggable deterministic provider.
"""

from .builder import BuildParams, BuildResult, build_index, profile_m, rng_shrink
from .errors import SlimvecError
from .graph import PrunedGraph, degree_stats, load_graph, save_graph
from .index import Engine, build_index_dir
from .pq import PQCodes, PQModel, adc_build, approx_distance, pq_encode, pq_train
from .search import SearchParams, SearchReport, best_first_search, two_level_search
from .shardbuild import build_sharded, merge_shards, plan_shards
from .store import ItemStore, ingest
from .update import AddBuffer, MutableIndex, MutationLog
from .vectors import (
    EmbeddingRequest,
    ProviderConfig,
    ResidentCounter,
    distance,
    embed_batch,
    make_provider,
    synthetic_embed,
)

__version__ = "0.1.0"

__all__ = [
    "AddBuffer",
    "BuildParams",
    "BuildResult",
    "EmbeddingRequest",
    "Engine",
    "ItemStore",
    "MutableIndex",
    "MutationLog",
    "PQCodes",
    "PQModel",
    "ProviderConfig",
    "PrunedGraph",
    "ResidentCounter",
    "SearchParams",
    "SearchReport",
    "SlimvecError",
    "adc_build",
    "approx_distance",
    "best_first_search",
    "build_index",
    "build_index_dir",
    "build_sharded",
    "degree_stats",
    "distance",
    "embed_batch",
    "ingest",
    "load_graph",
    "make_provider",
    "merge_shards",
    "plan_shards",
    "pq_encode",
    "pq_train",
    "profile_m",
    "rng_shrink",
    "save_graph",
    "synthetic_embed",
    "two_level_search",
]
