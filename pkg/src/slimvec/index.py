"""Index directory lifecycle and the query/mutation engine facade.

An index directory holds: graph.bin (pruned CSR), pq.bin (codebooks + codes),
deleted.bin (delete bitset), meta.txt (structured text configuration),
items.dat/items.idx (payload store), and mutations.log (replayable journal).

meta.txt records a hash of the embedding configuration; every later command
verifies it so recomputation always uses the same encoder the index was built
with. A lock file enforces one writer per directory; loaded snapshots are
immutable and searches need no lock.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np

from .builder import BuildParams, build_index
from .errors import (
    FormatError,
    IndexLockedError,
    InvalidArgumentError,
    ProviderMismatchError,
)
from .graph import (
    degree_stats,
    graphs_equal,
    load_deleted,
    load_graph,
    save_deleted,
    save_graph,
)
from .pq import load_pq, pq_header_bytes, save_pq
from .search import (
    EmbeddingCache,
    ProviderSource,
    SearchParams,
    SearchReport,
    build_embedding_cache,
    run_search,
)
from .shardbuild import build_sharded
from .store import ItemStore
from .update import MutableIndex, MutationLog, replay_log
from .vectors import (
    EmbeddingRequest,
    ProviderConfig,
    ResidentCounter,
    embed_all,
    make_provider,
    provider_hash,
)

GRAPH_BIN = "graph.bin"
PQ_BIN = "pq.bin"
DELETED_BIN = "deleted.bin"
META_TXT = "meta.txt"
MUTATIONS_LOG = "mutations.log"
LOCK_FILE = ".lock"

_META_VERSION = "1"


def apply_env_overrides(config: ProviderConfig) -> ProviderConfig:
    """Environment overrides for transport knobs (never embedding identity)."""
    endpoint = os.environ.get("SLIMVEC_ENDPOINT", config.endpoint)
    timeout = float(os.environ.get("SLIMVEC_TIMEOUT_S", config.timeout_s))
    retries = int(os.environ.get("SLIMVEC_RETRIES", config.retries))
    if (endpoint, timeout, retries) == (config.endpoint, config.timeout_s, config.retries):
        return config
    return ProviderConfig(
        kind=config.kind, dim=config.dim, seed=config.seed, endpoint=endpoint,
        max_batch=config.max_batch, timeout_s=timeout, retries=retries,
    )


class IndexLock:
    """One writer per index directory; stale locks from dead pids are stolen."""

    def __init__(self, index_dir) -> None:
        self.path = Path(index_dir) / LOCK_FILE

    def acquire(self) -> "IndexLock":
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
                return self
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or "0")
                except (OSError, ValueError):
                    pid = 0
                if pid and _pid_alive(pid):
                    raise IndexLockedError(
                        f"index locked by running process {pid}: {self.path}"
                    )
                try:
                    self.path.unlink()
                except FileNotFoundError:
                    pass

    def release(self) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass

    def __enter__(self) -> "IndexLock":
        return self.acquire()

    def __exit__(self, *exc) -> None:
        self.release()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def write_meta(path, mapping: dict) -> None:
    lines = [f"{key}={mapping[key]}" for key in sorted(mapping)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FormatError("meta", f"missing {path}")
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError("meta", f"malformed line: {line!r}")
        key, _, value = line.partition("=")
        out[key] = value
    return out


def _meta_from(params: BuildParams, config: ProviderConfig, n: int,
               k_shards: int) -> dict:
    return {
        "format_version": _META_VERSION,
        "n": n,
        "dim": config.dim,
        "metric": params.metric,
        "provider_kind": config.kind,
        "provider_seed": config.seed,
        "provider_max_batch": config.max_batch,
        "provider_hash": provider_hash(config),
        "ef_construction": params.ef_construction,
        "max_degree": params.max_degree,
        "low_degree": params.low_degree,
        "hub_percent": params.hub_percent,
        "budget_bytes": params.budget_bytes if params.budget_bytes is not None else "",
        "pq_subspaces": params.pq_subspaces if params.pq_subspaces is not None else "",
        "seed": params.seed,
        "k_shards": k_shards,
    }


def build_index_dir(index_dir, params: BuildParams, config: ProviderConfig, *,
                    k_shards: int = 1, keep_shards: bool = False,
                    counter: ResidentCounter | None = None,
                    plan_sample_size: int | None = None) -> dict:
    """Build all index artifacts over a previously ingested item store."""
    index_dir = Path(index_dir)
    counter = counter if counter is not None else ResidentCounter()
    config = apply_env_overrides(config)
    provider = make_provider(config)
    started = time.perf_counter()
    with IndexLock(index_dir):
        store = ItemStore.open(index_dir)
        try:
            items = store.items()
        finally:
            store.close()
        if k_shards <= 1:
            result = build_index(items, params, provider, counter=counter)
        else:
            result, _ = build_sharded(
                items, params, provider, k_shards, counter=counter,
                plan_sample_size=plan_sample_size,
                shard_dir=index_dir / "shards_tmp", keep_shards=keep_shards,
            )
        save_graph(result.graph, index_dir / GRAPH_BIN)
        save_pq(result.pq_model, result.pq_codes, index_dir / PQ_BIN)
        save_deleted(result.graph.deleted, index_dir / DELETED_BIN)
        write_meta(index_dir / META_TXT,
                   _meta_from(params, config, len(items), k_shards))
        MutationLog(index_dir / MUTATIONS_LOG).clear()
        stats = degree_stats(result.graph)
        return {
            "n": len(items),
            "metadata_bytes": stats.metadata_bytes,
            "avg_degree": stats.avg_degree,
            "pq_bytes": (index_dir / PQ_BIN).stat().st_size,
            "hubs": int(result.hub_ids.shape[0]),
            "trim_iterations": result.trim_iterations,
            "peak_resident_embeddings": counter.peak,
            "elapsed_s": time.perf_counter() - started,
        }


class Engine:
    """Loaded index: concurrent searches plus single-writer mutations."""

    def __init__(self, index_dir, meta: dict[str, str], config: ProviderConfig,
                 mutable: MutableIndex, store: ItemStore,
                 log: MutationLog) -> None:
        self.index_dir = Path(index_dir)
        self.meta = meta
        self.config = config
        self.provider = mutable.provider
        self.mutable = mutable
        self.store = store
        self.log = log
        self.metric = meta["metric"]
        self.dim = int(meta["dim"])
        self._caches: dict[float, EmbeddingCache] = {}

    # -- lifecycle --

    @classmethod
    def open(cls, index_dir, config: ProviderConfig | None = None) -> "Engine":
        index_dir = Path(index_dir)
        meta = read_meta(index_dir / META_TXT)
        if config is None:
            if meta["provider_kind"] == "external":
                config = ProviderConfig(
                    kind="external", dim=int(meta["dim"]),
                    endpoint=os.environ.get("SLIMVEC_ENDPOINT", ""),
                    max_batch=int(meta.get("provider_max_batch", 64)),
                )
            else:
                config = ProviderConfig(
                    kind="synthetic", dim=int(meta["dim"]),
                    seed=int(meta.get("provider_seed", 0)),
                    max_batch=int(meta.get("provider_max_batch", 64)),
                )
        config = apply_env_overrides(config)
        if provider_hash(config) != meta["provider_hash"]:
            raise ProviderMismatchError(
                "index built with a different embedding configuration "
                f"(stored hash {meta['provider_hash']}, "
                f"offered {provider_hash(config)})"
            )
        graph = load_graph(index_dir / GRAPH_BIN)
        graph.deleted = load_deleted(index_dir / DELETED_BIN, graph.n)
        pq_model, pq_codes = load_pq(index_dir / PQ_BIN)
        store = ItemStore.open(index_dir)
        provider = make_provider(config)
        mutable = MutableIndex(
            graph, pq_model, pq_codes, provider, store,
            max_degree=int(meta["max_degree"]),
            ef_construction=int(meta["ef_construction"]),
            seed=int(meta["seed"]),
            metric=meta["metric"],
        )
        log = MutationLog(index_dir / MUTATIONS_LOG)
        engine = cls(index_dir, meta, config, mutable, store, log)
        engine._reconcile()
        return engine

    def _reconcile(self) -> None:
        """Replay the journal; drop unacknowledged payload-store tail rows."""
        expected = self.mutable.overlay.n
        for record in self.log.entries():
            if record["op"] == "add":
                expected = max(expected, record["id"] + 1)
        if self.store.n > expected:
            self.store.truncate(expected)
        replay_log(self.log, self.mutable)

    def close(self) -> None:
        self.store.close()

    # -- queries --

    def embed_query(self, query: bytes | str) -> np.ndarray:
        if isinstance(query, str):
            query = query.encode("utf-8")
        return embed_all([EmbeddingRequest(-1, query)], self.provider)[0]

    def _cache_for(self, fraction: float | None) -> EmbeddingCache | None:
        if fraction is None:
            return None
        if fraction not in self._caches:
            base = self.mutable.overlay.base
            source = ProviderSource(self.provider, self.store.get)
            self._caches[fraction] = build_embedding_cache(base, fraction, source)
        return self._caches[fraction]

    def search(self, query, params: SearchParams) -> SearchReport:
        """Run one query; results merge graph hits with the pending buffer."""
        q = query if isinstance(query, np.ndarray) else self.embed_query(query)
        q = np.asarray(q, dtype=np.float32)
        if q.shape[0] != self.dim:
            raise InvalidArgumentError(
                f"query dim {q.shape[0]} != index dim {self.dim}"
            )
        mutable = self.mutable
        report = run_search(
            mutable.overlay, q, params,
            ProviderSource(self.provider, self.store.get), self.metric,
            mutable.pq_model, mutable.pq_codes,
            self._cache_for(params.cache_percent),
        )
        if mutable.buffer.pending:
            t = time.perf_counter()
            extra = mutable.buffer_scan(q)
            combined = [(d, i) for i, d in report.results]
            combined += [(d, i) for i, d in extra]
            combined.sort()
            report.results = [(i, d) for d, i in combined[: params.k]]
            report.stage_times["distance"] += time.perf_counter() - t
        return report

    # -- mutations --

    def add(self, contents: list[bytes], variant: str = "cached",
            buffered: bool = False) -> list[int]:
        with IndexLock(self.index_dir):
            if buffered:
                ids = self.mutable.buffered_add(contents)
                for nid, content in zip(ids, contents):
                    self.log.append_add(nid, content, "simplified")
                return ids
            ids = []
            for content in contents:
                nid, _ = self.mutable.add_node(content, variant=variant)
                self.log.append_add(nid, content, variant)
                ids.append(nid)
            return ids

    def delete(self, node_ids: list[int]) -> dict:
        with IndexLock(self.index_dir):
            advisory = False
            for nid in node_ids:
                if nid >= self.mutable.overlay.n and self.mutable.buffer.pending:
                    self.mutable.drain()
                advisory = self.mutable.delete(nid) or advisory
                self.log.append_delete(nid)
            return {
                "deleted_fraction": self.mutable.overlay.deleted_fraction(),
                "rebuild_advisory": advisory,
            }

    def drain(self) -> int:
        with IndexLock(self.index_dir):
            return len(self.mutable.drain())

    def compact(self) -> dict:
        """Refreeze the overlay, rewrite all artifacts, clear the journal."""
        with IndexLock(self.index_dir):
            self.mutable.drain()
            graph, codes = self.mutable.compact()
            _atomic(save_graph, graph, self.index_dir / GRAPH_BIN)
            _atomic(lambda g, p: save_deleted(g.deleted, p), graph,
                    self.index_dir / DELETED_BIN)
            if self.mutable.pq_model is not None and codes is not None:
                _atomic(
                    lambda mc, p: save_pq(mc[0], mc[1], p),
                    (self.mutable.pq_model, codes),
                    self.index_dir / PQ_BIN,
                )
            self.meta["n"] = str(graph.n)
            write_meta(self.index_dir / META_TXT, self.meta)
            self.log.clear()
            reloaded = load_graph(self.index_dir / GRAPH_BIN)
            reloaded.deleted = graph.deleted.copy()
            assert graphs_equal(reloaded, graph)
            return {"n": graph.n, "metadata_bytes": degree_stats(graph).metadata_bytes}

    # -- reporting --

    def stats(self) -> dict:
        overlay = self.mutable.overlay
        base = overlay.base
        s = degree_stats(base) if base is not None else None
        return {
            "n": overlay.n,
            "n_active": overlay.n - sum(overlay._deleted),
            "deleted_fraction": overlay.deleted_fraction(),
            "buffer_pending": len(self.mutable.buffer.pending),
            "levels": overlay.level_count,
            "metadata_bytes": s.metadata_bytes if s else 0,
            "avg_degree": s.avg_degree if s else 0.0,
            "pq_header_bytes": (
                pq_header_bytes(self.mutable.pq_model)
                if self.mutable.pq_model is not None else 0
            ),
            "rebuild_advisories": list(self.mutable.rebuild_advisories),
            "provider_hash": self.meta["provider_hash"],
        }


def _atomic(write_fn, payload, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    write_fn(payload, tmp)
    os.replace(tmp, path)
