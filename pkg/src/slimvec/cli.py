"""Command-line client for the slimvec service.

Every subcommand is a thin HTTP call: by default requests are dispatched to
an in-process instance of the service application, so no daemon is needed;
pass --server to talk to a running one instead. Exit codes: 0 success,
2 usage error, 3 data/format error, 4 provider error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

_EXIT_BY_STATUS = {400: 2, 404: 3, 409: 3, 422: 2, 500: 1, 502: 4}


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(client, path: str, payload: dict) -> tuple[int, dict]:
    response = client.post(path, json=payload)
    try:
        body = response.json()
    except ValueError:
        body = {"error": {"code": "internal", "message": response.text}}
    return response.status_code, body


def _fail(body: dict, status: int) -> int:
    err = body.get("error", {})
    message = err.get("message", "unknown error")
    sys.stderr.write(f"error ({err.get('code', status)}): {message}\n")
    return _EXIT_BY_STATUS.get(status, 1)


def _provider_payload(args) -> dict:
    return {
        "kind": args.provider,
        "dim": args.dim,
        "seed": args.provider_seed,
        "endpoint": args.endpoint,
        "max_batch": args.max_batch,
    }


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _apply_config(args, config: dict) -> None:
    # config file values fill in anything the command line left at default
    for key, value in config.items():
        if hasattr(args, key) and key not in args._explicit:
            setattr(args, key, value)


class _TrackingParser(argparse.ArgumentParser):
    """Remembers which destinations were set explicitly on the command line."""

    def parse_args(self, argv=None, namespace=None):  # type: ignore[override]
        namespace = super().parse_args(argv, namespace)
        explicit = set()
        tokens = list(argv if argv is not None else sys.argv[1:])
        for action in self._iter_all_actions():
            if any(opt in tokens for opt in action.option_strings):
                explicit.add(action.dest)
        namespace._explicit = explicit
        return namespace

    def _iter_all_actions(self):
        stack = [self]
        while stack:
            parser = stack.pop()
            for action in parser._actions:
                if isinstance(action, argparse._SubParsersAction):
                    stack.extend(action.choices.values())
                else:
                    yield action


def build_parser() -> _TrackingParser:
    parser = _TrackingParser(prog="slimvec", description=__doc__)
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default runs in-process")
    parser.add_argument("--config", default=None,
                        help="JSON config file with default argument values")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--index-dir", required=True)

    def provider_flags(p):
        p.add_argument("--provider", default="synthetic",
                       choices=["synthetic", "external"])
        p.add_argument("--dim", type=int, default=32)
        p.add_argument("--provider-seed", type=int, default=0)
        p.add_argument("--endpoint", default="")
        p.add_argument("--max-batch", type=int, default=64)

    p = sub.add_parser("ingest", help="chunk a corpus into the item store")
    common(p)
    p.add_argument("input")
    p.add_argument("--chunk-bytes", type=int, default=1024)
    p.add_argument("--chunk-overlap", type=int, default=128)

    p = sub.add_parser("build", help="build the index over ingested items")
    common(p)
    provider_flags(p)
    p.add_argument("--efc", type=int, default=64, help="construction queue length")
    p.add_argument("--M", dest="max_degree", type=int, default=16)
    p.add_argument("--m", dest="low_degree", type=int, default=None)
    p.add_argument("--beta", type=float, default=2.0, help="hub percentage")
    p.add_argument("--budget-bytes", type=int, default=None)
    p.add_argument("--pq-m", dest="pq_subspaces", type=int, default=None)
    p.add_argument("--metric", default="cosine", choices=["l2", "ip", "cosine"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--keep-shards", action="store_true")

    p = sub.add_parser("search", help="query the index")
    common(p)
    p.add_argument("query", help="text, or a [v1, v2, ...] vector literal")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--ef", type=int, default=50)
    p.add_argument("--alpha", type=float, default=30.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--mode", default="two_level",
                   choices=["two_level", "exact_bestfirst"])
    p.add_argument("--cache-frac", type=float, default=None)
    p.add_argument("--report", action="store_true")

    p = sub.add_parser("add", help="add items (direct or buffered)")
    common(p)
    p.add_argument("items", nargs="*")
    p.add_argument("--from-file", default=None,
                   help="line-delimited items file")
    p.add_argument("--variant", default="cached",
                   choices=["naive", "cached", "simplified"])
    p.add_argument("--buffered", action="store_true")
    p.add_argument("--drain", action="store_true")

    p = sub.add_parser("delete", help="soft-delete nodes by id")
    common(p)
    p.add_argument("ids", nargs="+", type=int)

    p = sub.add_parser("eval", help="recall/recompute sweeps against the oracle")
    common(p)
    p.add_argument("--queries", default=None, help="one query per line")
    p.add_argument("--n-queries", type=int, default=100)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--efs", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    p.add_argument("--alphas", type=float, nargs="+", default=[30.0, 100.0])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--modes", nargs="+", default=["two_level", "exact_bestfirst"])
    p.add_argument("--out", default=None, help="directory for TSV outputs")

    p = sub.add_parser("compact", help="refreeze mutations into the snapshot")
    common(p)

    p = sub.add_parser("stats", help="index statistics")
    common(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        config = _load_config(args.config)
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error (usage): cannot read config: {exc}\n")
        return 2
    _apply_config(args, config)

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    client = _client(args.server)
    try:
        return _dispatch(client, args)
    finally:
        client.close()


def _dispatch(client, args) -> int:
    if args.command == "ingest":
        status, body = _post(client, "/ingest", {
            "index_dir": args.index_dir,
            "input_path": args.input,
            "chunk_bytes": args.chunk_bytes,
            "chunk_overlap": args.chunk_overlap,
        })
        if status != 200:
            return _fail(body, status)
        for warning in body.get("warnings", []):
            sys.stderr.write(f"warning: {warning}\n")
        print(f"ingested {body['items']} items ({body['bytes']} bytes)")
        return 0

    if args.command == "build":
        status, body = _post(client, "/build", {
            "index_dir": args.index_dir,
            "provider": _provider_payload(args),
            "ef_construction": args.efc,
            "max_degree": args.max_degree,
            "low_degree": args.low_degree,
            "hub_percent": args.beta,
            "budget_bytes": args.budget_bytes,
            "pq_subspaces": args.pq_subspaces,
            "metric": args.metric,
            "seed": args.seed,
            "shards": args.shards,
            "keep_shards": args.keep_shards,
        })
        if status != 200:
            return _fail(body, status)
        print(
            f"built {body['n']} nodes: metadata {body['metadata_bytes']} B, "
            f"avg degree {body['avg_degree']:.2f}, pq {body['pq_bytes']} B, "
            f"M={body['max_degree']} m={body['low_degree']}, "
            f"peak resident {body['peak_resident_embeddings']}, "
            f"{body['elapsed_s']:.1f}s"
        )
        return 0

    if args.command == "search":
        status, body = _post(client, "/search", {
            "index_dir": args.index_dir,
            "query": args.query,
            "k": args.k,
            "ef": args.ef,
            "alpha": args.alpha,
            "batch": args.batch,
            "mode": args.mode,
            "cache_percent": args.cache_frac,
            "with_report": args.report,
        })
        if status != 200:
            return _fail(body, status)
        for hit in body["hits"]:
            print(f"{hit['rank']}\t{hit['id']}\t{hit['distance']:.6f}\t{hit['snippet']}")
        if args.report and body.get("report"):
            print(json.dumps(body["report"], indent=2, sort_keys=True))
        return 0

    if args.command == "add":
        items = list(args.items)
        if args.from_file:
            items += [
                line for line in Path(args.from_file).read_text().splitlines()
                if line.strip()
            ]
        if not items:
            sys.stderr.write("error (usage): no items given\n")
            return 2
        status, body = _post(client, "/add", {
            "index_dir": args.index_dir,
            "items": items,
            "variant": args.variant,
            "buffered": args.buffered,
            "drain": args.drain,
        })
        if status != 200:
            return _fail(body, status)
        state = "buffered" if body["buffered"] else "added"
        print(f"{state} {len(body['ids'])} items: ids {body['ids']}")
        return 0

    if args.command == "delete":
        status, body = _post(client, "/delete", {
            "index_dir": args.index_dir,
            "ids": args.ids,
        })
        if status != 200:
            return _fail(body, status)
        line = f"deleted fraction now {body['deleted_fraction']:.4f}"
        if body["rebuild_advisory"]:
            line += " (rebuild advised)"
        print(line)
        return 0

    if args.command == "eval":
        status, body = _post(client, "/eval", {
            "index_dir": args.index_dir,
            "queries_path": args.queries,
            "n_queries": args.n_queries,
            "k": args.k,
            "efs": args.efs,
            "alphas": args.alphas,
            "batch": args.batch,
            "modes": args.modes,
            "output_dir": args.out,
        })
        if status != 200:
            return _fail(body, status)
        print("mode\talpha\tef\trecall\trecomputations\tapprox_lookups")
        for row in body["rows"]:
            print(f"{row['mode']}\t{row['alpha']:g}\t{row['ef']}\t"
                  f"{row['recall']:.4f}\t{row['recomputations']:.2f}\t"
                  f"{row['approx_lookups']:.2f}")
        for path in body["files"]:
            sys.stderr.write(f"wrote {path}\n")
        return 0

    if args.command == "compact":
        status, body = _post(client, "/compact", {"index_dir": args.index_dir})
        if status != 200:
            return _fail(body, status)
        print(f"compacted: {body['n']} nodes, metadata {body['metadata_bytes']} B")
        return 0

    if args.command == "stats":
        status, body = _post(client, "/stats", {"index_dir": args.index_dir})
        if status != 200:
            return _fail(body, status)
        print(json.dumps(body, indent=2, sort_keys=True))
        return 0

    sys.stderr.write(f"error (usage): unknown command {args.command}\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
