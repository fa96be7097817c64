"""Command line: ``olaflow {run,score,gen,exact}``.

``run`` prints one JSON object per snapshot with the keys, in order:
``index, t, done, total, wall_ms, primary_key, columns, rows`` and, for
columns with a variance, ``ci`` (per row ``{column: [lo, hi]}``) and
``unstable`` (per row list of flagged columns).  Non-finite numbers are
written as ``null``.

Exit codes: 0 success, 2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import workloads
from .edf import SchemaError
from .executor import GraphError, QueryAborted, SnapshotRecord, TraceLog, build_graph, run, run_sequential
from .ingest import IngestError, load_meta, shuffle_order, write_table
from .oracle import evaluate
from .scoring import ScoreError, score_stream

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def snapshot_json(rec: SnapshotRecord, wall_ms: bool = True) -> dict:
    rows = rec.rows
    names = rows.schema.names
    data = [dict(zip(names, (_clean(v) for v in r))) for r in rows.to_rows()]
    out = {
        "index": rec.index,
        "t": rec.t,
        "done": rec.progress.done,
        "total": rec.progress.total,
        "wall_ms": round(rec.wall_clock * 1e3, 3) if wall_ms else None,
        "primary_key": list(rows.schema.primary_key),
        "columns": names,
        "rows": data,
    }
    cols = [c for c in names if c in rows.variance]
    if cols:
        bounds = {c: rec.bounds(c) for c in cols}
        out["ci"] = [{c: [_clean(bounds[c][0][i]), _clean(bounds[c][1][i])] for c in cols}
                     for i in range(rows.row_count)]
        out["unstable"] = [[c for c in cols if c in rows.unstable and rows.unstable[c][i]]
                           for i in range(rows.row_count)]
    return out


def _load_query(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _catalog(query: dict, data_dir) -> dict:
    data_dir = Path(data_dir)
    names = {n.get("table") for n in query.get("nodes", ()) if n.get("op") == "read"}
    return {name: load_meta(data_dir / name) for name in sorted(n for n in names if n)}


def _orders(catalog, seed: int, explicit: str | None):
    orders = {}
    if explicit:
        for item in explicit.split(";"):
            table, _, spec = item.partition("=")
            if not spec:
                if len(catalog) != 1:
                    raise UsageError("--partition-order needs TABLE=i,j,... with several tables")
                table, spec = next(iter(catalog)), item
            if table not in catalog:
                raise UsageError(f"--partition-order: unknown table {table!r}")
            orders[table] = [int(x) for x in spec.split(",") if x.strip()]
    for name, meta in catalog.items():
        if name not in orders and seed and not meta.clustering_key:
            orders[name] = shuffle_order(meta, seed)
    return orders


def cmd_run(args) -> int:
    query = _load_query(args.query)
    catalog = _catalog(query, args.data)
    graph = build_graph(query, catalog)
    if not 0 < args.ci_level < 1:
        raise UsageError("--ci-level must lie in (0, 1)")
    orders = _orders(catalog, args.seed, args.partition_order)
    trace = TraceLog() if args.trace else None
    out = sys.stdout

    def emit(rec):
        out.write(json.dumps(snapshot_json(rec)) + "\n")
        out.flush()

    runner = run_sequential if args.sequential else run
    runner(graph, catalog, orders, seed=args.seed, ci_level=args.ci_level, sink=emit, trace=trace)
    if trace is not None:
        origin = min((e[1] for e in trace.entries), default=0.0)
        Path(args.trace).write_text("\n".join(["node\tstart_ms\tend_ms\tpartition", *trace.lines(origin)]) + "\n")
    return EXIT_OK


def exact_json(query: dict, catalog: dict) -> dict:
    graph = build_graph(query, catalog)
    table = evaluate(query, catalog)
    ordered = graph.resolved[graph.output] == "sort_limit"
    rows = table.rows if ordered else table.sorted_rows()
    return {
        "primary_key": list(table.primary_key),
        "columns": table.columns,
        "rows": [{c: _clean(r[c]) for c in table.columns} for r in rows],
    }


def cmd_exact(args) -> int:
    query = _load_query(args.query)
    print(json.dumps(exact_json(query, _catalog(query, args.data))))
    return EXIT_OK


def _read_lines(path):
    handle = sys.stdin if path == "-" else open(path)
    with handle:
        return [json.loads(line) for line in handle if line.strip()]


def cmd_score(args) -> int:
    try:
        snapshots = _read_lines(args.snapshots)
        exact = json.loads(Path(args.exact).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from None
    for report in score_stream(snapshots, exact):
        print(json.dumps(report.to_dict()))
    return EXIT_OK


def _parse_params(items) -> dict:
    params = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"parameter {item!r} is not KEY=VALUE")
        try:
            params[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            params[key.replace("-", "_")] = value
    return params


def cmd_gen(args) -> int:
    params = _parse_params(args.param)
    params.setdefault("seed", args.seed or 1)
    gen = workloads.GENERATORS[args.kind]
    try:
        wl = gen(**params)
    except TypeError as exc:
        raise UsageError(f"{args.kind}: {exc}") from None
    out = Path(args.out)
    for name, table in wl.tables.items():
        write_table(out / name, name, table.schema, table.batches)
    for name, query in wl.queries.items():
        (out / f"{name}.json").write_text(json.dumps(query, indent=2) + "\n")
    print(json.dumps({"tables": sorted(wl.tables), "queries": sorted(f"{q}.json" for q in wl.queries)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olaflow", description="Online aggregation with confidence intervals.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="stream snapshots of a query as JSON lines")
    p.add_argument("query", help="query description (JSON)")
    p.add_argument("data", help="directory holding one sub-directory per table")
    p.add_argument("--seed", type=int, default=0, help="shuffle unclustered tables; 0 keeps metadata order")
    p.add_argument("--trace", metavar="FILE", help="write per-node activity intervals to FILE")
    p.add_argument("--ci-level", type=float, default=0.95, help="confidence level of the intervals")
    p.add_argument("--partition-order", metavar="[TABLE=]i,j,...", help="explicit partition order(s), ';'-separated")
    p.add_argument("--sequential", action="store_true", help="single-threaded reference execution")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("exact", help="batch answer of a query as JSON")
    p.add_argument("query")
    p.add_argument("data")
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("score", help="accuracy of each snapshot against an exact answer")
    p.add_argument("snapshots", help="output of 'run' ('-' for stdin)")
    p.add_argument("exact", help="output of 'exact'")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gen", help="generate a synthetic dataset with matching queries")
    p.add_argument("kind", choices=sorted(workloads.GENERATORS))
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("-p", "--param", action="append", metavar="KEY=VALUE",
                   help="generator parameter, e.g. -p rows=5000 -p depth_cols=10")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, GraphError, SchemaError, IngestError, ScoreError) as exc:
        print(f"olaflow: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except QueryAborted as exc:
        if isinstance(exc.cause, BrokenPipeError):
            # downstream closed the pipe (e.g. `| head`); not an error
            sys.stdout = open(os.devnull, "w")
            return EXIT_OK
        print(f"olaflow: query aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"olaflow: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
