"""Single-pass batch evaluator used as the exact reference.

It walks a query description over whole tables using plain Python rows
(dicts) and shares no evaluation code with the streaming operators; only
the predicate parser is reused.
"""

from __future__ import annotations

import math
from typing import Mapping

from .operators.functions import Predicate

_SCALAR = {
    "copy": lambda a: a,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b if b else math.copysign(math.inf, a) if a else math.nan,
    "neg": lambda a: -a,
    "abs": abs,
    "sqrt": lambda a: math.sqrt(a) if a >= 0 else math.nan,
    "log": lambda a: math.log(a) if a > 0 else (-math.inf if a == 0 else math.nan),
    "square": lambda a: a * a,
    "one_minus": lambda a: 1.0 - a,
    "scale": lambda a, factor: a * factor,
    "shift": lambda a, offset: a + offset,
    "revenue": lambda price, disc: price * (1.0 - disc),
    "mod": lambda a, k: int(a) % int(k),
    "startswith": lambda a, prefix: int(a.startswith(prefix)),
    "contains": lambda a, needle: int(needle in a),
}
_PARAMS = {"scale": ("factor",), "shift": ("offset",), "mod": ("k",), "startswith": ("prefix",), "contains": ("needle",)}
_FLOAT_FNS = {"add", "sub", "mul", "div", "neg", "abs", "sqrt", "log", "square", "one_minus", "scale", "shift", "revenue"}


class Table:
    """Rows as dicts plus the column order and primary key."""

    def __init__(self, columns, primary_key, rows):
        self.columns = list(columns)
        self.primary_key = list(primary_key)
        self.rows = rows

    def sorted_rows(self):
        key = self.primary_key or self.columns
        return sorted(self.rows, key=lambda r: tuple(r[c] for c in key))


def _read(meta) -> Table:
    schema = meta.schema
    rows = []
    for k in range(meta.n_partitions):
        batch = meta.read(k)
        rows.extend(dict(zip(schema.names, r)) for r in batch.to_rows())
    return Table(schema.names, schema.primary_key, rows)


def _map(t: Table, params) -> Table:
    derive = params.get("derive", ())
    rows = []
    for r in t.rows:
        r = dict(r)
        for d in derive:
            args = [r[a] for a in d["args"]]
            if any(v is None for v in args):
                r[d["as"]] = None
                continue
            extra = [d[p] for p in _PARAMS.get(d["fn"], ())]
            value = _SCALAR[d["fn"]](*args, *extra)
            r[d["as"]] = float(value) if d["fn"] in _FLOAT_FNS else value
        rows.append(r)
    columns = t.columns + [d["as"] for d in derive]
    keep = params.get("keep")
    if keep is not None:
        columns = [c for c in columns if c in keep]
        rows = [{c: r[c] for c in columns} for r in rows]
    return Table(columns, t.primary_key, rows)


def _filter(t: Table, params) -> Table:
    pred = Predicate.parse(params["predicate"])
    return Table(t.columns, t.primary_key, [r for r in t.rows if pred.row_matches(r)])


def _join(probe: Table, build: Table, params) -> Table:
    on = params["on"]
    on = [on] if isinstance(on, str) else on
    pairs = [(k, k) if isinstance(k, str) else (k[0], k[1]) for k in on]
    dropped = {b for p, b in pairs if p == b}
    extra = [c for c in build.columns if c not in dropped]
    index: dict = {}
    for r in build.rows:
        index.setdefault(tuple(r[b] for _, b in pairs), []).append(r)
    rows = []
    for r in probe.rows:
        matches = index.get(tuple(r[p] for p, _ in pairs), [])
        for m in matches:
            out = dict(r)
            out.update({c: m[c] for c in extra})
            rows.append(out)
        if not matches and params.get("how", "inner") == "left":
            out = dict(r)
            out.update({c: None for c in extra})
            rows.append(out)
    pk = list(probe.primary_key)
    if not set(build.primary_key) <= {b for _, b in pairs}:
        pk += [k for k in build.primary_key if k not in dropped and k not in pk]
    return Table(probe.columns + extra, pk, rows)


def _quantile(values, q):
    s = sorted(values)
    pos = (len(s) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    frac = pos - lo
    return s[lo] + (s[hi] - s[lo]) * frac


def _aggregate(spec, rows):
    kind = spec["kind"]
    col = spec.get("column")
    if kind == "count":
        return float(len(rows))
    values = [r[col] for r in rows]
    if kind == "sum":
        return float(math.fsum(values))
    if kind == "avg":
        weights = [r[spec["weight"]] for r in rows] if spec.get("weight") else [1.0] * len(rows)
        return math.fsum(w * v for w, v in zip(weights, values)) / math.fsum(weights)
    if kind in ("var", "stddev"):
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        return math.sqrt(var) if kind == "stddev" else var
    if kind == "min":
        return min(values)
    if kind == "max":
        return max(values)
    if kind == "count_distinct":
        return float(len(set(values)))
    if kind == "quantile":
        return float(_quantile([float(v) for v in values], spec["q"]))
    raise ValueError(f"unknown aggregate {kind!r}")


def _agg_name(spec):
    if spec.get("as"):
        return spec["as"]
    return f"{spec['kind']}_{spec['column']}" if spec.get("column") else spec["kind"]


def _agg(t: Table, params) -> Table:
    by = list(params.get("by", ()))
    groups: dict = {}
    for r in t.rows:
        groups.setdefault(tuple(r[c] for c in by), []).append(r)
    names = [_agg_name(a) for a in params["aggs"]]
    rows = []
    for key, members in groups.items():
        row = dict(zip(by, key))
        for spec, name in zip(params["aggs"], names):
            row[name] = _aggregate(spec, members)
        rows.append(row)
    return Table(by + names, by, rows)


def _sort_limit(t: Table, params) -> Table:
    order = params["order"]
    order = [order] if isinstance(order, str) else order
    rows = sorted(t.rows, key=lambda r: tuple(r[c] for c in t.primary_key))
    pairs = [(o[1:], True) if o.startswith("-") else (o, False) if isinstance(o, str) else (o[0], bool(o[1])) for o in order]
    for col, desc in reversed(pairs):
        rows.sort(key=lambda r: r[col], reverse=desc)
    limit = params.get("limit")
    return Table(t.columns, t.primary_key, rows if limit is None else rows[:limit])


def evaluate(spec: Mapping, tables: Mapping) -> Table:
    """Exact answer of a query description over fully read tables."""
    nodes = {n["id"]: n for n in spec["nodes"]}
    inputs = {i: list(n.get("inputs", ())) for i, n in nodes.items()}
    for producer, consumer, slot in spec.get("edges", ()):
        inputs[consumer].extend([None] * (slot + 1 - len(inputs[consumer])))
        inputs[consumer][slot] = producer
    consumed = {p for ins in inputs.values() for p in ins}
    output = spec.get("output") or next(i for i in nodes if i not in consumed)
    cache: dict = {}

    def value(node_id):
        if node_id in cache:
            return cache[node_id]
        n = nodes[node_id]
        op = n["op"]
        args = [value(i) for i in inputs[node_id]]
        if op == "read":
            out = _read(tables[n["table"]])
        elif op == "map":
            out = _map(args[0], n)
        elif op == "filter":
            out = _filter(args[0], n)
        elif op in ("join", "hash_join", "merge_join"):
            out = _join(args[0], args[1], n)
        elif op == "agg":
            out = _agg(args[0], n)
        elif op == "sort_limit":
            out = _sort_limit(args[0], n)
        else:
            raise ValueError(f"unknown operator {op!r}")
        cache[node_id] = out
        return out

    return value(output)
