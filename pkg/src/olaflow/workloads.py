"""Synthetic datasets and matching query descriptions.

Every generator returns a :class:`Workload`: in-memory tables plus named
queries.  ``olaflow gen`` writes them to disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .edf import AttributeDef, EdfSchema, RowBatch
from .ingest import MemoryTable


@dataclass
class Workload:
    tables: dict[str, MemoryTable]
    queries: dict[str, dict] = field(default_factory=dict)


def _schema(spec: str, pk, ck=None) -> EdfSchema:
    return EdfSchema(tuple(AttributeDef.parse(a) for a in spec.split()), tuple(pk), ck)


def _split(schema: EdfSchema, columns: dict, bounds) -> tuple[RowBatch, ...]:
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        cols = {k: (v[lo:hi].tolist() if schema.attr(k).kind == "utf8" else v[lo:hi]) for k, v in columns.items()}
        out.append(RowBatch(schema, cols))
    return tuple(out)


def _even_bounds(n: int, parts: int) -> list[int]:
    return [round(n * k / parts) for k in range(parts + 1)]


def _table(name, schema, columns, parts) -> MemoryTable:
    n = len(next(iter(columns.values())))
    return MemoryTable(name, schema, _split(schema, columns, _even_bounds(n, parts)))


# --- demo -------------------------------------------------------------------


def demo(rows: int = 2000, partitions: int = 4, seed: int = 1) -> Workload:
    rng = np.random.default_rng(seed)
    schema = _schema("id:int64 state:utf8 amount:float64", ["id"])
    states = np.array(["CA", "IL", "MI", "NY", "TX"], dtype=object)
    cols = {
        "id": np.arange(rows, dtype=np.int64),
        "state": states[rng.integers(0, len(states), rows)],
        "amount": np.round(rng.gamma(2.0, 20.0, rows), 2),
    }
    query = {
        "nodes": [
            {"id": "sales", "op": "read", "table": "sales"},
            {"id": "by_state", "op": "agg", "inputs": ["sales"], "by": ["state"],
             "aggs": [{"kind": "count"}, {"kind": "sum", "column": "amount"}]},
        ]
    }
    return Workload({"sales": _table("sales", schema, cols, partitions)}, {"count_by_state": query})


# --- monomial growth ----------------------------------------------------------


def monomial(u: float = 1.0, v: float = 0.0, groups: int = 20, partitions: int = 10,
             rows: int = 10_000, seed: int = 1) -> Workload:
    """Rows and groups that appear as ``rows ~ k**u`` and ``groups ~ k**v``.

    After ``k`` of ``P`` partitions the progress is ``t = (k/P)**u`` and the
    mean group cardinality grows as ``t**(1 - v/u)``.  Group keys are uniform
    over the groups introduced so far.
    """
    if u <= 0 or not 0 <= v <= u:
        raise ValueError("need u > 0 and 0 <= v <= u")
    if groups < 1 or partitions < 1 or rows < max(groups, partitions):
        raise ValueError("need rows >= max(groups, partitions) >= 1")
    rng = np.random.default_rng(seed)
    frac = (np.arange(partitions + 1) / partitions)
    cum_rows = np.maximum.accumulate(np.round(rows * frac**u).astype(int))
    cum_groups = np.maximum(1, np.round(groups * frac**v).astype(int))
    cum_groups[0] = 0
    for k in range(1, partitions + 1):
        cum_rows[k] = max(cum_rows[k], cum_rows[k - 1] + 1, cum_rows[k - 1] + cum_groups[k] - cum_groups[k - 1])
    keys = []
    for k in range(1, partitions + 1):
        new = np.arange(cum_groups[k - 1], cum_groups[k])
        n = cum_rows[k] - cum_rows[k - 1]
        rest = rng.integers(0, cum_groups[k], n - len(new))
        part = np.concatenate([new, rest])
        rng.shuffle(part)
        keys.append(part)
    g = np.concatenate(keys).astype(np.int64)
    n = len(g)
    schema = _schema("id:int64 g:int64 val:float64", ["id"])
    cols = {"id": np.arange(n, dtype=np.int64), "g": g, "val": np.round(rng.normal(10.0, 3.0, n), 3)}
    table = MemoryTable("mono", schema, _split(schema, cols, list(cum_rows)))
    query = {
        "nodes": [
            {"id": "mono", "op": "read", "table": "mono"},
            {"id": "per_group", "op": "agg", "inputs": ["mono"], "by": ["g"],
             "aggs": [{"kind": "count"}, {"kind": "sum", "column": "val"}]},
        ]
    }
    return Workload({"mono": table}, {"count_sum_by_group": query})


# --- deep query -----------------------------------------------------------------


def deep_query(depth: int, table: str = "deep") -> dict:
    """Alternating max/sum aggregation chain of the given depth.

    Level ``depth`` takes ``max(x)`` grouped by ``c1..c<depth>``; each level
    above drops one grouping column and alternates sum and max, starting
    with sum; the outermost level is always a sum.  Depth 0 is ``max(x)``.
    """
    if depth < 0:
        raise ValueError("depth must be non-negative")
    nodes = [{"id": "read", "op": "read", "table": table}]
    prev, column = "read", "x"
    for level in range(depth, -1, -1):
        if level == depth:
            kind = "max"
        elif level == 0:
            kind = "sum"
        else:
            kind = "sum" if (depth - 1 - level) % 2 == 0 else "max"
        name = f"{kind}_{column}"
        node_id = f"level{level}"
        nodes.append({"id": node_id, "op": "agg", "inputs": [prev],
                      "by": [f"c{i}" for i in range(1, level + 1)],
                      "aggs": [{"kind": kind, "column": column, "as": name}]})
        prev, column = node_id, name
    return {"nodes": nodes}


def deep_query_text(depth: int) -> str:
    """Method-chain rendering, e.g. ``df.max(x, by=(c1,c2)).sum(max_x, by=c1).sum(sum_max_x)``."""
    parts = []
    for node in deep_query(depth)["nodes"][1:]:
        spec = node["aggs"][0]
        by = node["by"]
        if not by:
            parts.append(f"{spec['kind']}({spec['column']})")
        elif len(by) == 1:
            parts.append(f"{spec['kind']}({spec['column']}, by={by[0]})")
        else:
            parts.append(f"{spec['kind']}({spec['column']}, by=({','.join(by)}))")
    return "df." + ".".join(parts)


def deepquery(rows: int = 100_000, partitions: int = 10, depth_cols: int = 10, branching: int = 4,
              seed: int = 1, max_depth: int = 6) -> Workload:
    rng = np.random.default_rng(seed)
    names = " ".join(f"c{i}:int64" for i in range(1, depth_cols + 1))
    schema = _schema(f"id:int64 {names} x:int64", ["id"])
    cols = {"id": np.arange(rows, dtype=np.int64)}
    for i in range(1, depth_cols + 1):
        cols[f"c{i}"] = rng.integers(0, branching, rows).astype(np.int64)
    cols["x"] = rng.integers(0, 1_000_000, rows).astype(np.int64)
    queries = {f"depth{d}": deep_query(d) for d in range(0, min(max_depth, depth_cols) + 1)}
    return Workload({"deep": _table("deep", schema, cols, partitions)}, queries)


# --- TPC-H flavoured ------------------------------------------------------------

_TYPES = ["PROMO BRUSHED", "PROMO PLATED", "STANDARD POLISHED", "ECONOMY ANODIZED", "MEDIUM BURNISHED", "LARGE PLATED"]
_NATIONS = ["FRANCE", "GERMANY", "JAPAN", "KENYA", "PERU"]


def tpch(orders: int = 2000, parts: int = 400, customers: int = 200, partitions: int = 10,
         clustered: bool = True, seed: int = 1) -> Workload:
    """Small lineitem/orders/part/customer tables with a few benchmark queries.

    With ``clustered`` lineitem and orders are laid out and clustered by
    order key, which enables merge joins; otherwise lineitem rows are spread
    randomly over partitions (suitable for shuffled replays).
    """
    rng = np.random.default_rng(seed)
    okeys = np.arange(1, orders + 1, dtype=np.int64)
    lines = rng.integers(1, 8, orders)
    l_orderkey = np.repeat(okeys, lines)
    l_linenumber = np.concatenate([np.arange(1, k + 1) for k in lines]).astype(np.int64)
    n = len(l_orderkey)
    li_cols = {
        "l_orderkey": l_orderkey,
        "l_linenumber": l_linenumber,
        # a few part keys have no part row (exercises left joins)
        "l_partkey": rng.integers(1, parts + parts // 10 + 1, n).astype(np.int64),
        "l_quantity": rng.integers(1, 51, n).astype(float),
        "l_extendedprice": np.round(rng.uniform(900.0, 10_000.0, n), 2),
        "l_discount": rng.integers(0, 11, n) / 100.0,
        "l_shipdate": rng.integers(0, 2500, n).astype(np.int64),
        "l_returnflag": np.array(["A", "N", "R"], dtype=object)[rng.integers(0, 3, n)],
    }
    li_spec = ("l_orderkey:int64 l_linenumber:int64 l_partkey:int64 l_quantity:float64 "
               "l_extendedprice:float64 l_discount:float64 l_shipdate:int64 l_returnflag:utf8")
    li_schema = _schema(li_spec, ["l_orderkey", "l_linenumber"], ["l_orderkey"] if clustered else None)
    if not clustered:
        perm = rng.permutation(n)
        li_cols = {k: v[perm] for k, v in li_cols.items()}
    o_schema = _schema("o_orderkey:int64 o_custkey:int64 o_totalprice:float64 o_orderdate:int64",
                       ["o_orderkey"], ["o_orderkey"])
    o_cols = {
        "o_orderkey": okeys,
        "o_custkey": rng.integers(1, customers + 1, orders).astype(np.int64),
        "o_totalprice": np.round(rng.uniform(1_000.0, 400_000.0, orders), 2),
        "o_orderdate": rng.integers(0, 2400, orders).astype(np.int64),
    }
    p_schema = _schema("p_partkey:int64 p_type:utf8 p_size:int64", ["p_partkey"])
    p_cols = {
        "p_partkey": np.arange(1, parts + 1, dtype=np.int64),
        "p_type": np.array(_TYPES, dtype=object)[rng.integers(0, len(_TYPES), parts)],
        "p_size": rng.integers(1, 51, parts).astype(np.int64),
    }
    c_schema = _schema("c_custkey:int64 c_name:utf8 c_nation:utf8", ["c_custkey"])
    c_cols = {
        "c_custkey": np.arange(1, customers + 1, dtype=np.int64),
        "c_name": np.array([f"Customer#{k:06d}" for k in range(1, customers + 1)], dtype=object),
        "c_nation": np.array(_NATIONS, dtype=object)[rng.integers(0, len(_NATIONS), customers)],
    }
    if clustered:
        # partition boundaries on order boundaries so clustering ranges do not straddle
        order_bounds = _even_bounds(orders, partitions)
        li_bounds = [int(np.searchsorted(l_orderkey, okeys[b], side="left")) if b < orders else n
                     for b in order_bounds]
        lineitem = MemoryTable("lineitem", li_schema, _split(li_schema, li_cols, li_bounds))
    else:
        lineitem = _table("lineitem", li_schema, li_cols, partitions)
    tables = {
        "lineitem": lineitem,
        "orders": _table("orders", o_schema, o_cols, partitions),
        "part": _table("part", p_schema, p_cols, 2),
        "customer": _table("customer", c_schema, c_cols, 2),
    }
    queries = {"q1": Q1, "q14": Q14, "q_left": Q_LEFT}
    if clustered:
        queries.update({"q18": Q18, "q_merge": Q_MERGE})
    return Workload(tables, queries)


Q1 = {
    "nodes": [
        {"id": "lineitem", "op": "read", "table": "lineitem"},
        {"id": "shipped", "op": "filter", "inputs": ["lineitem"], "predicate": "l_shipdate <= 2300"},
        {"id": "priced", "op": "map", "inputs": ["shipped"],
         "derive": [{"as": "disc_price", "fn": "revenue", "args": ["l_extendedprice", "l_discount"]}]},
        {"id": "summary", "op": "agg", "inputs": ["priced"], "by": ["l_returnflag"],
         "aggs": [
             {"kind": "sum", "column": "l_quantity", "as": "sum_qty"},
             {"kind": "sum", "column": "disc_price", "as": "sum_disc_price"},
             {"kind": "avg", "column": "l_quantity", "as": "avg_qty"},
             {"kind": "avg", "column": "l_discount", "as": "avg_disc"},
             {"kind": "var", "column": "l_extendedprice", "as": "var_price"},
             {"kind": "stddev", "column": "l_extendedprice", "as": "sd_price"},
             {"kind": "quantile", "column": "l_quantity", "q": 0.9, "as": "p90_qty"},
             {"kind": "count", "as": "count_order"},
         ]},
        {"id": "ordered", "op": "sort_limit", "inputs": ["summary"], "order": ["l_returnflag"]},
    ]
}

Q14 = {
    "nodes": [
        {"id": "lineitem", "op": "read", "table": "lineitem"},
        {"id": "part", "op": "read", "table": "part"},
        {"id": "month", "op": "filter", "inputs": ["lineitem"], "predicate": "l_shipdate >= 300 and l_shipdate < 1300"},
        {"id": "joined", "op": "hash_join", "inputs": ["month", "part"], "on": [["l_partkey", "p_partkey"]]},
        {"id": "flagged", "op": "map", "inputs": ["joined"],
         "derive": [
             {"as": "rev", "fn": "revenue", "args": ["l_extendedprice", "l_discount"]},
             {"as": "is_promo", "fn": "startswith", "args": ["p_type"], "prefix": "PROMO"},
         ]},
        {"id": "share", "op": "agg", "inputs": ["flagged"],
         "aggs": [{"kind": "avg", "column": "is_promo", "weight": "rev", "as": "promo_share"}]},
        {"id": "promo_revenue", "op": "map", "inputs": ["share"],
         "derive": [{"as": "promo_revenue", "fn": "scale", "args": ["promo_share"], "factor": 100.0}],
         "keep": ["promo_revenue"]},
    ]
}

Q18 = {
    "nodes": [
        {"id": "lineitem", "op": "read", "table": "lineitem"},
        {"id": "orders", "op": "read", "table": "orders"},
        {"id": "customer", "op": "read", "table": "customer"},
        {"id": "qty", "op": "agg", "inputs": ["lineitem"], "by": ["l_orderkey"],
         "aggs": [{"kind": "sum", "column": "l_quantity", "as": "sum_qty"}]},
        {"id": "large", "op": "filter", "inputs": ["qty"], "predicate": "sum_qty > 150"},
        {"id": "with_orders", "op": "merge_join", "inputs": ["large", "orders"], "on": [["l_orderkey", "o_orderkey"]]},
        {"id": "with_customer", "op": "hash_join", "inputs": ["with_orders", "customer"],
         "on": [["o_custkey", "c_custkey"]]},
        {"id": "per_nation", "op": "agg", "inputs": ["with_customer"], "by": ["c_nation"],
         "aggs": [{"kind": "sum", "column": "o_totalprice", "as": "total"},
                  {"kind": "sum", "column": "sum_qty", "as": "qty"}]},
        {"id": "top", "op": "sort_limit", "inputs": ["per_nation"], "order": ["-total"], "limit": 3},
    ]
}

Q_MERGE = {
    "nodes": [
        {"id": "lineitem", "op": "read", "table": "lineitem"},
        {"id": "orders", "op": "read", "table": "orders"},
        {"id": "lo", "op": "join", "inputs": ["lineitem", "orders"], "on": [["l_orderkey", "o_orderkey"]]},
        {"id": "bucketed", "op": "map", "inputs": ["lo"],
         "derive": [{"as": "bucket", "fn": "mod", "args": ["o_custkey"], "k": 7},
                    {"as": "rev", "fn": "revenue", "args": ["l_extendedprice", "l_discount"]}]},
        {"id": "per_bucket", "op": "agg", "inputs": ["bucketed"], "by": ["bucket"],
         "aggs": [{"kind": "sum", "column": "rev"},
                  {"kind": "count_distinct", "column": "l_partkey", "as": "parts"},
                  {"kind": "min", "column": "l_shipdate"},
                  {"kind": "max", "column": "l_extendedprice"},
                  {"kind": "quantile", "column": "l_discount", "q": 0.5, "as": "median_disc"}]},
    ]
}

Q_LEFT = {
    "nodes": [
        {"id": "lineitem", "op": "read", "table": "lineitem"},
        {"id": "part", "op": "read", "table": "part"},
        {"id": "lp", "op": "hash_join", "inputs": ["lineitem", "part"], "on": [["l_partkey", "p_partkey"]],
         "how": "left"},
        {"id": "per_flag", "op": "agg", "inputs": ["lp"], "by": ["l_returnflag"],
         "aggs": [{"kind": "count"}, {"kind": "sum", "column": "l_quantity"},
                  {"kind": "count_distinct", "column": "p_type", "as": "types"},
                  {"kind": "min", "column": "l_returnflag", "as": "flag_min"}]},
    ]
}


def joins(rows: int = 3000, partitions: int = 6, seed: int = 1) -> Workload:
    """Fact table with a multi-match dimension (several build rows per key)."""
    rng = np.random.default_rng(seed)
    f_schema = _schema("fid:int64 k:int64 amount:float64 tag:utf8", ["fid"])
    f_cols = {
        "fid": np.arange(rows, dtype=np.int64),
        "k": rng.integers(0, 50, rows).astype(np.int64),
        "amount": np.round(rng.exponential(25.0, rows), 2),
        "tag": np.array(["x", "y", "z"], dtype=object)[rng.integers(0, 3, rows)],
    }
    d_schema = _schema("k:int64 slot:int64 weight:float64", ["k", "slot"])
    dk, ds = np.meshgrid(np.arange(40), np.arange(3), indexing="ij")
    d_cols = {"k": dk.ravel().astype(np.int64), "slot": ds.ravel().astype(np.int64),
              "weight": np.round(rng.uniform(0.5, 2.0, dk.size), 3)}
    query = {
        "nodes": [
            {"id": "fact", "op": "read", "table": "fact"},
            {"id": "dim", "op": "read", "table": "dim"},
            {"id": "xy", "op": "filter", "inputs": ["fact"], "predicate": [["tag", "in", ["x", "y"]]]},
            {"id": "j", "op": "join", "inputs": ["xy", "dim"], "on": "k"},
            {"id": "w", "op": "map", "inputs": ["j"],
             "derive": [{"as": "wamt", "fn": "mul", "args": ["amount", "weight"]}],
             "keep": ["fid", "slot", "tag", "amount", "wamt", "weight"]},
            {"id": "agg", "op": "agg", "inputs": ["w"], "by": ["tag", "slot"],
             "aggs": [{"kind": "avg", "column": "amount", "weight": "weight", "as": "wavg"},
                      {"kind": "sum", "column": "wamt"}, {"kind": "stddev", "column": "amount"},
                      {"kind": "max", "column": "amount"}, {"kind": "min", "column": "wamt"}]},
        ]
    }
    return Workload(
        {"fact": _table("fact", f_schema, f_cols, partitions), "dim": _table("dim", d_schema, d_cols, 1)},
        {"multi_match": query},
    )


GENERATORS = {"demo": demo, "monomial": monomial, "deepquery": deepquery, "tpch": tpch, "joins": joins}
