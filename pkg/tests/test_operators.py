import itertools
import math

import numpy as np
import pytest

from olaflow.edf import RowBatch, SchemaError
from olaflow.operators import (
    AggSpec,
    AggState,
    ColumnMap,
    JoinOrderError,
    JoinSpec,
    MergeJoinState,
    OperatorClass,
    Predicate,
    apply_filter,
    apply_map,
    classify,
    hash_join,
    key_rules,
    merge_agg,
    merge_join,
    merge_join_batches,
    sort_limit,
    to_extrinsic,
)
from olaflow.operators.aggregate import output_schema
from olaflow.operators.relational import join_schema, parse_order

from conftest import make_schema
from merge_cases import KINDS, check_case

STATES = make_schema("state:utf8,amount:float64", pk=())
LINES = make_schema("id:int64,price:float64,disc:float64,qty:int64", pk=("id",))


def lines(rng, n=30):
    return RowBatch(LINES, {
        "id": np.arange(n),
        "price": rng.uniform(1, 100, n),
        "disc": rng.uniform(0, 0.1, n),
        "qty": rng.integers(0, 600, n),
    })


# --- map / filter ---------------------------------------------------------

def test_map_identity_and_projection(rng):
    b = lines(rng)
    assert apply_map(b, lambda x: x).equals(b)
    proj = ColumnMap.parse({"keep": ["id", "price"]})
    out = apply_map(b, proj)
    assert out.schema.names == ["id", "price"] and out.row_count == b.row_count
    with pytest.raises(SchemaError):
        ColumnMap.parse({"keep": ["price"]}).output_schema(LINES)


def test_map_derived_column(rng):
    b = lines(rng, 3)
    f = ColumnMap.parse({"derive": [{"as": "rev", "fn": "revenue", "args": ["price", "disc"]}]})
    out = apply_map([b.take([0]), b.take([1, 2])], f)
    for (_, price, disc, _), rev in zip(b.to_rows(), out["rev"]):
        assert rev == price * (1 - disc)
    assert not out.schema.attr("rev").mutable


def test_map_propagates_variance():
    s = make_schema("k:utf8,x:float64:mutable", pk=("k",))
    b = RowBatch(s, {"k": ["a", "b"], "x": [3.0, 0.0]}, variance={"x": [1.0, 1.0]})
    out = ColumnMap.parse({"derive": [{"as": "sq", "fn": "square", "args": ["x"]},
                                      {"as": "mag", "fn": "abs", "args": ["x"]}]})(b)
    assert out.schema.attr("sq").mutable
    assert out.variance["sq"][0] == pytest.approx(36.0, rel=1e-6)
    assert list(out.unstable["mag"]) == [False, True]


def test_filter_examples(rng):
    b = lines(rng, 200)
    assert apply_filter(b, lambda x: np.ones(x.row_count, bool)).equals(b)
    assert apply_filter(b, "qty < 0").row_count == 0
    out = apply_filter(b, "qty > 300")
    assert out.to_rows() == [r for r in b.to_rows() if r[3] > 300]
    both = apply_filter(b, [("qty", ">", 100), ("price", "<=", 50.0)])
    assert both.to_rows() == [r for r in b.to_rows() if r[3] > 100 and r[1] <= 50.0]


def test_predicate_parsing():
    p = Predicate.parse("kind == 'x' and n >= 3")
    assert p.columns == {"kind", "n"}
    assert p.row_matches({"kind": "x", "n": 3}) and not p.row_matches({"kind": "y", "n": 3})
    assert Predicate.parse("c in ('a', 'b')").row_matches({"c": "b"})
    with pytest.raises(SchemaError):
        Predicate.parse("n >>> 3")


# --- joins ------------------------------------------------------------------

PROBE = make_schema("pid:int64,k:int64,a:float64", pk=("pid",))
BUILD = make_schema("bid:int64,k:int64,b:utf8", pk=("bid",))


def nested_loop(probe, build, how="inner"):
    out = []
    for p in probe.to_rows():
        hits = [b for b in build.to_rows() if b[1] == p[1]]
        out.extend(p + (b[0], b[2]) for b in hits)
        if not hits and how == "left":
            out.append(p + (0, ""))
    return sorted(out)


def random_sides(rng, n=100, m=100, keys=30):
    probe = RowBatch(PROBE, {"pid": np.arange(n), "k": rng.integers(0, keys, n), "a": rng.normal(size=n)})
    build = RowBatch(BUILD, {"bid": np.arange(m), "k": rng.integers(0, keys, m),
                             "b": [f"s{i}" for i in rng.integers(0, 9, m)]})
    return probe, build


def test_hash_join_trivial():
    spec = JoinSpec.parse({"on": "k"})
    probe = RowBatch.from_rows(PROBE, [(1, 7, 0.5)])
    build = RowBatch.from_rows(BUILD, [(9, 7, "x")])
    assert hash_join(probe, build, spec).to_rows() == [(1, 7, 0.5, 9, "x")]
    assert hash_join(RowBatch.empty(PROBE), build, spec).row_count == 0


@pytest.mark.parametrize("how", ["inner", "left"])
def test_hash_join_matches_nested_loop(rng, how):
    probe, build = random_sides(rng)
    out = hash_join(probe, build, JoinSpec.parse({"on": "k", "how": how}))
    assert sorted(out.to_rows()) == nested_loop(probe, build, how)
    assert out.schema.primary_key == ("pid", "bid")
    if how == "left":
        absent = ~out.valid["b"]
        assert absent.sum() == sum(1 for r in nested_loop(probe, build, how) if r[-1] == "")


def test_merge_join_batches_matches_nested_loop(rng):
    probe, build = random_sides(rng)
    out = merge_join_batches(probe, build, JoinSpec.parse({"on": "k"}))
    assert sorted(out.to_rows()) == nested_loop(probe, build)
    left = merge_join_batches(probe, build, JoinSpec.parse({"on": "k", "how": "left"}))
    assert sorted(left.to_rows()) == nested_loop(probe, build, "left")


def clustered_stream(batch, key, parts):
    order = np.argsort(batch[key], kind="stable")
    batch = batch.take(order)
    bounds = np.linspace(0, batch.row_count, parts + 1).astype(int)
    # keep equal keys inside one partition
    cut = [0]
    for b in bounds[1:-1]:
        while 0 < b < batch.row_count and batch[key][b] == batch[key][b - 1]:
            b += 1
        cut.append(max(b, cut[-1]))
    cut.append(batch.row_count)
    return [batch.take(np.arange(lo, hi)) for lo, hi in zip(cut, cut[1:])]


def test_streaming_merge_join(rng):
    probe, build = random_sides(rng, 200, 150, 60)
    spec = JoinSpec.parse({"on": "k"})
    parts = list(merge_join(clustered_stream(probe, "k", 7), clustered_stream(build, "k", 4), spec))
    got = sorted(itertools.chain.from_iterable(p.to_rows() for p in parts))
    assert got == sorted(hash_join(probe, build, spec).to_rows()) == nested_loop(probe, build)


def test_merge_join_bounded_buffer(rng):
    n = 1000
    probe = RowBatch(PROBE, {"pid": np.arange(n), "k": np.arange(n), "a": np.zeros(n)})
    build = RowBatch(BUILD, {"bid": np.arange(n), "k": np.arange(n), "b": ["x"] * n})
    state = MergeJoinState(JoinSpec.parse({"on": "k"}), join_schema(PROBE, BUILD, JoinSpec.parse({"on": "k"})))
    peak = 0
    for lp, bp in zip(clustered_stream(probe, "k", 10), clustered_stream(build, "k", 10)):
        state.push(0, lp)
        state.push(1, bp)
        peak = max(peak, state.buffered_rows)
    assert peak <= 2 * 100


def test_merge_join_disjoint_ranges():
    spec = JoinSpec.parse({"on": "k"})
    probe = RowBatch.from_rows(PROBE, [(1, 1, 0.0), (2, 2, 0.0)])
    build = RowBatch.from_rows(BUILD, [(1, 5, "x"), (2, 6, "y")])
    assert sum(p.row_count for p in merge_join([probe], [build], spec)) == 0


def test_merge_join_out_of_order():
    spec = JoinSpec.parse({"on": "k"})
    state = MergeJoinState(spec, join_schema(PROBE, BUILD, spec))
    state.push(0, RowBatch.from_rows(PROBE, [(1, 5, 0.0)]))
    with pytest.raises(JoinOrderError):
        state.push(0, RowBatch.from_rows(PROBE, [(2, 3, 0.0)]))


def test_join_method_selection():
    p = PROBE.with_keys(("pid",), ("k",))
    b = BUILD.with_keys(("bid",), ("k",))
    spec = JoinSpec.parse({"on": "k"})
    assert spec.resolve(p, b).method == "merge"
    assert spec.resolve(PROBE, b).method == "hash"
    with pytest.raises(SchemaError):
        JoinSpec.parse({"on": "k", "method": "merge"}).resolve(PROBE, BUILD)
    clash = make_schema("bid:int64,k:int64,a:float64", pk=("bid",))
    with pytest.raises(SchemaError):
        join_schema(PROBE, clash, spec)


# --- aggregation ------------------------------------------------------------

COUNT = AggSpec.parse({"kind": "count", "as": "n"})


def counts(*rows):
    return AggState.from_batch(RowBatch.from_rows(STATES, [(s, 0.0) for s in rows]), ("state",), (COUNT,))


def as_dict(state, name="n"):
    return dict(zip(state.keys["state"].tolist(), state.values()[name].tolist()))


def test_merge_count_example():
    merged = merge_agg(counts("IL", "IL", "MI"), counts("IL", "MI"))
    assert as_dict(merged) == {"IL": 3, "MI": 2}


def test_merge_identity():
    acc = counts("IL", "MI", "MI")
    empty = AggState.from_batch(RowBatch.empty(STATES), ("state",), (COUNT,))
    assert as_dict(merge_agg(acc, empty)) == as_dict(acc)
    assert as_dict(merge_agg(empty, acc)) == as_dict(acc)


def test_merge_kind_mismatch():
    other = AggState.from_batch(RowBatch.from_rows(STATES, [("IL", 1.0)]), ("state",),
                                (AggSpec.parse({"kind": "sum", "column": "amount"}),))
    with pytest.raises(ValueError):
        merge_agg(counts("IL"), other)


@pytest.mark.parametrize("kind", KINDS)
def test_merge_equals_direct_aggregation(kind):
    rng = np.random.default_rng(sum(map(ord, kind)))
    assert all(check_case(kind, rng) for _ in range(100))


def test_to_extrinsic_scales_counts():
    state = counts("IL", "IL", "IL", "MI", "MI")
    schema = output_schema(STATES, ("state",), (COUNT,))
    out = to_extrinsic(state, schema, 0.2, 1.0, 0.0)
    assert out.to_rows() == [("IL", 15.0), ("MI", 10.0)]
    final = to_extrinsic(state, schema, 1.0, 1.7, math.inf)
    assert final.to_rows() == [("IL", 3.0), ("MI", 2.0)]
    assert list(final.variance["n"]) == [0.0, 0.0]


def test_to_extrinsic_sum():
    rows = [("IL", 10.0)] * 3
    spec = AggSpec.parse({"kind": "sum", "column": "amount", "as": "s"})
    state = AggState.from_batch(RowBatch.from_rows(STATES, rows), ("state",), (spec,))
    out = to_extrinsic(state, output_schema(STATES, ("state",), (spec,)), 0.1, 1.0, 0.0)
    assert out["s"][0] == pytest.approx(300.0)


def test_final_variances_vanish(rng):
    specs = tuple(AggSpec.parse(d) for d in (
        {"kind": "count"}, {"kind": "sum", "column": "amount"}, {"kind": "avg", "column": "amount"},
        {"kind": "var", "column": "amount"}, {"kind": "min", "column": "amount"},
        {"kind": "count_distinct", "column": "amount"}, {"kind": "quantile", "column": "amount", "q": 0.9}))
    rows = [(str(s), float(v)) for s, v in zip(rng.choice(["a", "b"], 100), rng.integers(0, 20, 100))]
    state = AggState.from_batch(RowBatch.from_rows(STATES, rows), ("state",), specs)
    out = to_extrinsic(state, output_schema(STATES, ("state",), specs), 1.0, 1.0, 0.0)
    assert all(np.all(v == 0) for v in out.variance.values())
    mid = to_extrinsic(state, output_schema(STATES, ("state",), specs), 0.4, 1.0, 0.01)
    assert all(np.all(v >= 0) for v in mid.variance.values())


# --- sort / limit, keys, classes --------------------------------------------

def test_sort_limit(rng):
    b = lines(rng, 50)
    assert sort_limit(b, parse_order(["-price"]), 100).row_count == 50
    assert sort_limit(b, parse_order("price"), 0).row_count == 0
    top = sort_limit(b, parse_order(["-qty", "id"]), 5)
    oracle = sorted(b.to_rows(), key=lambda r: (-r[3], r[0]))[:5]
    assert top.to_rows() == oracle
    assert parse_order(["-a", ["b", False]]) == (("a", True), ("b", False))


def test_key_rules():
    sales = make_schema("id:int64,name:utf8,amount:float64", pk=("id",), ck=("id",))
    assert key_rules("agg", [sales], by=("name",)) == (("name",), None)
    assert key_rules("filter", [sales]) == (("id",), ("id",))
    orders = make_schema("id:int64,cust:int64", pk=("id",), ck=("id",))
    assert key_rules("join", [sales, orders], spec=JoinSpec.parse({"on": "id"})) == (("id",), ("id",))


def test_classify():
    s = make_schema("id:int64,name:utf8,n:float64:mutable", pk=("id",), ck=("id",))
    assert classify("agg", [s], {"by": ["name"]}) is OperatorClass.SHUFFLE_WITH_INFERENCE
    assert classify("agg", [s], {"by": ["id"]}) is OperatorClass.ORDER_PRESERVING_LOCAL
    assert classify("sort_limit", [s]) is OperatorClass.SHUFFLE_WITHOUT_INFERENCE
    assert classify("filter", [s], {"predicate": "name == 'x'"}) is OperatorClass.ORDER_PRESERVING_LOCAL
    assert classify("filter", [s], {"predicate": "n > 1"}) is OperatorClass.SHUFFLE_WITHOUT_INFERENCE
    assert classify("join", [LINES, PROBE]) is OperatorClass.ORDER_PRESERVING_LOCAL
