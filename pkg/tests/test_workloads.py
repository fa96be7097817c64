import filecmp

import pytest

from olaflow import workloads
from olaflow.cli import main
from olaflow.executor import build_graph
from olaflow.ingest import iter_partitions
from olaflow.operators import EOF, Message, NodeRunner, make_node


def fitted_power(wl, query):
    """Feed the workload's first aggregation node and return its growth fit."""
    graph = build_graph(query, wl.tables)
    agg_id = next(i for i in graph.order if graph.resolved[i] == "agg")
    spec = graph.nodes[agg_id]
    node = make_node(agg_id, "agg", spec.params, [graph.schemas[spec.inputs[0]]], ["append"])
    runner = NodeRunner(node)
    table = next(iter(wl.tables.values()))
    for index, batch, progress in iter_partitions(table):
        runner.feed(0, Message(batch, progress, index))
    runner.feed(0, EOF)
    return node.growth.fit_power()


@pytest.mark.parametrize("u,v,w", [(1.0, 0.0, 1.0), (1.0, 0.5, 0.5), (2.0, 0.0, 1.0), (1.0, 1.0, 0.0)])
def test_monomial_growth(u, v, w):
    wl = workloads.monomial(u=u, v=v, groups=50, partitions=10, rows=50_000)
    fitted, var_w = fitted_power(wl, wl.queries["count_sum_by_group"])
    assert fitted == pytest.approx(w, abs=0.05)
    assert var_w >= 0


def test_monomial_progress_follows_u():
    wl = workloads.monomial(u=2.0, v=0.0, partitions=10, rows=10_000)
    table = wl.tables["mono"]
    ts = [p.t for _, _, p in iter_partitions(table)]
    assert ts[4] == pytest.approx(0.25, abs=0.01) and ts[-1] == 1.0


def test_monomial_validation():
    with pytest.raises(ValueError):
        workloads.monomial(u=1.0, v=2.0)
    with pytest.raises(ValueError):
        workloads.monomial(rows=5, groups=20)


def test_deep_query_text():
    assert workloads.deep_query_text(2) == "df.max(x, by=(c1,c2)).sum(max_x, by=c1).sum(sum_max_x)"
    assert workloads.deep_query_text(0) == "df.max(x)"
    assert workloads.deep_query_text(1) == "df.max(x, by=c1).sum(max_x)"
    assert workloads.deep_query_text(3).startswith("df.max(x, by=(c1,c2,c3)).sum(max_x, by=(c1,c2)).max(")


def test_deep_query_shape():
    q = workloads.deep_query(4)
    aggs = [n for n in q["nodes"] if n["op"] == "agg"]
    assert [len(n["by"]) for n in aggs] == [4, 3, 2, 1, 0]
    assert [n["aggs"][0]["kind"] for n in aggs] == ["max", "sum", "max", "sum", "sum"]
    wl = workloads.deepquery(rows=1000, partitions=5)
    assert sorted(wl.queries) == [f"depth{d}" for d in range(7)]
    assert wl.tables["deep"].schema.names[1:11] == [f"c{i}" for i in range(1, 11)]


def test_gen_is_byte_identical(tmp_path, capsys):
    for out in ("a", "b"):
        assert main(["gen", "deepquery", str(tmp_path / out), "--seed", "4", "-p", "rows=3000"]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert filecmp.cmp(tmp_path / "a" / "deep" / "part-00003.csv", tmp_path / "b" / "deep" / "part-00003.csv",
                       shallow=False)
    assert main(["gen", "deepquery", str(tmp_path / "c"), "--seed", "5", "-p", "rows=3000"]) == 0
    assert not filecmp.cmp(tmp_path / "a" / "deep" / "part-00000.csv", tmp_path / "c" / "deep" / "part-00000.csv",
                           shallow=False)


@pytest.mark.parametrize("kind", sorted(workloads.GENERATORS))
def test_generated_queries_validate(kind):
    params = {"deepquery": {"rows": 2000}, "tpch": {"orders": 200}}.get(kind, {})
    wl = workloads.GENERATORS[kind](**params)
    for query in wl.queries.values():
        build_graph(query, wl.tables)
