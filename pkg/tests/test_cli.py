import json
import math
import shutil
import subprocess

import pytest

from olaflow.cli import main
from olaflow.scoring import ScoreError, score_rows, score_stream


@pytest.fixture
def demo_dir(tmp_path):
    assert main(["gen", "demo", str(tmp_path)]) == 0
    return tmp_path


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def lines(out):
    return [json.loads(line) for line in out.splitlines() if line.strip()]


def test_run_count_by_state(demo_dir, capsys):
    capsys.readouterr()
    code, out, _ = run_cli(capsys, "run", str(demo_dir / "count_by_state.json"), str(demo_dir))
    snaps = lines(out)
    assert code == 0 and len(snaps) == 4
    assert list(snaps[0])[:8] == ["index", "t", "done", "total", "wall_ms", "primary_key", "columns", "rows"]
    assert snaps[-1]["t"] == 1.0
    code, out, _ = run_cli(capsys, "exact", str(demo_dir / "count_by_state.json"), str(demo_dir))
    exact = json.loads(out)
    assert snaps[-1]["rows"] == exact["rows"]
    assert all(lo == hi for ci in snaps[-1]["ci"] for lo, hi in ci.values())


def test_seed_shuffles_deterministically(demo_dir, capsys):
    capsys.readouterr()
    q, d = str(demo_dir / "count_by_state.json"), str(demo_dir)
    runs = [lines(run_cli(capsys, "run", q, d, "--seed", s)[1]) for s in ("3", "3", "4")]
    strip = lambda snaps: [{k: v for k, v in s.items() if k != "wall_ms"} for s in snaps]
    assert strip(runs[0]) == strip(runs[1])
    assert strip(runs[0]) != strip(runs[2])
    assert runs[0][-1]["rows"] == runs[2][-1]["rows"]


def test_explicit_order_and_sequential(demo_dir, capsys):
    capsys.readouterr()
    q, d = str(demo_dir / "count_by_state.json"), str(demo_dir)
    a = lines(run_cli(capsys, "run", q, d, "--partition-order", "3,2,1,0")[1])
    b = lines(run_cli(capsys, "run", q, d, "--partition-order", "sales=3,2,1,0", "--sequential")[1])
    assert [s["rows"] for s in a] == [s["rows"] for s in b]


def test_trace_file(demo_dir, capsys, tmp_path):
    capsys.readouterr()
    trace = tmp_path / "trace.tsv"
    code, _, _ = run_cli(capsys, "run", str(demo_dir / "count_by_state.json"), str(demo_dir), "--trace", str(trace))
    rows = trace.read_text().splitlines()
    assert code == 0 and rows[0].split("\t") == ["node", "start_ms", "end_ms", "partition"]
    assert {r.split("\t")[0] for r in rows[1:]} == {"sales", "by_state"}


def test_score_round_trip(demo_dir, capsys, tmp_path):
    capsys.readouterr()
    q, d = str(demo_dir / "count_by_state.json"), str(demo_dir)
    (tmp_path / "snaps.jsonl").write_text(run_cli(capsys, "run", q, d)[1])
    (tmp_path / "exact.json").write_text(run_cli(capsys, "exact", q, d)[1])
    code, out, _ = run_cli(capsys, "score", str(tmp_path / "snaps.jsonl"), str(tmp_path / "exact.json"))
    reports = lines(out)
    assert code == 0 and len(reports) == 4
    last = reports[-1]
    assert (last["mape"], last["mae"], last["recall"], last["precision"]) == (0.0, 0.0, 1.0, 1.0)


@pytest.mark.parametrize("argv,code", [
    (["run", "missing.json", "."], 2),
    (["run", "{q}", "{d}", "--ci-level", "1.5"], 2),
    (["run", "{q}", "{d}", "--partition-order", "0,1"], 2),
    (["run", "{q}", "{d}", "--partition-order", "nope=0,1,2,3"], 2),
    (["gen", "demo", "{tmp}", "-p", "bogus=1"], 2),
    (["gen", "demo", "{tmp}", "-p", "noequals"], 2),
])
def test_exit_codes(demo_dir, capsys, tmp_path, argv, code):
    fill = {"q": str(demo_dir / "count_by_state.json"), "d": str(demo_dir), "tmp": str(tmp_path / "g")}
    got, _, err = run_cli(capsys, *[a.format(**fill) for a in argv])
    assert got == code and err.startswith("olaflow:")


def test_invalid_graph_exit_code(demo_dir, capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [{"id": "r", "op": "read", "table": "sales"},
                                         {"id": "j", "op": "join", "inputs": ["r"], "on": "id"}]}))
    assert run_cli(capsys, "run", str(bad), str(demo_dir))[0] == 2


def test_runtime_failure_exit_code(demo_dir, capsys):
    csv = demo_dir / "sales" / "part-00002.csv"
    text = csv.read_text().splitlines()
    csv.write_text("\n".join(text[:-1]) + "\n")  # one row short of the metadata
    code, _, err = run_cli(capsys, "run", str(demo_dir / "count_by_state.json"), str(demo_dir))
    assert code == 3 and "declares" in err


@pytest.mark.skipif(shutil.which("olaflow") is None, reason="console script not installed")
def test_console_script(demo_dir):
    proc = subprocess.run(["olaflow", "run", str(demo_dir / "count_by_state.json"), str(demo_dir)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and len(proc.stdout.splitlines()) == 4
    proc = subprocess.run(["olaflow", "run", "nothing.json", "."], capture_output=True, text=True)
    assert proc.returncode == 2


# --- scoring ------------------------------------------------------------------

EXACT = [{"g": "a", "v": 10.0}, {"g": "b", "v": 20.0}, {"g": "c", "v": 0.0}, {"g": "d", "v": -5.0}]


def test_score_exact():
    r = score_rows(EXACT, EXACT, ["g"])
    assert (r.mape, r.mae, r.recall, r.precision, r.zero_cells) == (0.0, 0.0, 1.0, 1.0, 1)


def test_score_ten_percent():
    est = [{"g": e["g"], "v": e["v"] * 1.1} for e in EXACT]
    r = score_rows(est, EXACT, ["g"])
    assert math.isclose(r.mape, 0.1, rel_tol=1e-12)
    assert math.isclose(r.mae, (1 + 2 + 0 + 0.5) / 4, rel_tol=1e-12)


def test_score_half_recall():
    r = score_rows(EXACT[:2], EXACT, ["g"])
    assert (r.recall, r.precision) == (0.5, 1.0)
    extra = score_rows(EXACT + [{"g": "zz", "v": 1.0}], EXACT, ["g"])
    assert extra.precision == 0.8


def test_score_scalar_and_empty():
    assert score_rows([{"v": 3.0}], [{"v": 3.0}], []).recall == 1.0
    empty = score_rows([], [], ["g"])
    assert (empty.recall, empty.precision, empty.mape) == (1.0, 1.0, None)


def test_score_mismatches():
    with pytest.raises(ScoreError):
        score_rows([{"g": "a", "w": 1.0}], EXACT, ["g"])
    with pytest.raises(ScoreError):
        score_stream([{"index": 0, "t": 1.0, "primary_key": ["h"], "rows": []}], {"primary_key": ["g"], "rows": []})


def test_score_is_pure():
    est = [{"g": "a", "v": 12.0}]
    assert score_rows(est, EXACT, ["g"]) == score_rows(est, EXACT, ["g"])
