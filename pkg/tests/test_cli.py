import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from oracles import pava_objective
from stagewise import io
from stagewise.cli import (BENCH_COLUMNS, EXIT_DATA, EXIT_ITERATION_LIMIT, EXIT_OK, EXIT_USAGE,
                           TRACE_HEADER, bench_rows, format_table, main)
from stagewise.instances import DenseLayer, NetworkSpec, VerificationQuery, network_forward
from stagewise.optim import SolveConfig


@pytest.fixture
def fixtures(tmp_path):
    assert main(["gen", str(tmp_path / "fx"), "--seed", "1", "--hidden", "6", "--isotonic-n", "8"]) == 0
    return tmp_path / "fx"


def _json(path):
    return json.loads(path.read_text())


def test_solve_chain(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["solve", "--instance", "chain:3", "--emit-json", str(out)]) == EXIT_OK
    assert _json(out)["primal"] == pytest.approx(-1.0, abs=1e-6)
    assert "primal=-1" in capsys.readouterr().out


def test_solve_parabola(tmp_path):
    out = tmp_path / "r.json"
    assert main(["solve", "--instance", "parabola", "--epsilon-gap", "1e-8", "--rel-gap", "0",
                 "--emit-json", str(out)]) == EXIT_OK
    assert _json(out)["primal"] == pytest.approx(-1.0, abs=1e-6)


def test_simple_stalls_where_safe_converges(tmp_path):
    args = ["solve", "--instance", "parabola", "--start-s", "1", "--start-theta", "0.75", "--rel-gap", "0"]
    assert main(args + ["--solver", "simple"]) == EXIT_ITERATION_LIMIT
    assert main(args + ["--no-escape"]) == EXIT_ITERATION_LIMIT
    out = tmp_path / "safe.json"
    assert main(args + ["--solver", "safe", "--emit-json", str(out)]) == EXIT_OK
    doc = _json(out)
    assert doc["primal"] == pytest.approx(-1.0, abs=1e-6) and doc["fixdeg_calls"] >= 1


def test_solve_isotonic_matches_pava(fixtures, tmp_path):
    out = tmp_path / "iso.json"
    code = main(["solve", "--instance", f"isotonic:{fixtures / 'isotonic.json'}", "--max-iters", "1500",
                 "--epsilon-gap", "1e-4", "--rel-gap", "0", "--emit-json", str(out)])
    doc = _json(out)
    spec = io.load_isotonic(fixtures / "isotonic.json")
    exact = pava_objective(spec.y, spec.l, spec.u)
    bound = spec.temperature * spec.n * np.log(spec.n + 1)
    assert code == EXIT_OK
    assert doc["dual"] <= exact + 1e-9
    assert abs(doc["primal"] - exact) <= bound


def test_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    assert main(["solve", "--instance", "chain:4", "--emit-trace", str(path)]) == EXIT_OK
    rows = list(csv.reader(path.open()))
    assert rows[0] == TRACE_HEADER == ["iter", "primal", "dual", "gap", "step", "wall_ms", "fixdeg"]
    assert len(rows) >= 2
    assert [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))
    for r in rows[1:]:
        float(r[1]), float(r[2]), float(r[3]), float(r[5])
        assert r[6] in ("0", "1")


def test_verify_writes_one_trace_per_target(fixtures, tmp_path, capsys):
    trace = tmp_path / "t.csv"
    out = tmp_path / "v.json"
    code = main(["verify", str(fixtures / "network.json"), str(fixtures / "query.json"),
                 "--emit-trace", str(trace), "--emit-json", str(out)])
    doc = _json(out)
    assert code in (EXIT_OK, EXIT_ITERATION_LIMIT)
    targets = [r["target"] for r in doc["records"]]
    assert targets == sorted(targets) and len(targets) == 2 and doc["true_label"] not in targets
    for t in targets:
        assert (tmp_path / f"t.target{t}.csv").exists()
    assert doc["verdict"] == ("ROBUST" if all(r["dual"] > 0 for r in doc["records"]) else "UNKNOWN")
    for r in doc["records"]:
        assert r["dual"] >= r["ibp_bound"] - 1e-9
    assert f"verdict: {doc['verdict']}" in capsys.readouterr().out


@pytest.mark.parametrize("bias, expected", [(0.3, "ROBUST"), (-0.8, "UNKNOWN")])
def test_point_query_verdict_follows_clean_margin(tmp_path, bias, expected):
    net = NetworkSpec((DenseLayer([[1.0, 0.5], [-0.5, 1.0]], [0.1, 0.0], "relu"),
                       DenseLayer([[1.0, 0.0], [0.0, 1.0]], [bias, 0.0], "none")), 2)
    query = VerificationQuery([0.4, 0.4], 0.0, 0)
    io.save_network(net, tmp_path / "n.json")
    io.save_query(query, tmp_path / "q.json")
    margin = np.subtract(*network_forward(net, query.center)[0])
    assert (margin > 0) == (expected == "ROBUST")
    out = tmp_path / "v.json"
    assert main(["verify", str(tmp_path / "n.json"), str(tmp_path / "q.json"), "--emit-json", str(out)]) == EXIT_OK
    doc = _json(out)
    assert doc["verdict"] == expected
    assert doc["records"][0]["dual"] == pytest.approx(margin, abs=1e-6)


def test_single_target_flag(fixtures, tmp_path):
    query = io.load_query(fixtures / "query.json")
    target = (query.true_label + 1) % 3
    out, trace = tmp_path / "v.json", tmp_path / "t.csv"
    main(["verify", str(fixtures / "network.json"), str(fixtures / "query.json"), "--target", str(target),
          "--emit-json", str(out), "--emit-trace", str(trace)])
    assert [r["target"] for r in _json(out)["records"]] == [target]
    assert trace.exists()


def test_bench_table(fixtures, tmp_path, capsys):
    table = tmp_path / "bench.csv"
    assert main(["bench", str(fixtures / "suite.json"), "--csv", str(table), "--max-iters", "30"]) == EXIT_OK
    rows = list(csv.DictReader(table.open()))
    assert len(rows) == 10 and list(rows[0]) == BENCH_COLUMNS
    for r in rows:
        assert float(r["runtime_ms"]) > 0
        assert 0.0 <= float(r["early_stop_pct"]) <= 100.0
        assert float(r["avg_iters"]) <= 30
        assert float(r["avg_bound"]) >= float(r["avg_ibp_bound"]) - 1e-9
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].split() == BENCH_COLUMNS and len(printed) == 11


def test_bench_is_deterministic():
    suite = io.BenchSuite(count=3, input_dim=2, hidden=(4,), seed=5)
    a = bench_rows(suite, SolveConfig(max_iters=10))
    b = bench_rows(suite, SolveConfig(max_iters=10))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "runtime_ms"} for r in rows]
    assert strip(a) == strip(b)
    assert len(format_table(a).splitlines()) == 4


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["solve"]) == EXIT_USAGE
    assert main(["solve", "--instance", "cube:3"]) == EXIT_USAGE
    assert main(["solve", "--instance", "chain:x"]) == EXIT_USAGE
    assert main(["solve", "--instance", "parabola", "--start-theta", "2"]) == EXIT_USAGE
    assert main(["solve", "--instance", "parabola", "--solver", "fast"]) == EXIT_USAGE
    assert main(["verify", "missing.json", "missing.json"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_data_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"input_dim": 2, "layers": [{"weights": [[1, 2]], "bias": [0, 1]}]}')
    assert main(["verify", str(bad), str(bad)]) == EXIT_DATA
    assert "layers[0].bias" in capsys.readouterr().err
    bad.write_text("{ nope")
    assert main(["solve", "--instance", f"isotonic:{bad}"]) == EXIT_DATA
    assert "line 1" in capsys.readouterr().err


def test_invalid_target_is_usage_error(fixtures):
    query = io.load_query(fixtures / "query.json")
    args = ["verify", str(fixtures / "network.json"), str(fixtures / "query.json")]
    assert main(args + ["--target", str(query.true_label)]) == EXIT_USAGE
    assert main(args + ["--target", "9"]) == EXIT_USAGE


def test_log_levels(monkeypatch, capsys):
    monkeypatch.setenv("STAGEWISE_LOG", "info")
    assert main(["solve", "--instance", "chain:3"]) == EXIT_OK
    assert "INFO stagewise" in capsys.readouterr().err
    monkeypatch.setenv("STAGEWISE_LOG", "off")
    assert main(["solve", "--instance", "chain:3"]) == EXIT_OK
    assert capsys.readouterr().err == ""
    monkeypatch.setenv("STAGEWISE_LOG", "loud")
    assert main(["solve", "--instance", "chain:3"]) == EXIT_USAGE


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "stagewise", "solve", "--instance", "chain:3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "primal=-1" in proc.stdout
