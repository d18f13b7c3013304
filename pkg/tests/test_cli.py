import csv
import json
import logging

import pytest

from schemagm import cli
from schemagm.engine import NumericError


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--rows", "users=30", "--rows", "movies=20", "--rows", "ratings=400",
               "--mask", "0.1", "--seed", "2", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fitted(synth_dir, tmp_path_factory):
    post = tmp_path_factory.mktemp("fit") / "post.json"
    assert run("fit", "--schema", synth_dir / "schema.sql", "--data", synth_dir, "--out", post,
               "--sweeps", "30", "--seed", "7") == 0
    return post


def test_compile_describes(fixtures, capsys, tmp_path):
    assert run("compile", "--schema", fixtures / "umr.sql", "--config", fixtures / "umr_config.json",
               "--out", tmp_path / "spec.json") == 0
    out = capsys.readouterr().out
    assert "total gate CPT cells: 67" in out
    assert json.loads((tmp_path / "spec.json").read_text())["spec_version"] == 1


def test_fit_writes_trace_and_is_deterministic(synth_dir, fitted, tmp_path, caplog):
    again = tmp_path / "again.json"
    with caplog.at_level(logging.INFO, logger="schemagm"):
        assert run("fit", "--schema", synth_dir / "schema.sql", "--data", synth_dir, "--out", again,
                   "--sweeps", "30", "--seed", "7") == 0
    assert again.read_bytes() == fitted.read_bytes()


def test_predict_covers_truth(synth_dir, fitted, tmp_path):
    out = tmp_path / "pred.csv"
    assert run("predict", "--model", fitted, "--data", synth_dir, "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    with open(synth_dir / "truth.csv") as fh:
        truth = list(csv.DictReader(fh))
    assert {(r["table"], r["row"], r["column"]) for r in rows} == {(t["table"], t["row"], t["column"]) for t in truth}
    assert all(json.loads(r["payload"]) for r in rows)
    second = tmp_path / "pred2.csv"
    run("predict", "--model", fitted, "--data", synth_dir, "--out", second)
    assert out.read_bytes() == second.read_bytes()


def test_query_and_cluster(fitted, tmp_path, capsys):
    q = tmp_path / "q.json"
    q.write_text(json.dumps([{"table": "ratings", "id": "new",
                              "bindings": {"user_id": {"ref": "1"}, "movie_id": {"ref": "2"}, "score": None}}]))
    capsys.readouterr()
    assert run("query", "--model", fitted, "--query", q, "--iters", "20") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "table,id,column,kind,payload"
    assert lines[1].startswith("ratings,new,score,real,")
    assert run("cluster", "--model", fitted, "--table", "users") == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "row,component,probability" and len(rows) == 31


def test_no_resp(synth_dir, tmp_path):
    post = tmp_path / "small.json"
    assert run("fit", "--schema", synth_dir / "schema.sql", "--data", synth_dir, "--out", post,
               "--sweeps", "3", "--no-resp") == 0
    assert "resp" not in json.loads(post.read_text())["tables"]["users"]
    assert run("predict", "--model", post, "--data", synth_dir) == 2


def test_bench_scaling(tmp_path):
    out = tmp_path / "scaling.csv"
    assert run("bench", "scaling", "--rows", "300,600,900", "--sweeps", "2", "--seed", "1", "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["rows", "K", "seconds_per_sweep"] and len(rows) == 7


def test_bench_h2h(tmp_path):
    out = tmp_path / "h2h.csv"
    assert run("bench", "h2h", "--players", "24", "--matches", "300", "--out", out) == 0
    assert out.read_text().startswith("seed,cluster_i,cluster_j,mean_result\n")


@pytest.mark.parametrize("argv", [[], ["fit", "--bogus"], ["nosuch"], ["bench"],
                                  ["fit", "--schema", "a", "--data", "b", "--out", "c", "--sweeps", "x"]])
def test_usage_errors(argv, capsys):
    assert run(*argv) == 1
    assert capsys.readouterr().err.startswith("error[1]:")


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "compile" in capsys.readouterr().out


def test_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.sql"
    bad.write_text("CREATE TABLE t (\n  id INT PRIMARY KEY,\n  x REAL REFERENCES\n);\n")
    assert run("compile", "--schema", bad) == 2
    err = capsys.readouterr().err
    assert err.startswith("error[2]: line 4, column 1") and err.count("\n") == 1


def test_missing_file(capsys):
    assert run("compile", "--schema", "/nonexistent/s.sql") == 2
    assert capsys.readouterr().err.startswith("error[2]:")


def test_numeric_failure(synth_dir, tmp_path, monkeypatch, capsys):
    def boom(self, state=None):
        raise NumericError("ELBO is not finite")

    monkeypatch.setattr(cli.VMP, "fit", boom)
    assert run("fit", "--schema", synth_dir / "schema.sql", "--data", synth_dir, "--out", tmp_path / "p.json") == 3
    assert capsys.readouterr().err == "error[3]: ELBO is not finite\n"


def test_bad_fit_flag_value(synth_dir, tmp_path, capsys):
    assert run("fit", "--schema", synth_dir / "schema.sql", "--data", synth_dir, "--out", tmp_path / "p.json",
               "--sweeps", "0") == 1


def test_no_color(monkeypatch):
    monkeypatch.setenv("NO_COLOR", "1")
    cli._setup_logging(logging.INFO)
    handler = logging.getLogger("schemagm").handlers[0]
    assert handler.formatter.color is False
