import csv
import io
import json
from pathlib import Path

import pytest

from offvar.cli import EXIT_INPUT, EXIT_INTERNAL, EXIT_OK, main

FIXTURE = Path(__file__).parent / "data" / "counterexample_ab.jsonl"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_oracle_counterexample(capsys):
    code, out, _ = run(capsys, "oracle", "--env", "counterexample", "--policy", "det_a")
    assert code == EXIT_OK
    assert float(rows(out)[0]["variance"]) == 0.0


def test_estimate_naive_is_on_fixture(capsys):
    code, out, _ = run(capsys, "estimate", "--env", "counterexample", "--policy", "det_a",
                       "--data", str(FIXTURE), "--method", "naive_is")
    assert code == EXIT_OK
    assert float(rows(out)[0]["raw"]) == 2.0


def test_estimate_reports_raw_and_clipped(capsys):
    code, out, _ = run(capsys, "estimate", "--env", "counterexample", "--policy", "det_a",
                       "--data", str(FIXTURE), "--format", "json")
    assert code == EXIT_OK
    by = {r["method"]: r for r in json.loads(out)}
    assert by["double_sampled"]["raw"] == 1.0 and by["naive_plugin"]["raw"] == 0.0
    assert all(r["clipped"] >= 0 for r in by.values())


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "estimate", "--bogus")
    assert code == EXIT_INPUT
    assert "usage:" in err and "steps" in err


def test_missing_subcommand(capsys):
    code, _, err = run(capsys)
    assert code == EXIT_INPUT and "usage:" in err


def test_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == EXIT_OK and "coverage" in out


@pytest.mark.parametrize("argv", [
    ("estimate", "--data", "/nonexistent.jsonl"),
    ("oracle", "--env", "nowhere"),
    ("oracle", "--env", "counterexample", "--policy", "nobody"),
    ("coverage", "--n", "1", "--trials", "1"),
    ("bootstrap", "--env", "counterexample", "--policy", "det_a", "--data", str(FIXTURE), "--bootstrap-b", "5"),
])
def test_input_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == EXIT_INPUT and "error" in err


def test_internal_error(capsys, monkeypatch):
    import offvar.cli as cli

    def boom(args):
        raise RuntimeError("unexpected")
    monkeypatch.setitem(cli.COMMANDS, "oracle", boom)
    code, _, err = run(capsys, "oracle")
    assert code == EXIT_INTERNAL and "internal error" in err


def test_simulate_then_bound_and_bootstrap(capsys, tmp_path):
    data = tmp_path / "d.jsonl"
    assert run(capsys, "simulate", "--env", "recommender", "--n", "200", "--seed", "4", "--out", str(data))[0] == 0
    assert len(data.read_text().splitlines()) == 200
    code, out, _ = run(capsys, "bound", "--env", "recommender", "--data", str(data), "--clip")
    assert code == 0
    iv = rows(out)[0]
    assert 0.0 <= float(iv["lower"]) <= float(iv["upper"])
    code, out, _ = run(capsys, "bootstrap", "--env", "recommender", "--data", str(data), "--bootstrap-b", "200",
                       "--format", "json")
    assert code == 0 and json.loads(out)["method"] == "bootstrap"


def test_simulate_stdout_is_reproducible(capsys):
    a = run(capsys, "simulate", "--env", "counterexample", "--policy", "det_a", "--n", "5", "--seed", "2")[1]
    b = run(capsys, "simulate", "--env", "counterexample", "--policy", "det_a", "--n", "5", "--seed", "2")[1]
    assert a == b and len(a.splitlines()) == 5


def test_coverage_files_identical_across_jobs(capsys, tmp_path):
    common = ["coverage", "--env", "recommender", "--n", "40", "80", "--trials", "3", "--bootstrap-b", "100"]
    assert run(capsys, *common, "--out", str(tmp_path / "a"))[0] == 0
    assert run(capsys, *common, "--out", str(tmp_path / "b"), "--jobs", "2")[0] == 0
    for name in ("coverage.json", "coverage_rows.csv", "coverage_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_exhaustive(capsys, tmp_path):
    out_file = tmp_path / "cmp.csv"
    code, out, _ = run(capsys, "compare", "--env", "counterexample", "--policy", "det_a", "--alpha", "0",
                       "--n", "2", "--exhaustive", "--out", str(out_file))
    assert code == 0 and out_file.read_text() == out
    means = {r["method"]: float(r["mean"]) for r in rows(out)}
    assert means == {"double_sampled": 0.0, "naive_is": 1.0, "naive_plugin": 1.0, "variance_reduced": 0.0}
