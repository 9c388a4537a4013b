import json

import pytest

from gridrelief.cli import main
from gridrelief.evaluation import EXIT_EXACT_INFEASIBLE, EXIT_INPUT_ERROR, EXIT_OK


SCENARIO = ["--case", "case24_ieee_rts"]


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "scenario.toml"
    path.write_text('case = "case24_ieee_rts"\nformulations = "all"\nload_scale = 1.15\n'
                    '[contingency]\nbus = 24\n')
    return path


def test_run_writes_reports(tmp_path, config_file, capsys):
    code = main(["run", "--config", str(config_file), "--kind", "linear-robust", "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "linear-robust" in out and "violations=0" in out
    files = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert files == ["case24_ieee_rts_linear-robust_post.json", "case24_ieee_rts_linear-robust_post_buses.csv",
                     "case24_ieee_rts_linear-robust_post_machines.csv"]


def test_run_needs_single_kind(config_file, capsys):
    assert main(["run", "--config", str(config_file)]) == EXIT_INPUT_ERROR
    assert "exactly one" in capsys.readouterr().err


def test_compare_writes_table(tmp_path, config_file):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(config_file), "--out", str(out), "--sides", "16"]) == EXIT_OK
    lines = (out / "case24_ieee_rts_comparison_post.csv").read_text().splitlines()
    assert len(lines) == 5
    rows = json.loads((out / "case24_ieee_rts_comparison_post.json").read_text())
    assert {r["formulation"] for r in rows} == {"convex-taylor", "convex-robust", "linear-taylor", "linear-robust"}


def test_check_round_trip(tmp_path, config_file, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", str(config_file), "--kind", "convex-robust", "--out", str(out)]) == EXIT_OK
    report = out / "case24_ieee_rts_convex-robust_post.json"
    assert main(["check", *SCENARIO, "--state", str(report)]) == EXIT_OK
    assert "0 violation(s)" in capsys.readouterr().out
    # the unshed loads of a Taylor run are audited against the same limits
    assert main(["run", "--config", str(config_file), "--kind", "linear-taylor", "--out", str(out)]) == EXIT_OK
    taylor = out / "case24_ieee_rts_linear-taylor_post.json"
    assert main(["check", *SCENARIO, "--state", str(taylor)]) == EXIT_EXACT_INFEASIBLE


def test_input_errors(tmp_path, capsys):
    assert main(["run", "--case", str(tmp_path / "none.m"), "--kind", "linear-taylor"]) == EXIT_INPUT_ERROR
    bad = tmp_path / "bad.toml"
    bad.write_text('case = "case24_ieee_rts"\nformulation = "nope"\n')
    assert main(["run", "--config", str(bad)]) == EXIT_INPUT_ERROR
    assert main(["check", *SCENARIO, "--state", str(tmp_path / "none.json")]) == EXIT_INPUT_ERROR
    with pytest.raises(SystemExit):
        main(["run"])


def test_solver_tolerance_from_environment(monkeypatch, config_file, capsys):
    monkeypatch.setenv("GRIDRELIEF_SOLVER_TOL", "oops")
    assert main(["run", "--config", str(config_file), "--kind", "linear-taylor"]) == EXIT_INPUT_ERROR
    monkeypatch.setenv("GRIDRELIEF_SOLVER_TOL", "1e-9")
    assert main(["run", "--config", str(config_file), "--kind", "linear-taylor"]) == EXIT_OK
