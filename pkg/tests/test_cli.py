import csv
import io
import json

import numpy as np
import pytest
import yaml
from scipy import stats

from cpr import config as C
from cpr.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_plan_prints_decision(capsys):
    code, out, _ = run_cli(capsys, "plan")
    assert code == 0
    assert "chosen" in out and "partial" in out
    assert C.fingerprint(C.resolve({})) in out


def test_print_config_round_trips(capsys):
    _, out, _ = run_cli(capsys, "plan", "--print-config", "--target-pls", "0.05")
    cfg = yaml.safe_load(out)
    assert cfg["policy"]["target_pls"] == 0.05
    assert C.resolve(cfg) == cfg


@pytest.mark.parametrize("value", ["0", "1.5", "-0.1"])
def test_target_pls_out_of_range_rejected(capsys, value):
    with pytest.raises(SystemExit):
        main(["plan", "--target-pls", value])
    assert "target PLS" in capsys.readouterr().err


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text("cost:\n  o_sav: 1\n")
    code, _, err = run_cli(capsys, "plan", "--config", str(f))
    assert code == 2
    assert "cost.o_sav" in err


def test_simulate_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run_cli(capsys, "simulate", "--seeds", "100", "--out", str(tmp_path / name))[0] == 0
    a = (tmp_path / "a" / "runs.csv").read_bytes()
    assert a == (tmp_path / "b" / "runs.csv").read_bytes()
    table = rows(a.decode())
    assert len(table) == 100
    assert {r["strategy"] for r in table} == {"cpr_vanilla"}
    manifest = json.loads((tmp_path / "a" / "runs.manifest.json").read_text())
    assert manifest["config_hash"] == table[0]["config_hash"]
    assert manifest["seeds"] == list(range(100))
    assert "cpr_vanilla" in (tmp_path / "a" / "summary.txt").read_text()


def test_seed_env_changes_runs(tmp_path, capsys, monkeypatch):
    run_cli(capsys, "simulate", "--seeds", "20", "--out", str(tmp_path / "a"))
    monkeypatch.setenv("CPR_SEED", "5")
    run_cli(capsys, "simulate", "--seeds", "20", "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "runs.csv").read_text() != (tmp_path / "b" / "runs.csv").read_text()


def test_simulate_all_strategies_to_stdout(capsys):
    code, out, err = run_cli(capsys, "simulate", "--seeds", "5", "--strategy", "all")
    assert code == 0
    assert len({r["strategy"] for r in rows(out)}) == 6
    assert "overhead%" in err


def test_sweep_target_pls(capsys):
    code, out, _ = run_cli(capsys, "sweep", "--axis", "target-pls", "--values", "0.05", "0.1", "--seeds", "20")
    assert code == 0
    table = rows(out)
    assert [float(r["target_pls"]) for r in table] == [0.05, 0.1]
    assert float(table[0]["interval"]) < float(table[1]["interval"])


def test_sweep_nodes(capsys):
    code, out, _ = run_cli(capsys, "sweep", "--axis", "nodes", "--values", "1", "2", "4")
    assert code == 0
    assert [int(r["nodes"]) for r in rows(out)] == [1, 2, 4]


def test_fit_trace_ranks_gamma_first(tmp_path, capsys):
    x = stats.gamma(0.6, scale=40).rvs(size=3000, random_state=np.random.default_rng(0))
    f = tmp_path / "gaps.txt"
    f.write_text("\n".join(repr(float(v)) for v in x))
    code, out, _ = run_cli(capsys, "fit-trace", str(f))
    assert code == 0
    table = rows(out)
    assert table[0]["family"] == "gamma"
    assert len(table) == 4
    _, out, _ = run_cli(capsys, "fit-trace", str(f), "--families", "exponential")
    assert [r["family"] for r in rows(out)] == ["exponential"]


def test_fit_trace_reports_degenerate_input_per_family(tmp_path, capsys):
    f = tmp_path / "one.txt"
    f.write_text("5.0\n")
    code, out, _ = run_cli(capsys, "fit-trace", str(f), "--families", "gamma", "weibull")
    assert code == 0
    table = rows(out)
    assert [r["family"] for r in table] == ["gamma", "weibull"]
    assert all(r["error"] and "\n" not in r["error"] for r in table)


def test_fit_trace_missing_file(capsys):
    code, _, err = run_cli(capsys, "fit-trace", "/nonexistent/trace.txt")
    assert code == 2 and "cannot read trace" in err


def test_report_aggregates_runs(tmp_path, capsys):
    run_cli(capsys, "simulate", "--seeds", "10", "--strategy", "all", "--out", str(tmp_path))
    code, out, _ = run_cli(capsys, "report", str(tmp_path), "--out", str(tmp_path))
    assert code == 0
    table = rows(out)
    assert len(table) == 6
    assert all(int(r["runs"]) == 10 for r in table)
    assert (tmp_path / "report.csv").exists()


def test_report_on_empty_directory(tmp_path, capsys):
    code, _, err = run_cli(capsys, "report", str(tmp_path))
    assert code == 2 and "no run CSVs" in err


def test_train_runs_coupled_mode(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text(
        yaml.safe_dump(
            {
                "toy": {"n_train": 6400, "n_test": 2000, "vocab_sizes": [300, 100, 20], "dim": 4,
                        "bottom_hidden": 8, "top_hidden": 8},
                "simulation": {"n_shards": 4},
            }
        )
    )
    code, out, _ = run_cli(capsys, "train", "--config", str(f), "--seeds", "2")
    assert code == 0
    table = rows(out)
    assert len(table) == 2
    assert all(r["auc"] != "" for r in table)
