import csv
import json

import pytest
import yaml

from tardis.cli import main, temporal_subset
from tardis.powermodel import count_parameters, load_checkpoint
from tardis.trace import WorkloadSpec, generate_synthetic_workload, load_trace, save_trace


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 1,
        "trace": {"synthetic": {"scenario": "low", "duration_days": 1, "jobs_per_day": 60}},
        "sites": {"preset": "three_site", "node_counts": 32},
        "policies": ["tardis", "fcfs"],
        "budgets": [1.0],
        "predictor": "oracle",
    }
    cfg.update(overrides)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_gen_trace_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["gen-trace", "--out", str(a), "--days", "1", "--jobs-per-day", "50", "--seed", "3"]) == 0
    assert main(["gen-trace", "--out", str(b), "--days", "1", "--jobs-per-day", "50", "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_trace(a)) == 50


def test_train_rejects_tiny_trace(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    save_trace(generate_synthetic_workload(WorkloadSpec(job_count=10, duration_days=1), 0), trace)
    assert main(["train", "--trace", str(trace), "--out", str(tmp_path / "m.npz")]) != 0
    assert "insufficient jobs" in capsys.readouterr().err


def test_train_unreadable_trace(tmp_path, capsys):
    assert main(["train", "--trace", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m.npz")]) != 0
    assert "cannot read trace" in capsys.readouterr().err


def test_train_early_split_checkpoint_and_history(tmp_path):
    trace = tmp_path / "t.csv"
    jobs = generate_synthetic_workload(WorkloadSpec(job_count=1000, duration_days=5), 0)
    save_trace(jobs, trace)
    assert len(temporal_subset(jobs, 0.3)) == 300
    finals = []
    for run_dir in ("r1", "r2"):
        out = tmp_path / run_dir / "m.npz"
        argv = ["train", "--trace", str(trace), "--paper-split", "--out", str(out),
                "--batch-size", "64", "--epochs", "3", "--seed", "5"]
        assert main(argv) == 0
        model, _, _ = load_checkpoint(out)
        assert count_parameters(model) == 43_265
        rows = list(csv.DictReader(open(out.with_suffix(".history.csv"))))
        assert 1 <= len(rows) <= 3
        finals.append(rows[-1]["val_mse_kw2"])
    assert finals[0] == finals[1]


def _run(cmd, cfg, out, *extra):
    assert main([cmd, "--config", str(cfg), "--out", str(out), *extra]) == 0
    return json.loads((out / "report.json").read_text())


def test_simulate_single_result(tmp_path):
    cfg = write_config(tmp_path, policies=["fcfs"])
    rep = _run("simulate", cfg, tmp_path / "out")
    assert list(rep["runs"]) == ["fcfs_b100"]
    assert (tmp_path / "out" / "runs" / "fcfs_b100_steps.csv").is_file()
    assert (tmp_path / "out" / "runs" / "fcfs_b100_daily.csv").is_file()


def test_simulate_cartesian_product_named_deterministically(tmp_path):
    cfg = write_config(tmp_path, policies=["tardis", "fcfs", "sjf", "backfill"],
                       budgets=[0.25, 0.5, 0.75, 1.0],
                       trace={"synthetic": {"scenario": "low", "duration_days": 0.5, "jobs_per_day": 40}})
    rep = _run("simulate", cfg, tmp_path / "out")
    expected = {f"{p}_b{b:03d}" for p in ("tardis", "fcfs", "sjf", "backfill") for b in (25, 50, 75, 100)}
    assert set(rep["runs"]) == expected


def test_multi_site_hourly_histograms(tmp_path):
    rep = _run("simulate", write_config(tmp_path), tmp_path / "out")
    for run in rep["runs"].values():
        assert set(run["hourly_starts"]) == {"A", "B", "C"}
        assert all(len(v) == 24 for v in run["hourly_starts"].values())
        assert sum(map(sum, run["hourly_starts"].values())) == run["jobs_started"]


def test_cli_overrides_policy_and_budget(tmp_path):
    rep = _run("simulate", write_config(tmp_path), tmp_path / "out", "--policy", "sjf,random",
               "--budget", "50%")
    assert set(rep["runs"]) == {"sjf_b050", "random_b050"}


def test_report_tables_and_figures(tmp_path, capsys):
    out = tmp_path / "out"
    _run("simulate", write_config(tmp_path, policies=["fcfs"]), out)
    assert main(["report", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert len(rows) == 1
    assert (out / "figures" / "total_cost.png").stat().st_size > 0
    assert "fcfs_b100" in capsys.readouterr().out


def test_report_reduction_recomputable(tmp_path):
    out = tmp_path / "out"
    rep = _run("compare", write_config(tmp_path), out)
    rows = {r["label"]: r for r in csv.DictReader(open(out / "summary.csv"))}
    t = rep["runs"]["tardis_b100"]["total_cost"]
    f = rep["runs"]["fcfs_b100"]["total_cost"]
    assert rows["tardis_b100"]["baseline"] == "fcfs_b100"
    assert float(rows["tardis_b100"]["reduction_pct"]) == pytest.approx(100 * (1 - t / f))
    assert float(rows["fcfs_b100"]["reduction_pct"]) == 0.0
    for name in ("daily_cost.png", "category_shares.png", "hourly_starts_tardis_b100.png"):
        assert (out / "figures" / name).is_file()


def test_commands_idempotent(tmp_path):
    cfg = write_config(tmp_path, policies=["tardis", "random"])
    a = _run("compare", cfg, tmp_path / "a")
    b = _run("compare", cfg, tmp_path / "b")
    assert a.pop("metadata") and b.pop("metadata")
    assert a == b
    for name in ("summary.csv", "runs/tardis_b100_steps.csv", "figures/total_cost.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_missing_dir_fails(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nothing")]) != 0
    assert "cannot read" in capsys.readouterr().err


def test_bad_config_fails(tmp_path, capsys):
    cfg = write_config(tmp_path, policies=["bogus"])
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
    assert "unknown policies" in capsys.readouterr().err
