#!/usr/bin/env python3
"""
Tests for grid expansion, result files and paired protocol comparison
"""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

import experiments
from config import load_config
from engine import RunAudit
from experiments import ExperimentSpec, cell_name, compare_protocols, expand_grid, read_comparison, run_experiment


def settings_for(tmp_path, experiment, **extra):
    overrides = {"experiment": experiment, "n": 40, "width": 7.0, "height": 7.0, "rounds": 120,
                 "seeds": 2, "output_dir": str(tmp_path), "workers": 1}
    overrides.update(extra)
    return load_config(overrides=list(overrides.items()))


def read_rows(path: Path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_cell_names_and_grid_order(tmp_path):
    settings = settings_for(tmp_path, "single", grid={"alpha": [3.0, 4.0], "n": [20, 30]})
    cells = expand_grid(settings)
    assert [c.name for c in cells] == ["alpha=3_n=20", "alpha=3_n=30", "alpha=4_n=20", "alpha=4_n=30"]
    assert cells[3].settings.alpha == 4.0 and cells[3].settings.n == 30
    assert cells[0].settings.grid == {}
    assert cell_name({}) == "base"


def test_scale_sweep_uses_square_root_plane(tmp_path):
    settings = settings_for(tmp_path, "scale_sweep", grid={"n": [49, 100]})
    cells = expand_grid(settings)
    assert [(c.settings.width, c.settings.height) for c in cells] == [(7.0, 7.0), (10.0, 10.0)]


def test_single_experiment_files_and_manifest(tmp_path):
    spec = ExperimentSpec.from_settings(settings_for(tmp_path, "single"))
    result = run_experiment(spec)
    out = Path(result.directory)
    assert result.status == "ok"
    assert (out / "base" / "0.csv").exists() and (out / "base" / "1.csv").exists()

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["settings"]["rounds"] == 120
    for rel, digest in manifest["artifacts"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest

    runs = read_rows(out / "runs.csv")
    summary = read_rows(out / "summary.csv")
    values = [float(r["throughput"]) for r in runs]
    assert float(summary[0]["mean_throughput"]) == pytest.approx(np.mean(values))
    assert float(summary[0]["std_throughput"]) == pytest.approx(np.std(values, ddof=1))


def test_impossibility_experiment_has_no_receptions(tmp_path):
    result = run_experiment(ExperimentSpec.from_settings(settings_for(tmp_path, "impossibility", rounds=300)))
    runs = read_rows(Path(result.directory) / "runs.csv")
    assert [int(r["receptions"]) for r in runs] == [0, 0]
    assert all(r["throughput"] == "" for r in runs)


def test_convergence_writes_round_series(tmp_path):
    result = run_experiment(ExperimentSpec.from_settings(settings_for(tmp_path, "convergence")))
    rows = read_rows(Path(result.directory) / "base" / "0.rounds.csv")
    assert len(rows) == 120
    assert float(rows[0]["aggregate_p"]) == math.fsum([1.0 / 24.0] * 40)


def test_het_density_writes_group_rows(tmp_path):
    settings = settings_for(tmp_path, "het_density", grid_side=2, sub_size=3.0, lambda_min=5, lambda_max=20,
                            rounds=60, seeds=1)
    result = run_experiment(ExperimentSpec.from_settings(settings))
    rows = read_rows(Path(result.directory) / "base" / "0.groups.csv")
    assert [int(r["group"]) for r in rows] == [0, 1, 2, 3]
    assert all(float(r["density"]) == int(r["nodes"]) / 9.0 for r in rows)


def test_failed_run_gives_partial_manifest(tmp_path, monkeypatch):
    real = experiments.run_summary

    def flaky(config):
        if config.seed == 1:
            raise RuntimeError("boom")
        return real(config)

    monkeypatch.setattr(experiments, "run_summary", flaky)
    result = run_experiment(ExperimentSpec.from_settings(settings_for(tmp_path, "single")))
    assert result.status == "partial"
    manifest = json.loads(Path(result.manifest_path).read_text())
    assert manifest["status"] == "partial"
    assert "boom" in manifest["cells"][0]["failures"]["1"]
    summary = read_rows(Path(result.directory) / "summary.csv")
    assert summary[0]["runs"] == "1" and summary[0]["failed"] == "1"


def test_compare_protocols_pairs_runs(tmp_path):
    settings = settings_for(tmp_path, "baseline_compare", grid={"epsilon": [0.2, 0.5]})
    result = compare_protocols(ExperimentSpec.from_settings(settings))
    assert result.status == "ok"
    rows = read_comparison(Path(result.directory) / "comparison.csv")
    assert len(rows) == 4
    assert {r.cell for r in rows} == {"epsilon=0.2", "epsilon=0.5"}
    assert all(r.sade_throughput is not None and r.backoff_throughput is not None for r in rows)
    assert (Path(result.directory) / "epsilon=0.2" / "sade" / "0.csv").exists()
    assert (Path(result.directory) / "epsilon=0.2" / "backoff" / "0.csv").exists()
    summary = read_rows(Path(result.directory) / "summary.csv")
    assert [(r["cell"], r["protocol"]) for r in summary] == [
        ("epsilon=0.2", "sade"), ("epsilon=0.2", "backoff"), ("epsilon=0.5", "sade"), ("epsilon=0.5", "backoff")]
    assert all(r["runs"] == "2" and r["mean_throughput"] for r in summary)
    for cell in result.cells:
        assert cell.statistics.runs == cell.backoff_statistics.runs == 2
    backoff = [r.backoff_throughput for r in rows if r.cell == "epsilon=0.5"]
    assert float(summary[3]["mean_throughput"]) == pytest.approx(sum(backoff) / 2)


def test_broken_pairing_leaves_failed_manifest(tmp_path, monkeypatch):
    original = experiments.run_summary

    def skewed(config):
        summary = original(config)
        if config.protocol == "backoff":
            summary.noise_digest = "0" * 64
        return summary

    monkeypatch.setattr(experiments, "run_summary", skewed)
    settings = settings_for(tmp_path, "baseline_compare", grid={"epsilon": [0.2, 0.5]})
    with pytest.raises(experiments.PairingError):
        compare_protocols(ExperimentSpec.from_settings(settings))
    manifest = json.loads((tmp_path / "baseline_compare" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "epsilon=0.2 seed 0" in manifest["error"]
    assert {"comparison.csv", "summary.csv"} <= set(manifest["artifacts"])


def test_audited_sweep_counts_audit_failures(tmp_path, monkeypatch):
    original = experiments.run_summary

    def flagged(config):
        summary = original(config)
        if config.seed == 1:
            summary.audit = RunAudit(state_violations=1)
        return summary

    monkeypatch.setattr(experiments, "run_summary", flagged)
    result = run_experiment(ExperimentSpec.from_settings(settings_for(tmp_path, "single", audit=True)))
    assert result.status == "partial"
    assert result.cells[0].failures[1].startswith("AuditFailure")
    assert result.cells[0].statistics.runs == 1
