"""
Experiment orchestration: parameter grids x seeds, a bounded worker pool and
a single collector that writes every CSV and the manifest.

Layout under <output_dir>/<experiment>/:
    <cell>/<seed>.csv          per-frame f_v, s_v, unjammed
    <cell>/<seed>.rounds.csv   per-round aggregates (convergence, power_sweep)
    <cell>/<seed>.groups.csv   per sub-square throughput (het_density)
    <cell>/<seed>.trace.csv    full trace (save_traces)
    runs.csv                   one row per (cell, seed)
    summary.csv                mean and standard deviation per cell (and protocol)
    comparison.csv             paired SADE and backoff throughput (baseline_compare)
    manifest.json              settings echo, failures, artifact hashes
"""

import csv
import hashlib
import io
import itertools
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field

from config import RunSettings, scale_plane
from engine import (
    BatchStatistics,
    RunSummary,
    SimConfig,
    batch_statistics,
    resolve_workers,
    run,
    run_summary,
    write_trace_csv,
)
from metrics import frames_to_csv, group_throughput, groups_to_csv, round_aggregates_to_csv

logger = logging.getLogger(__name__)

ROUND_SERIES_KINDS = {"convergence", "power_sweep"}
PROTOCOLS = ("sade", "backoff")


class GridCell(BaseModel):
    name: str
    values: Dict[str, Any] = Field(default_factory=dict)
    settings: RunSettings


class ExperimentSpec(BaseModel):
    """An experiment kind with its expanded parameter grid"""
    kind: str
    settings: RunSettings
    cells: List[GridCell]
    seeds: List[int]
    output_dir: str

    @classmethod
    def from_settings(cls, settings: RunSettings) -> "ExperimentSpec":
        cells = expand_grid(settings)
        if not cells:
            raise ValueError("experiment grid is empty")
        return cls(
            kind=settings.experiment,
            settings=settings,
            cells=cells,
            seeds=settings.seed_values(),
            output_dir=settings.output_dir,
        )


class CellResult(BaseModel):
    name: str
    values: Dict[str, Any]
    statistics: Optional[BatchStatistics] = None
    backoff_statistics: Optional[BatchStatistics] = Field(None, description="baseline_compare only")
    failures: Dict[int, str] = Field(default_factory=dict)


class ExperimentResult(BaseModel):
    kind: str
    directory: str
    status: str = Field(..., description="'ok', 'partial' or 'failed'")
    cells: List[CellResult]
    manifest_path: str


class ComparisonRow(BaseModel):
    cell: str
    seed: int
    sade_throughput: Optional[float]
    backoff_throughput: Optional[float]
    noise_digest: str


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def cell_name(values: Dict[str, Any]) -> str:
    if not values:
        return "base"
    return "_".join(f"{key}={_format_value(value)}" for key, value in values.items())


def expand_grid(settings: RunSettings) -> List[GridCell]:
    """Cartesian product of the grid axes, in the order the axes were given"""
    axes = list(settings.grid.items())
    keys = [key for key, _ in axes]
    cells = []
    for combo in itertools.product(*[values for _, values in axes]):
        values = dict(zip(keys, combo))
        cell_settings = settings.with_values({**values, "grid": {}})
        if settings.experiment == "scale_sweep" and "width" not in values:
            cell_settings = scale_plane(cell_settings)
        cells.append(GridCell(name=cell_name(values), values=values, settings=cell_settings))
    return cells


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Collector:
    """Only this object writes into the experiment directory"""

    def __init__(self, directory: Path):
        self.directory = directory
        self.artifacts: Dict[str, str] = {}
        directory.mkdir(parents=True, exist_ok=True)

    def write(self, relative: str, text: str) -> Path:
        path = self.directory / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.artifacts[relative] = _sha256(path)
        return path

    def record(self, relative: str) -> None:
        self.artifacts[relative] = _sha256(self.directory / relative)

    def write_run(self, kind: str, cell: str, summary: RunSummary) -> None:
        self.write(f"{cell}/{summary.seed}.csv", frames_to_csv(summary.frames))
        if kind in ROUND_SERIES_KINDS:
            self.write(f"{cell}/{summary.seed}.rounds.csv",
                       round_aggregates_to_csv(summary.aggregate_p, summary.receptions, summary.idle_count))
        if summary.groups is not None:
            rows = group_throughput(summary.groups, summary.group_area, summary.successes, summary.unjammed)
            self.write(f"{cell}/{summary.seed}.groups.csv", groups_to_csv(rows))


def _checked(summary: RunSummary) -> Any:
    """A run whose audit found violations counts as failed"""
    if summary.audit is not None and not summary.audit.ok:
        logger.error(f"Run seed {summary.seed} failed its audit: {summary.audit}")
        return f"AuditFailure: {summary.audit}"
    return summary


def _execute(jobs: List[Tuple[str, SimConfig]], workers: int, save_traces: bool,
             collector: Collector) -> Dict[Tuple[str, int], Any]:
    """Run every job; results map (cell, seed) to a RunSummary or an error message"""
    results: Dict[Tuple[str, int], Any] = {}
    if save_traces or workers == 1:
        for cell, config in jobs:
            try:
                if save_traces:
                    trace = run(config)
                    path = collector.directory / cell / f"{config.seed}.trace.csv"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_trace_csv(trace, path)
                    collector.record(f"{cell}/{config.seed}.trace.csv")
                    results[(cell, config.seed)] = _checked(trace.summary)
                else:
                    results[(cell, config.seed)] = _checked(run_summary(config))
            except Exception as e:
                logger.error(f"Run {cell}/seed {config.seed} failed: {e}")
                logger.error(traceback.format_exc())
                results[(cell, config.seed)] = f"{type(e).__name__}: {e}"
        return results

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(run_summary, config): (cell, config.seed) for cell, config in jobs}
        for future, key in futures.items():
            try:
                results[key] = _checked(future.result())
            except Exception as e:
                logger.error(f"Run {key[0]}/seed {key[1]} failed: {e}")
                results[key] = f"{type(e).__name__}: {e}"
    return results


def _stats_row(cell: GridCell, axes: List[str], stats: Optional[BatchStatistics], failed: int,
               protocol: Optional[str] = None) -> List[Any]:
    values = [_format_value(cell.values.get(axis, "")) for axis in axes]
    if protocol is not None:
        values.append(protocol)
    if stats is None:
        return [cell.name, *values, 0, failed, "", "", "", "", ""]

    def fmt(x):
        return "" if x is None else repr(x)

    return [cell.name, *values, stats.runs, failed, fmt(stats.mean_throughput), fmt(stats.std_throughput),
            repr(stats.mean_competitive), repr(stats.std_competitive), repr(stats.mean_receptions)]


def _write_manifest(collector: Collector, spec: ExperimentSpec, cells: List[CellResult], status: str,
                    error: Optional[str] = None) -> Path:
    manifest = {
        "experiment": spec.kind,
        "status": status,
        "seeds": spec.seeds,
        "settings": spec.settings.model_dump(mode="json"),
        "cells": [
            {
                "name": c.name,
                "values": c.values,
                "failures": {str(seed): msg for seed, msg in c.failures.items()},
            }
            for c in cells
        ],
        "artifacts": dict(sorted(collector.artifacts.items())),
    }
    if error is not None:
        manifest["error"] = error
    path = collector.directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return path


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> ExperimentResult:
    """Run the grid x seeds and write every result file"""
    if spec.kind == "baseline_compare":
        return compare_protocols(spec, workers)

    collector = Collector(Path(spec.output_dir) / spec.kind)
    workers = resolve_workers(workers if workers is not None else spec.settings.workers)
    jobs = [(cell.name, cell.settings.to_sim_config(seed)) for cell in spec.cells for seed in spec.seeds]
    logger.info(f"Experiment {spec.kind}: {len(spec.cells)} cells x {len(spec.seeds)} seeds, {workers} workers")
    results = _execute(jobs, workers, spec.settings.save_traces, collector)

    axes = list(spec.settings.grid.keys())
    runs_out = io.StringIO()
    runs_writer = csv.writer(runs_out)
    runs_writer.writerow(["cell", "seed", "throughput", "competitive", "receptions", "trace_hash", "noise_digest"])
    summary_out = io.StringIO()
    summary_writer = csv.writer(summary_out)
    summary_writer.writerow(["cell", *axes, "runs", "failed", "mean_throughput", "std_throughput",
                             "mean_competitive", "std_competitive", "mean_receptions"])

    cell_results = []
    for cell in spec.cells:
        summaries, failures = [], {}
        for seed in spec.seeds:
            outcome = results[(cell.name, seed)]
            if isinstance(outcome, str):
                failures[seed] = outcome
                continue
            summaries.append(outcome)
            collector.write_run(spec.kind, cell.name, outcome)
            thr = outcome.throughput
            runs_writer.writerow([cell.name, seed, "" if thr is None else repr(thr), repr(outcome.competitive.value),
                                  outcome.total_receptions, outcome.trace_hash, outcome.noise_digest])
        stats = batch_statistics(summaries) if summaries else None
        summary_writer.writerow(_stats_row(cell, axes, stats, len(failures)))
        cell_results.append(CellResult(name=cell.name, values=cell.values, statistics=stats, failures=failures))
        if stats is not None:
            logger.info(f"{spec.kind}/{cell.name}: mean throughput {stats.mean_throughput}, "
                        f"{len(failures)} failed")

    collector.write("runs.csv", runs_out.getvalue())
    collector.write("summary.csv", summary_out.getvalue())
    status = "partial" if any(c.failures for c in cell_results) else "ok"
    manifest = _write_manifest(collector, spec, cell_results, status)
    if status != "ok":
        logger.warning(f"Experiment {spec.kind} finished with failures, see {manifest}")
    return ExperimentResult(kind=spec.kind, directory=str(collector.directory), status=status,
                            cells=cell_results, manifest_path=str(manifest))


class PairingError(RuntimeError):
    pass


def compare_protocols(spec: ExperimentSpec, workers: Optional[int] = None) -> ExperimentResult:
    """
    SADE and backoff on identical topologies, seeds and jam schedules; the
    pairing is verified through the topology and noise digests. A broken
    pairing still leaves the files written so far and a failed manifest.
    """
    collector = Collector(Path(spec.output_dir) / spec.kind)
    workers = resolve_workers(workers if workers is not None else spec.settings.workers)
    jobs = []
    for cell in spec.cells:
        for protocol in PROTOCOLS:
            settings = cell.settings.with_values({"protocol": protocol})
            jobs.extend((f"{cell.name}/{protocol}", settings.to_sim_config(seed)) for seed in spec.seeds)
    results = _execute(jobs, workers, False, collector)

    axes = list(spec.settings.grid.keys())
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["cell", *axes, "seed", "sade_throughput", "backoff_throughput", "noise_digest"])
    summary_out = io.StringIO()
    summary_writer = csv.writer(summary_out)
    summary_writer.writerow(["cell", *axes, "protocol", "runs", "failed", "mean_throughput", "std_throughput",
                             "mean_competitive", "std_competitive", "mean_receptions"])
    cell_results = []
    pairing_error = None
    for cell in spec.cells:
        failures: Dict[int, str] = {}
        paired: Dict[str, List[RunSummary]] = {protocol: [] for protocol in PROTOCOLS}
        for seed in spec.seeds:
            sade = results[(f"{cell.name}/sade", seed)]
            backoff = results[(f"{cell.name}/backoff", seed)]
            if isinstance(sade, str) or isinstance(backoff, str):
                failures[seed] = sade if isinstance(sade, str) else backoff
                continue
            if sade.noise_digest != backoff.noise_digest or sade.topology_digest != backoff.topology_digest:
                pairing_error = f"{cell.name} seed {seed}: paired runs saw different topologies or jamming"
                failures[seed] = f"PairingError: {pairing_error}"
                break
            paired["sade"].append(sade)
            paired["backoff"].append(backoff)
            row = ComparisonRow(cell=cell.name, seed=seed, sade_throughput=sade.throughput,
                                backoff_throughput=backoff.throughput, noise_digest=sade.noise_digest)
            writer.writerow([row.cell, *[_format_value(cell.values[a]) for a in axes], row.seed,
                             "" if row.sade_throughput is None else repr(row.sade_throughput),
                             "" if row.backoff_throughput is None else repr(row.backoff_throughput),
                             row.noise_digest])
            collector.write_run(spec.kind, f"{cell.name}/sade", sade)
            collector.write_run(spec.kind, f"{cell.name}/backoff", backoff)

        stats = {p: batch_statistics(runs) if runs else None for p, runs in paired.items()}
        for protocol in PROTOCOLS:
            summary_writer.writerow(_stats_row(cell, axes, stats[protocol], len(failures), protocol))
        cell_results.append(CellResult(name=cell.name, values=cell.values, statistics=stats["sade"],
                                       backoff_statistics=stats["backoff"], failures=failures))
        if pairing_error is not None:
            break

    collector.write("comparison.csv", out.getvalue())
    collector.write("summary.csv", summary_out.getvalue())
    if pairing_error is not None:
        manifest = _write_manifest(collector, spec, cell_results, "failed", error=pairing_error)
        logger.error(f"Comparison aborted, see {manifest}")
        raise PairingError(pairing_error)
    status = "partial" if any(c.failures for c in cell_results) else "ok"
    manifest = _write_manifest(collector, spec, cell_results, status)
    return ExperimentResult(kind=spec.kind, directory=str(collector.directory), status=status,
                            cells=cell_results, manifest_path=str(manifest))


def read_comparison(path: Path) -> List[ComparisonRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(ComparisonRow(
                cell=rec["cell"],
                seed=int(rec["seed"]),
                sade_throughput=float(rec["sade_throughput"]) if rec["sade_throughput"] else None,
                backoff_throughput=float(rec["backoff_throughput"]) if rec["backoff_throughput"] else None,
                noise_digest=rec["noise_digest"],
            ))
    return rows
