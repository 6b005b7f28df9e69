#!/usr/bin/env python3
"""
Acceptance suite: reproduces the headline throughput numbers and checks the
simulator's hard guarantees (ledger, reception uniqueness, determinism,
protocol-state invariants) on every run it makes.

Every run is audited while it executes, so the large Het and scale runs are
covered without keeping their traces. Quick mode shrinks seeds, rounds and
Het densities so the suite finishes in a few minutes; the full mode uses the
reference parameters.
"""

import logging
import math
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import RunSettings, scale_plane
from engine import RunSummary, SimConfig, run_batch, run_configs
from sinr import AuditResult, RoundActivity, brute_force_interference, interference_at
from topology import GridIndex, gen_uniform, zone_radii

logger = logging.getLogger(__name__)

THROUGHPUT_BAND = (0.30, 0.50)
SCALE_SPREAD = 0.10
CONVERGENCE_FRACTION = 0.25
CONVERGENCE_ROUNDS = 500
CONVERGENCE_SHARE = 0.9
ORACLE_INSTANCES = 100
ORACLE_TOLERANCE = 1e-12


class AcceptanceSuite:
    def __init__(self, settings: Optional[RunSettings] = None, quick: bool = False, workers: Optional[int] = None):
        self.settings = settings or RunSettings()
        self.quick = quick
        self.workers = workers if workers is not None else self.settings.workers
        self.test_results: List[Dict] = []
        self.audit = AuditResult()
        self.ledger_failures = 0
        self.sliding_failures = 0
        self.state_failures = 0
        self.audited_runs = 0
        # Every run made so far, with the hash it produced
        self.history: List[Tuple[str, SimConfig, str]] = []

    def log_test(self, test_name: str, success: bool, details: str = "", duration: float = 0):
        """Log test results"""
        status = "✅ PASS" if success else "❌ FAIL"
        self.test_results.append({
            "test": test_name,
            "success": success,
            "details": details,
            "duration": duration,
        })
        print(f"{status} {test_name} ({duration:.2f}s)" + (f" - {details}" if details else ""))

    @property
    def seeds(self) -> List[int]:
        return self.settings.seed_values()[:3] if self.quick else self.settings.seed_values()

    @property
    def rounds(self) -> int:
        return min(self.settings.rounds, 1000) if self.quick else self.settings.rounds

    def _run(self, label: str, settings: RunSettings, seeds: Sequence[int]) -> List[RunSummary]:
        """Audited runs of settings at each seed; results are folded into the suite's tallies"""
        base = settings.with_values({"audit": True}).to_sim_config()
        summaries = run_batch(base, seeds, self.workers)
        for seed, summary in zip(seeds, summaries):
            self._collect(label, base.model_copy(update={"seed": int(seed)}), summary)
        return summaries

    def _collect(self, label: str, config: SimConfig, summary: RunSummary) -> None:
        audit = summary.audit
        self.audited_runs += 1
        self.audit.add(audit.channel)
        if audit.ledger_failures:
            self.ledger_failures += 1
            logger.warning(f"{label}: ledger check failed in {audit.ledger_failures} windows for seed {summary.seed}")
        self.sliding_failures += int(audit.sliding_failures > 0)
        self.state_failures += audit.state_violations
        self.history.append((f"{label}/{summary.seed}", config, summary.trace_hash))

    def _impossibility_settings(self) -> RunSettings:
        return self.settings.with_values({
            "topology": "pair",
            "jammer": "const",
            "jam_level": 1.1 * self.settings.theta,
        })

    def test_throughput(self) -> List[RunSummary]:
        """Uni defaults land in the reference throughput band"""
        start_time = time.time()
        summaries: List[RunSummary] = []
        try:
            summaries = self._run("uni", self.settings.with_values({"rounds": self.rounds}), self.seeds)
            values = [s.throughput for s in summaries if s.throughput is not None]
            mean = float(np.mean(values))
            ok = len(values) == len(summaries) and THROUGHPUT_BAND[0] <= mean <= THROUGHPUT_BAND[1]
            self.log_test("Throughput reproduction", ok, f"mean {mean:.3f} over {len(values)} seeds",
                          time.time() - start_time)
        except Exception as e:
            self.log_test("Throughput reproduction", False, str(e), time.time() - start_time)
        return summaries

    def test_scale_insensitivity(self):
        """Flat throughput over network size at alpha=4"""
        start_time = time.time()
        sizes = [250, 500, 1000] if self.quick else [250, 500, 1000, 2000]
        try:
            means = {}
            for alpha in (4.0, 3.0):
                for n in sizes:
                    cell = scale_plane(self.settings.with_values({"alpha": alpha, "n": n, "rounds": self.rounds}))
                    summaries = self._run(f"scale/alpha={alpha:g}_n={n}", cell, self.seeds)
                    means[(alpha, n)] = float(np.mean([s.throughput for s in summaries]))
            spread = max(means[(4.0, n)] for n in sizes) - min(means[(4.0, n)] for n in sizes)
            decrease = means[(3.0, sizes[-1])] <= means[(3.0, sizes[0])]
            self.log_test("Scale insensitivity", spread < SCALE_SPREAD and decrease,
                          f"alpha=4 spread {spread:.3f}; alpha=3 n={sizes[-1]} {means[(3.0, sizes[-1])]:.3f} "
                          f"vs n={sizes[0]} {means[(3.0, sizes[0])]:.3f}", time.time() - start_time)
        except Exception as e:
            self.log_test("Scale insensitivity", False, str(e), time.time() - start_time)

    def test_heterogeneity_penalty(self):
        """Het throughput below Uni at the same node count, seed by seed"""
        start_time = time.time()
        try:
            lam_max = 200 if self.quick else self.settings.lambda_max
            het_settings = self.settings.with_values({"topology": "het", "rounds": self.rounds, "lambda_max": lam_max})
            side = het_settings.grid_side * het_settings.sub_size
            het_runs = self._run("het", het_settings, self.seeds)
            uni_runs = []
            for het in het_runs:
                uni_settings = self.settings.with_values({"n": het.n, "width": side, "height": side,
                                                          "rounds": self.rounds})
                uni_runs.extend(self._run(f"het-uni/n={het.n}", uni_settings, [het.seed]))
            het_mean = float(np.mean([s.throughput for s in het_runs]))
            uni_mean = float(np.mean([s.throughput for s in uni_runs]))
            self.log_test("Heterogeneity penalty", het_mean < uni_mean,
                          f"het {het_mean:.3f} vs uni {uni_mean:.3f} over {len(het_runs)} seeds",
                          time.time() - start_time)
        except Exception as e:
            self.log_test("Heterogeneity penalty", False, str(e), time.time() - start_time)

    def test_convergence(self, summaries: List[RunSummary]):
        """Aggregate probability starts at n*p_hat and collapses quickly"""
        start_time = time.time()
        try:
            if not summaries:
                raise RuntimeError("no default-parameter runs to inspect")
            exact_start, converged = 0, 0
            for summary in summaries:
                agg = summary.aggregate_p
                initial = math.fsum([self.settings.p_hat] * summary.n)
                exact_start += agg[0] == initial
                converged += bool(np.min(agg[:CONVERGENCE_ROUNDS]) < CONVERGENCE_FRACTION * initial)
            need = math.ceil(CONVERGENCE_SHARE * len(summaries))
            ok = exact_start == len(summaries) and converged >= need
            self.log_test("Convergence", ok, f"exact start {exact_start}/{len(summaries)}, "
                          f"converged {converged}/{len(summaries)}", time.time() - start_time)
        except Exception as e:
            self.log_test("Convergence", False, str(e), time.time() - start_time)

    def test_impossibility(self):
        """Two nodes at R1 under a constant 1.1*theta jammer never receive"""
        start_time = time.time()
        try:
            summaries = self._run("pair", self._impossibility_settings(), self.seeds)
            total = sum(s.total_receptions for s in summaries)
            self.log_test("Impossibility regression", total == 0, f"{total} receptions", time.time() - start_time)
        except Exception as e:
            self.log_test("Impossibility regression", False, str(e), time.time() - start_time)

    def test_interference_oracle(self):
        """Grid-indexed interference equals the pairwise sum"""
        start_time = time.time()
        try:
            phys = self.settings.physical()
            r1, _ = zone_radii(phys)
            rng = np.random.default_rng(self.settings.seed)
            worst = 0.0
            for _ in range(ORACLE_INSTANCES):
                n = int(rng.integers(2, 201))
                side = float(rng.uniform(5.0, 25.0))
                topo = gen_uniform(n, side, side, rng)
                index = GridIndex.build(topo, r1)
                tx = np.flatnonzero(rng.random(n) < rng.uniform(0.05, 0.5))
                activity = RoundActivity.build(tx.tolist(), rng.random(n) * 0.5)
                for v in range(n):
                    fast = interference_at(v, activity, topo, index, phys)
                    slow = brute_force_interference(v, activity, topo, phys)
                    worst = max(worst, abs(fast - slow) / max(abs(slow), 1e-300))
            self.log_test("Interference oracle", worst <= ORACLE_TOLERANCE, f"max relative error {worst:.2e}",
                          time.time() - start_time)
        except Exception as e:
            self.log_test("Interference oracle", False, str(e), time.time() - start_time)

    def test_trace_audits(self):
        """Ledger, uniqueness and state-step results over every run made so far"""
        ok = self.audited_runs > 0
        ledger_details = f"{self.ledger_failures} failing runs of {self.audited_runs}"
        ledger_ok = ok and self.ledger_failures == 0
        if self.settings.sliding_windows:
            ledger_details += f", {self.sliding_failures} over budget in a sliding window"
            ledger_ok = ledger_ok and self.sliding_failures == 0
        self.log_test("Budget ledger", ledger_ok, ledger_details)
        self.log_test("Reception uniqueness", ok and self.audit.multiple_decoders == 0
                      and self.audit.mismatched_receptions == 0,
                      f"{self.audit.multiple_decoders} double decodes, "
                      f"{self.audit.mismatched_receptions} mismatches in {self.audit.rounds} rounds")
        self.log_test("Protocol-state invariants", ok and self.state_failures == 0,
                      f"{self.state_failures} violations")

    def test_determinism(self):
        """Every run made so far reproduces its trace hash"""
        start_time = time.time()
        try:
            configs = [config.model_copy(update={"audit": False}) for _, config, _ in self.history]
            reruns = run_configs(configs, self.workers) if configs else []
            mismatched = [key for (key, _, digest), again in zip(self.history, reruns) if again.trace_hash != digest]
            self.log_test("Determinism", bool(self.history) and not mismatched,
                          f"mismatched: {mismatched}" if mismatched else f"{len(reruns)} reruns",
                          time.time() - start_time)
        except Exception as e:
            self.log_test("Determinism", False, str(e), time.time() - start_time)

    def run_all_tests(self) -> bool:
        """Run all acceptance checks"""
        print("🧪 Starting acceptance suite" + (" (quick)" if self.quick else "") + "\n")
        summaries = self.test_throughput()
        self.test_convergence(summaries)
        del summaries
        self.test_impossibility()
        self.test_interference_oracle()
        self.test_scale_insensitivity()
        self.test_heterogeneity_penalty()
        self.test_trace_audits()
        self.test_determinism()

        print("\n" + "=" * 60)
        print("📊 ACCEPTANCE SUMMARY")
        print("=" * 60)
        passed = sum(1 for r in self.test_results if r["success"])
        total = len(self.test_results)
        print(f"Checks Passed: {passed}/{total}")
        print(f"Total Runtime: {sum(r['duration'] for r in self.test_results):.2f}s")
        failed_tests = [r for r in self.test_results if not r["success"]]
        if failed_tests:
            print("\n❌ Failed Checks:")
            for test in failed_tests:
                print(f"  - {test['test']}: {test['details']}")
        else:
            print("\n🎉 All checks passed!")
        print("\n" + "=" * 60)
        return not failed_tests
