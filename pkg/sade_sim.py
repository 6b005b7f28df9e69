#!/usr/bin/env python3
"""
Command line entry for the jamming-resistant MAC simulator.

    sade_sim.py run     single run at the configured seed
    sade_sim.py sweep   an experiment grid x seeds into <output_dir>/<experiment>/
    sade_sim.py compare SADE against exponential backoff on paired runs
    sade_sim.py check   acceptance suite

Exit codes: 0 success, 2 configuration error, 3 run failure, 4 acceptance failure.
"""

import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from acceptance import AcceptanceSuite
from adversary import write_jam_schedule
from config import ConfigError, dump_config, load_config, parse_override
from engine import run, write_trace_binary, write_trace_csv
from experiments import ExperimentSpec, run_experiment
from metrics import competitive_throughput, diagnostics_to_csv, simulation_throughput

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_ACCEPTANCE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="SINR jamming-resistant MAC simulator")
    parser.add_argument("command", choices=["run", "sweep", "compare", "check"], help="What to do")
    parser.add_argument("--config", help="YAML settings file")
    parser.add_argument("--alpha", type=float, help="Path-loss exponent")
    parser.add_argument("--epsilon", type=float, help="Jamming slack constant")
    parser.add_argument("--seed", type=int, help="First seed")
    parser.add_argument("--rounds", type=int, help="Rounds per run")
    parser.add_argument("--jammer", choices=["reg", "bur", "const", "adaptive", "none"], help="Jamming strategy")
    parser.add_argument("--protocol", choices=["sade", "backoff"], help="MAC protocol")
    parser.add_argument("--experiment", help="Experiment kind for sweep")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any settings key (repeatable; grid.KEY=[...] sets a sweep axis)")
    parser.add_argument("--workers", type=int, help="Worker processes (default from SADE_WORKERS)")
    parser.add_argument("--trace-csv", help="run: write the full trace as CSV")
    parser.add_argument("--trace-bin", help="run: write the full trace in binary framing")
    parser.add_argument("--jam-schedule", help="run: write the non-zero jamming schedule as CSV")
    parser.add_argument("--diagnostics", help="run: write per-node zone, sector and window diagnostics as CSV")
    parser.add_argument("--diagnostics-round", type=int, help="run: round the zone and sector columns describe (default last)")
    parser.add_argument("--dump-config", help="Write the effective settings to this file")
    parser.add_argument("--quick", action="store_true", help="check: reduced seeds and rounds")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return parser


def collect_overrides(args: argparse.Namespace) -> List:
    overrides = []
    for key in ("alpha", "epsilon", "seed", "rounds", "jammer", "protocol", "experiment", "workers"):
        value = getattr(args, key)
        if value is not None:
            overrides.append((key, value))
    if args.command == "compare":
        overrides.append(("experiment", "baseline_compare"))
    overrides.extend(parse_override(item) for item in args.overrides)
    return overrides


def cmd_run(settings, args) -> int:
    trace = run(settings.to_sim_config())
    thr = simulation_throughput(trace)
    comp = competitive_throughput(trace)
    print(f"n={trace.topology.n} rounds={len(trace.records)} seed={trace.config.seed}")
    print(f"simulation throughput: {thr.value if thr.value is not None else 'n/a'}"
          f" ({len(thr.excluded)} nodes excluded)")
    print(f"competitive throughput: {comp.value:.4f}" + (" (vacuous)" if comp.vacuous else ""))
    print(f"receptions: {trace.summary.total_receptions}")
    print(f"trace hash: {trace.trace_hash}")
    if args.trace_csv:
        write_trace_csv(trace, args.trace_csv)
        logger.info(f"Trace written to {args.trace_csv}")
    if args.trace_bin:
        write_trace_binary(trace, args.trace_bin)
        logger.info(f"Binary trace written to {args.trace_bin}")
    if args.jam_schedule:
        rows = write_jam_schedule(args.jam_schedule, trace.noise_matrix())
        logger.info(f"{rows} jamming entries written to {args.jam_schedule}")
    if args.diagnostics:
        Path(args.diagnostics).write_text(diagnostics_to_csv(trace, args.diagnostics_round))
        logger.info(f"Diagnostics written to {args.diagnostics}")
    return EXIT_OK


def cmd_sweep(settings, args) -> int:
    spec = ExperimentSpec.from_settings(settings)
    result = run_experiment(spec, args.workers)
    print(f"{result.kind}: {len(result.cells)} cells, status {result.status}")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK if result.status == "ok" else EXIT_RUN


def cmd_check(settings, args) -> int:
    suite = AcceptanceSuite(settings, quick=args.quick, workers=args.workers)
    return EXIT_OK if suite.run_all_tests() else EXIT_ACCEPTANCE


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        settings = load_config(args.config, collect_overrides(args))
        if args.dump_config:
            dump_config(settings, args.dump_config)
            logger.info(f"Effective settings written to {args.dump_config}")
    except (ConfigError, ValidationError) as e:
        logger.error(str(e))
        return EXIT_CONFIG

    handlers = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_sweep, "check": cmd_check}
    try:
        return handlers[args.command](settings, args)
    except (ConfigError, ValidationError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.error(traceback.format_exc())
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
