#!/usr/bin/env python3

"""
cli.py

Description:
Command-line entry point of the NDVR simulator.

Usage:

    ndvr run --scenario PATH [--seed SEED] --out DIR [--duration S]
             [--validate-only] [--trace-level {none,pkt,full}] [-v]
    ndvr compare --scenario PATH --seeds SEED [SEED ...] [--duration S] [--out DIR] [-v]

Options:

    --scenario PATH       Scenario file (see ndvr/scenario.py for the format).
    --seed SEED           Run seed; overrides [run] seed of the scenario.
    --out DIR             Output directory for the run artifacts.
    --duration S          Simulated seconds; overrides [run] duration_s.
    --validate-only       Parse the scenario and exit without running it.
    --trace-level LEVEL   none, pkt (trace.log) or full (trace.log and events.log).
    --seeds SEED ...      Seeds for the forwarding-mode comparison.
    -v, --verbose         Debug logging.

Exit codes: 0 ok, 2 configuration error, 3 runtime invariant breach or I/O error.

License:
MIT License
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from ndvr.apps_metrics import confidence_interval, write_summary
from ndvr.scenario import ConfigError, ForwardingMode, ScenarioConfig, TraceLevel, load_scenario
from ndvr.simulation import MOBILITY_COLUMNS, ROUTE_COLUMNS, InvariantError, Simulation

logger = logging.getLogger(__name__)

# Exit codes
OK = 0
CONFIG_ERROR = 2
RUNTIME_ERROR = 3

COMPARE_COLUMNS = ["mode", "seed", "delivery_rate_pps", "forwarded_pkts", "overhead_pkts", "undelivered"]


class IoError(Exception):
    """Raised when run artifacts cannot be written"""


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="ndvr", description="NDVR routing simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True, help="scenario file")
    run.add_argument("--seed", type=int, help="run seed, overrides the scenario")
    run.add_argument("--out", help="output directory")
    run.add_argument("--duration", type=float, help="simulated seconds, overrides the scenario")
    run.add_argument("--validate-only", action="store_true", help="parse the scenario and stop")
    run.add_argument("--trace-level", choices=[level.value for level in TraceLevel],
                     help="packet trace detail, overrides the scenario")
    run.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    compare = commands.add_parser("compare", help="compare forwarding modes over several seeds")
    compare.add_argument("--scenario", required=True, help="scenario file")
    compare.add_argument("--seeds", type=int, nargs="+", required=True, help="seeds to run")
    compare.add_argument("--duration", type=float, help="simulated seconds, overrides the scenario")
    compare.add_argument("--out", help="optional directory for compare.csv")
    compare.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser.parse_args(argv)


def apply_overrides(config: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigError("--seed must not be negative")
        updates["seed"] = args.seed
    if any(seed < 0 for seed in getattr(args, "seeds", None) or ()):
        raise ConfigError("--seeds must not be negative")
    if getattr(args, "duration", None) is not None:
        if args.duration <= 0:
            raise ConfigError("--duration must be positive")
        updates["duration_s"] = args.duration
    if getattr(args, "trace_level", None) is not None:
        updates["trace_level"] = TraceLevel(args.trace_level)
    return replace(config, **updates) if updates else config


def _write_csv(rows: List, columns: List[str], path: Path) -> None:
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


def run(config: ScenarioConfig, out_dir) -> int:
    """Run one scenario and write every artifact into ``out_dir``."""
    if config.seed is None:
        raise ConfigError("a seed is required: pass --seed or set [run] seed")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_file = None
        if config.trace_level is not TraceLevel.NONE:
            trace_file = open(out_dir / "trace.log", "w")
    except OSError as e:
        raise IoError(f"cannot write to {out_dir}: {e}")

    try:
        sink = (lambda line: trace_file.write(line + "\n")) if trace_file is not None else None
        sim = Simulation(config, trace=sink, keep_event_log=config.trace_level is TraceLevel.FULL)
        summary = sim.run()
    finally:
        if trace_file is not None:
            trace_file.close()

    try:
        write_summary(summary, out_dir)
        _write_csv(sim.mobility_rows, MOBILITY_COLUMNS, out_dir / "mobility.csv")
        for node in sim.nodes:
            _write_csv(sim.routes(node.label), ROUTE_COLUMNS, out_dir / f"routes_{node.label}.csv")
        if sim.scheduler.log is not None:
            (out_dir / "events.log").write_text("".join(line + "\n" for line in sim.scheduler.log))
    except OSError as e:
        raise IoError(f"cannot write to {out_dir}: {e}")

    metrics = summary.metrics
    print(f"delivered {metrics['delivered']} ({metrics['delivery_rate_pps']:.2f} pps), "
          f"undelivered {metrics['undelivered']}, forwarded {metrics['forwarded_pkts']}, "
          f"overhead {metrics['overhead_pkts']}")
    return OK


def compare(config: ScenarioConfig, seeds: Sequence[int]) -> pd.DataFrame:
    """Run ``config`` under both forwarding modes for every seed, without traces."""
    rows = []
    for mode in ForwardingMode:
        for seed in seeds:
            metrics = Simulation(replace(config, forwarding=mode, seed=seed)).run().metrics
            logger.info("%s seed %d: %.2f pps, %d forwarded", mode.value, seed, metrics["delivery_rate_pps"],
                        metrics["forwarded_pkts"])
            rows.append((mode.value, seed, metrics["delivery_rate_pps"], metrics["forwarded_pkts"],
                         metrics["overhead_pkts"], metrics["undelivered"]))
    return pd.DataFrame(rows, columns=COMPARE_COLUMNS)


def format_comparison(results: pd.DataFrame) -> List[str]:
    lines = []
    for mode, group in results.groupby("mode", sort=False):
        rate, rate_half = confidence_interval(group["delivery_rate_pps"])
        forwarded, forwarded_half = confidence_interval(group["forwarded_pkts"])
        lines.append(f"{mode}: delivery {rate:.2f} +/- {rate_half:.2f} pps, "
                     f"forwarded {forwarded:.1f} +/- {forwarded_half:.1f} pkts ({len(group)} seeds)")
    return lines


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = apply_overrides(load_scenario(args.scenario), args)
        if args.command == "compare":
            results = compare(config, args.seeds)
            for line in format_comparison(results):
                print(line)
            if args.out:
                out_dir = Path(args.out)
                out_dir.mkdir(parents=True, exist_ok=True)
                results.to_csv(out_dir / "compare.csv", index=False)
            return OK
        if args.validate_only:
            print(f"scenario {args.scenario} is valid: {len(config.nodes)} nodes, {config.duration_s} s")
            return OK
        if not args.out:
            raise ConfigError("--out is required unless --validate-only is given")
        return run(config, args.out)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return CONFIG_ERROR
    except (InvariantError, IoError, OSError) as e:
        logger.error("run aborted: %s", e)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
