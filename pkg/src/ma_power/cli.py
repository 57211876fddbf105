"""Command-line entry point: solve, sweep, verify and trace."""

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import MaPowerError
from .harness import evaluate, run_experiment, summarize, trace_run
from .models import CsiMode, ScenarioConfig, Scheme, SweepAxis
from .results_export import round_floats, write_csv, write_json, write_trace_csv
from .results_import import verify_results

logger = logging.getLogger("ma_power")

# flag dest -> (scenario path, type)
_SCENARIO_FLAGS = {
    "scenario_id": (("scenario_id",), str),
    "n_elements": (("n_elements",), int),
    "n_users": (("n_users",), int),
    "gamma_db": (("gamma_db",), float),
    "noise_dbm": (("noise_dbm",), float),
    "min_distance_mm": (("min_distance_mm",), float),
    "t_ma_s": (("t_ma_s",), float),
    "t_data_s": (("t_data_s",), float),
    "kappa": (("kappa",), float),
    "csi": (("csi",), str),
    "alpha_mc": (("alpha_mc",), float),
    "area_scale": (("grid", "area_scale"), float),
    "step_mm": (("grid", "step_mm"), float),
    "n_paths": (("channel", "n_paths"), int),
    "seeds": (("seeds", "count"), int),
    "seed_base": (("seeds", "base"), int),
    "node_budget": (("tolerances", "node_budget"), int),
    "bnb_gap": (("tolerances", "bnb_gap"), float),
    "enumeration_budget": (("tolerances", "enumeration_budget"), int),
    "workers": (("workers",), int),
}


def _add_scenario_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="Scenario JSON file (applied over flags)")
    for dest, (_, kind) in _SCENARIO_FLAGS.items():
        flag = "--" + dest.replace("_", "-")
        if dest == "csi":
            parser.add_argument(flag, dest=dest, choices=[c.value for c in CsiMode], default=None)
        else:
            parser.add_argument(flag, dest=dest, type=kind, default=None)
    parser.add_argument("--coupling", action="store_true", default=None, help="Enable mutual coupling")
    parser.add_argument("--compensate-rate", action="store_true", default=None)
    parser.add_argument(
        "--schemes", default=None, help="Comma-separated schemes: " + ",".join(s.value for s in Scheme)
    )
    parser.add_argument("--sweep-axis", choices=[a.value for a in SweepAxis], default=None)
    parser.add_argument("--sweep-values", default=None, help="Comma-separated sweep values")


def scenario_from_args(args: argparse.Namespace) -> ScenarioConfig:
    overrides: dict = {}
    for dest, (path, _) in _SCENARIO_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    if getattr(args, "coupling", None):
        overrides["coupling"] = True
    if getattr(args, "compensate_rate", None):
        overrides["compensate_rate"] = True
    if getattr(args, "schemes", None):
        overrides["schemes"] = [s.strip() for s in args.schemes.split(",") if s.strip()]
    if getattr(args, "sweep_axis", None):
        values = [float(v) for v in (args.sweep_values or "").split(",") if v.strip()]
        overrides["sweep"] = {"axis": args.sweep_axis, "values": values}
    return ScenarioConfig.load(args.config, overrides)


def cmd_solve(args: argparse.Namespace) -> None:
    config = scenario_from_args(args)
    outcome = evaluate(config, args.sweep_index, args.seed, Scheme(args.scheme))
    payload = outcome.record.model_dump(mode="json")
    if outcome.design is not None and outcome.design.found:
        payload["positions"] = [int(p) for p in outcome.design.positions]
    print(json.dumps(round_floats(payload), indent=2, default=str))
    record = outcome.record
    print(
        f"{record.scheme.value}: {record.status.value}, P={record.avg_power_w} W, "
        f"verified={record.verified}",
        file=sys.stderr,
    )


def cmd_sweep(args: argparse.Namespace) -> None:
    config = scenario_from_args(args)

    def progress(done: int, total: int) -> None:
        logger.info("completed %d/%d trials", done, total)

    result = run_experiment(config, progress=progress)
    write_json(result, args.output)
    if args.csv:
        write_csv(result.records, args.csv)
    for row in summarize(result):
        print(
            f"  point {row['sweep_index']} ({row['sweep_value']}) {row['scheme']}: "
            f"{row['solved']}/{row['records']} solved, mean P = {row['mean_avg_power_w']} W",
            file=sys.stderr,
        )


def cmd_verify(args: argparse.Namespace) -> None:
    stats = verify_results(args.json_file)
    print(f"Verified {stats['verified']} of {stats['designs']} designs", file=sys.stderr)
    if stats["errors"]:
        for error in stats["errors"][:10]:
            print(f"  - {error}", file=sys.stderr)
        sys.exit(1)


def cmd_trace(args: argparse.Namespace) -> None:
    config = scenario_from_args(args)
    rows = trace_run(config, args.seed, args.sweep_index, Scheme(args.scheme))
    write_trace_csv(rows, args.output)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ma-power",
        description="Joint movable-antenna placement and beamforming for minimum BS power",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for progress (INFO), -vv for solver detail (DEBUG)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="Solve one seeded instance with one scheme")
    _add_scenario_flags(solve)
    solve.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.BNB.value)
    solve.add_argument("--seed", type=int, default=0)
    solve.add_argument("--sweep-index", type=int, default=0)
    solve.set_defaults(func=cmd_solve)

    sweep = sub.add_parser("sweep", help="Monte Carlo sweep over seeds and sweep values")
    _add_scenario_flags(sweep)
    sweep.add_argument("-o", "--output", type=Path, default=None, help="JSON output (default: stdout)")
    sweep.add_argument("--csv", type=Path, default=None, help="Also write the records as CSV")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="Re-check every design in a JSON result file")
    verify.add_argument("json_file", type=Path)
    verify.set_defaults(func=cmd_verify)

    trace = sub.add_parser("trace", help="Export a BnB or SCA convergence trace as CSV")
    _add_scenario_flags(trace)
    trace.add_argument("--scheme", choices=[Scheme.BNB.value, Scheme.SCA.value], default=Scheme.BNB.value)
    trace.add_argument("--seed", type=int, default=0)
    trace.add_argument("--sweep-index", type=int, default=0)
    trace.add_argument("-o", "--output", type=Path, default=None, help="CSV output (default: stdout)")
    trace.set_defaults(func=cmd_trace)
    return parser


def log_level(verbosity: int) -> int:
    if verbosity >= 2:
        return logging.DEBUG
    if verbosity == 1:
        return logging.INFO
    return logging.WARNING


def main(argv: list[str] | None = None):
    """Main entry point for the ma-power command."""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = log_level(args.verbose)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)
    try:
        args.func(args)
    except (MaPowerError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
