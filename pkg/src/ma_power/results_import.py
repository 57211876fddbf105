"""Read JSON result files and re-verify every stored design."""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from pydantic import ValidationError

from .errors import MaPowerError, ResultFileError
from .harness import ExperimentResult, build_trial, sinr_target_for, verify_design

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ["config", "records", "designs"]
POWER_RTOL = 1e-9


def load_result(json_file: Path) -> ExperimentResult:
    try:
        data = json.loads(Path(json_file).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ResultFileError(f"File not found: {json_file}") from e
    except json.JSONDecodeError as e:
        raise ResultFileError(f"Invalid JSON: {e}") from e
    missing = [key for key in REQUIRED_KEYS if key not in data]
    if missing:
        raise ResultFileError(f"Missing required keys: {missing}")
    try:
        return ExperimentResult.model_validate(
            {k: data[k] for k in REQUIRED_KEYS}
        )
    except ValidationError as e:
        raise ResultFileError(f"Malformed result file: {e}") from e


def verify_results(result: ExperimentResult | Path) -> dict:
    """Rebuild each instance from the config echo and seed and re-check its design."""
    if not isinstance(result, ExperimentResult):
        result = load_result(result)
    stats = {"designs": 0, "verified": 0, "errors": []}
    config = result.config
    records = {(r.sweep_index, r.seed, r.scheme): r for r in result.records}
    for entry in result.designs:
        stats["designs"] += 1
        label = f"{entry.scheme.value} seed {entry.seed} point {entry.sweep_index}"
        try:
            pinned = config.at_sweep_value(config.sweep_points[entry.sweep_index])
            instance = build_trial(
                config, entry.sweep_index, entry.seed, sinr_target_for(pinned, entry.scheme)
            )
            design = entry.to_design(instance)
        except (MaPowerError, IndexError, ValueError) as e:
            stats["errors"].append(f"{label}: cannot rebuild ({e})")
            continue
        check = verify_design(entry.scheme, instance, design)
        problems = list(check.violations)
        record = records.get((entry.sweep_index, entry.seed, entry.scheme))
        if record is None:
            problems.append("no matching record")
        elif record.avg_power_w is None or not math.isclose(
            record.avg_power_w, design.avg_power, rel_tol=POWER_RTOL
        ):
            problems.append(
                f"power: recorded {record.avg_power_w}, recomputed {design.avg_power:.12g}"
            )
        if problems:
            stats["errors"].append(f"{label}: {'; '.join(problems)}")
        else:
            stats["verified"] += 1
    logger.info("verified %d of %d designs", stats["verified"], stats["designs"])
    return stats


def main():
    """Main entry point for the result verification script."""
    parser = argparse.ArgumentParser(description="Re-verify the designs stored in a JSON result file")
    parser.add_argument("json_file", type=Path, help="Path to JSON result file")
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="Validate the file structure without re-solving anything",
    )
    args = parser.parse_args()

    if not args.json_file.exists():
        print(f"Error: JSON file not found: {args.json_file}", file=sys.stderr)
        sys.exit(1)

    try:
        result = load_result(args.json_file)
    except ResultFileError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)

    if args.dry_run:
        print(f"✓ Result file is valid: {args.json_file}", file=sys.stderr)
        print(f"  Contains: {len(result.records)} records, {len(result.designs)} designs", file=sys.stderr)
        sys.exit(0)

    stats = verify_results(result)
    print(f"Verified {stats['verified']} of {stats['designs']} designs", file=sys.stderr)
    if stats["errors"]:
        print(f"\nErrors ({len(stats['errors'])}):", file=sys.stderr)
        for error in stats["errors"][:10]:
            print(f"  - {error}", file=sys.stderr)
        if len(stats["errors"]) > 10:
            print(f"  ... and {len(stats['errors']) - 10} more", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
