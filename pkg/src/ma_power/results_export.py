"""Write experiment results as JSON and CSV."""

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any

from .errors import ResultFileError
from .harness import ExperimentResult
from .models import ExperimentRecord

RESULT_VERSION = "1.0"
SIGNIFICANT_DIGITS = 12
RECORD_COLUMNS = list(ExperimentRecord.model_fields)
TRACE_COLUMNS = ["iteration", "lower_bound", "upper_bound", "open_nodes", "wall_s"]


def round_floats(obj: Any, digits: int = SIGNIFICANT_DIGITS) -> Any:
    """Floats to `digits` significant digits; non-finite values become None."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, list | tuple):
        return [round_floats(v, digits) for v in obj]
    return obj


def result_to_dict(result: ExperimentResult) -> dict:
    """JSON structure with the config echo, records, designs and counts."""
    data = {
        "version": RESULT_VERSION,
        "config": result.config.model_dump(mode="json"),
        "records": [r.model_dump(mode="json") for r in result.records],
        "designs": [d.model_dump(mode="json") for d in result.designs],
    }
    data["stats"] = {
        "records": len(result.records),
        "designs": len(result.designs),
        "verified": sum(r.verified for r in result.records),
    }
    return round_floats(data)


def write_json(result: ExperimentResult, output_file: Path | None = None) -> dict:
    data = result_to_dict(result)
    text = json.dumps(data, indent=2, default=str, ensure_ascii=False)
    if output_file:
        output_file.write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return data


def _rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in columns})
    return buffer.getvalue()


def records_to_csv(records: list[ExperimentRecord] | list[dict]) -> str:
    rows = [
        round_floats(r.model_dump(mode="json") if isinstance(r, ExperimentRecord) else dict(r))
        for r in records
    ]
    return _rows_to_csv(rows, RECORD_COLUMNS)


def write_csv(records: list[ExperimentRecord] | list[dict], output_file: Path | None = None) -> str:
    text = records_to_csv(records)
    if output_file:
        output_file.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return text


def write_trace_csv(rows: list[dict], output_file: Path | None = None) -> str:
    """Convergence trace; the columns follow the first row (BnB bounds or SCA objective)."""
    columns = list(rows[0]) if rows else TRACE_COLUMNS
    text = _rows_to_csv([round_floats(r) for r in rows], columns)
    if output_file:
        output_file.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return text


def export_to_csv(json_file: Path, output_file: Path | None = None) -> int:
    """Re-emit the records of a JSON result file as CSV; returns the row count."""
    try:
        data = json.loads(json_file.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ResultFileError(f"File not found: {json_file}") from e
    except json.JSONDecodeError as e:
        raise ResultFileError(f"Invalid JSON: {e}") from e
    if "records" not in data:
        raise ResultFileError("Missing required key: records")
    write_csv(data["records"], output_file)
    return len(data["records"])


def main():
    """Main entry point for the CSV export script."""
    parser = argparse.ArgumentParser(description="Export the records of a JSON result file as CSV")
    parser.add_argument("json_file", type=Path, help="Path to JSON result file")
    parser.add_argument(
        "-o",
        "--output",
        type=Path,
        default=None,
        help="Output file path (default: stdout)",
    )
    args = parser.parse_args()

    try:
        count = export_to_csv(args.json_file, args.output)
    except Exception as e:
        print(f"Error exporting results: {e}", file=sys.stderr)
        sys.exit(1)
    if args.output:
        print(f"Exported {count} records to {args.output}", file=sys.stderr)


if __name__ == "__main__":
    main()
