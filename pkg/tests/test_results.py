"""Tests for JSON/CSV result export and re-verification."""
import csv
import io
import json
import sys

import pytest

from ma_power import results_export, results_import
from ma_power.errors import ResultFileError
from ma_power.harness import run_experiment
from ma_power.models import ExperimentRecord, Scheme
from ma_power.results_export import (
    RECORD_COLUMNS,
    export_to_csv,
    records_to_csv,
    result_to_dict,
    round_floats,
    write_json,
    write_trace_csv,
)
from ma_power.results_import import load_result, verify_results


@pytest.fixture
def result(small_scenario):
    config = small_scenario.model_copy(update={"schemes": [Scheme.BNB, Scheme.RANDOM]})
    return run_experiment(config)


@pytest.fixture
def result_file(result, tmp_path):
    path = tmp_path / "result.json"
    write_json(result, path)
    return path


class TestRoundFloats:
    def test_significant_digits(self):
        assert round_floats(1.23456789012345) == 1.23456789012
        assert round_floats(1.23456789e-9, digits=3) == 1.23e-9

    def test_non_finite_become_none(self):
        assert round_floats({"a": float("inf"), "b": [float("nan"), 2.0]}) == {"a": None, "b": [None, 2.0]}

    def test_other_values_untouched(self):
        assert round_floats({"n": 3, "s": "x", "f": True, "z": None}) == {"n": 3, "s": "x", "f": True, "z": None}


class TestJson:
    def test_structure(self, result):
        data = result_to_dict(result)
        assert data["version"] == results_export.RESULT_VERSION
        assert data["config"]["scenario_id"] == "unit"
        assert data["stats"] == {"records": 2, "designs": 2, "verified": 2}
        assert [r["scheme"] for r in data["records"]] == ["bnb", "random"]
        assert "timestamp" not in data

    def test_round_trip(self, result, result_file):
        loaded = load_result(result_file)
        assert loaded.config == result.config
        assert [r.scheme for r in loaded.records] == [Scheme.BNB, Scheme.RANDOM]
        assert loaded.designs[0].positions == result.designs[0].positions

    def test_prints_without_output(self, result, capsys):
        write_json(result)
        assert json.loads(capsys.readouterr().out)["stats"]["records"] == 2


class TestLoadResult:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ResultFileError, match="File not found"):
            load_result(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ResultFileError, match="Invalid JSON"):
            load_result(path)

    def test_missing_keys(self, tmp_path):
        path = tmp_path / "partial.json"
        path.write_text(json.dumps({"records": []}), encoding="utf-8")
        with pytest.raises(ResultFileError, match="Missing required keys"):
            load_result(path)

    def test_malformed(self, tmp_path):
        path = tmp_path / "malformed.json"
        path.write_text(json.dumps({"config": {}, "records": [{"seed": "x"}], "designs": []}), encoding="utf-8")
        with pytest.raises(ResultFileError, match="Malformed"):
            load_result(path)


class TestVerifyResults:
    def test_all_designs_verified(self, result_file):
        stats = verify_results(result_file)
        assert stats == {"designs": 2, "verified": 2, "errors": []}

    def test_in_memory_result(self, result):
        assert verify_results(result)["verified"] == 2

    def test_tampered_power(self, result_file):
        data = json.loads(result_file.read_text(encoding="utf-8"))
        data["records"][0]["avg_power_w"] *= 0.5
        result_file.write_text(json.dumps(data), encoding="utf-8")
        stats = verify_results(result_file)
        assert stats["verified"] == 1
        assert "power: recorded" in stats["errors"][0]

    def test_tampered_beamformers(self, result_file):
        data = json.loads(result_file.read_text(encoding="utf-8"))
        data["designs"][0]["beam_re"] = [[0.0]]
        data["designs"][0]["beam_im"] = [[0.0]]
        result_file.write_text(json.dumps(data), encoding="utf-8")
        stats = verify_results(result_file)
        assert stats["verified"] == 1
        assert stats["errors"][0].startswith("bnb seed 0 point 0")

    def test_missing_record(self, result_file):
        data = json.loads(result_file.read_text(encoding="utf-8"))
        data["records"] = data["records"][1:]
        result_file.write_text(json.dumps(data), encoding="utf-8")
        stats = verify_results(result_file)
        assert "no matching record" in stats["errors"][0]


class TestCsv:
    def test_header_follows_record_fields(self, result):
        text = records_to_csv(result.records)
        assert text.splitlines()[0].split(",") == list(ExperimentRecord.model_fields)
        assert RECORD_COLUMNS == list(ExperimentRecord.model_fields)

    def test_rows(self, result):
        rows = list(csv.DictReader(io.StringIO(records_to_csv(result.records))))
        assert [r["scheme"] for r in rows] == ["bnb", "random"]
        assert rows[0]["sweep_value"] == ""
        assert float(rows[0]["avg_power_w"]) == pytest.approx(result.records[0].avg_power_w, rel=1e-11)

    def test_trace_columns(self):
        text = write_trace_csv([{"iteration": 0, "objective": 1.5}])
        assert text.splitlines() == ["iteration,objective", "0,1.5"]

    def test_export_from_json(self, result_file, tmp_path):
        out = tmp_path / "records.csv"
        assert export_to_csv(result_file, out) == 2
        assert len(out.read_text(encoding="utf-8").splitlines()) == 3

    def test_export_missing_records(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("{}", encoding="utf-8")
        with pytest.raises(ResultFileError, match="records"):
            export_to_csv(path)


class TestScripts:
    def test_export_main(self, result_file, tmp_path, monkeypatch, capsys):
        out = tmp_path / "out.csv"
        monkeypatch.setattr(sys, "argv", ["ma-power-export", str(result_file), "-o", str(out)])
        results_export.main()
        assert "Exported 2 records" in capsys.readouterr().err
        assert out.exists()

    def test_export_main_error(self, tmp_path, monkeypatch):
        monkeypatch.setattr(sys, "argv", ["ma-power-export", str(tmp_path / "nope.json")])
        with pytest.raises(SystemExit) as exc:
            results_export.main()
        assert exc.value.code == 1

    def test_verify_main_dry_run(self, result_file, monkeypatch, capsys):
        monkeypatch.setattr(sys, "argv", ["ma-power-verify", str(result_file), "--dry-run"])
        with pytest.raises(SystemExit) as exc:
            results_import.main()
        assert exc.value.code == 0
        assert "2 records, 2 designs" in capsys.readouterr().err

    def test_verify_main(self, result_file, monkeypatch, capsys):
        monkeypatch.setattr(sys, "argv", ["ma-power-verify", str(result_file)])
        results_import.main()
        assert "Verified 2 of 2 designs" in capsys.readouterr().err

    def test_verify_main_missing_file(self, tmp_path, monkeypatch):
        monkeypatch.setattr(sys, "argv", ["ma-power-verify", str(tmp_path / "nope.json")])
        with pytest.raises(SystemExit) as exc:
            results_import.main()
        assert exc.value.code == 1
