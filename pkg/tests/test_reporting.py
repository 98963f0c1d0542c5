import json

import numpy as np
import pytest

from config.experiment_config import parse_experiment_config
from core.errors import SchemaError
from utils.reporting import RunWriter, check_csv, check_run_directory, check_summary, format_cell, to_jsonable, write_csv


def test_format_cell():
    assert format_cell(None) == ""
    assert format_cell(True) == "true"
    assert format_cell(np.int64(7)) == "7"
    assert format_cell(0.1) == "0.10000000000000001"
    assert format_cell(2.0) == "2"


def test_to_jsonable_converts_numpy_and_non_finite():
    value = to_jsonable({"a": np.float64(1.5), "b": np.array([1, 2]), "c": float("nan"), "d": np.bool_(True)})
    assert value == {"a": 1.5, "b": [1, 2], "c": None, "d": True}


def test_write_csv_uses_lf_and_full_precision(tmp_path):
    path = write_csv(tmp_path / "train_summary.csv", [
        {"method": "single-lora", "seed": 0, "final_loss": 1 / 3, "final_accuracy": None},
    ])
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines() == [
        "method,seed,final_loss,final_accuracy",
        "single-lora,0,0.33333333333333331,",
    ]
    assert check_csv(path) == []


def test_write_csv_rejects_unknown_tables_and_columns(tmp_path):
    with pytest.raises(SchemaError):
        write_csv(tmp_path / "other.csv", [])
    with pytest.raises(SchemaError):
        write_csv(tmp_path / "train_summary.csv", [{"method": "x", "extra": 1}])


def test_check_csv_reports_problems(tmp_path):
    path = tmp_path / "degradation.csv"
    path.write_bytes(b"method,seed,task,degradation\r\nx,0,0,0.5\r\n")
    assert check_csv(path) == ["degradation.csv: line endings must be LF"]
    path.write_bytes(b"method,seed,task,degradation\nx,zero,0,0.5\nx,0,0\n")
    problems = check_csv(path)
    assert len(problems) == 2
    assert "column seed is not int" in problems[0]
    path.write_bytes(b"method,seed\n")
    assert "header" in check_csv(path)[0]


def test_check_summary_validates_schema(tmp_path):
    path = tmp_path / "summary.json"
    path.write_text(json.dumps({"format_version": 1, "command": "train", "seed": 0}))
    problems = check_summary(path)
    assert any("created_at" in p for p in problems)
    path.write_text("{not json")
    assert check_summary(path)[0].startswith("summary.json:")


def test_run_writer_produces_a_conforming_directory(tmp_path):
    config = parse_experiment_config(json.dumps({"schema_version": 1, "command": "account", "seed": 4}))
    writer = RunWriter(tmp_path / "run")
    writer.prepare(config)
    writer.table("accounting.csv", [
        {"preset": "vit-clip", "method": "lora", "params": 1327104, "proportion": 1.4959, "flops": None},
    ])
    writer.summary("account", config.seed, {"ratio": np.float64(2.24)})

    assert check_run_directory(tmp_path / "run", parse_config=parse_experiment_config) == []
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["outputs"] == ["accounting.csv", "config.json"]
    assert summary["results"] == {"ratio": 2.24}


def test_check_run_directory_reports_missing_files(tmp_path):
    assert check_run_directory(tmp_path / "absent")[0].endswith("not a directory")
    problems = check_run_directory(tmp_path)
    assert "config.json: missing" in problems
    assert "summary.json: missing" in problems


def test_check_run_directory_flags_listed_outputs_that_vanished(tmp_path):
    config = parse_experiment_config(json.dumps({"schema_version": 1, "command": "verify", "seed": 0}))
    writer = RunWriter(tmp_path)
    writer.prepare(config)
    writer.table("checks.csv", [])
    writer.summary("verify", 0, {})
    (tmp_path / "checks.csv").unlink()
    assert check_run_directory(tmp_path) == ["checks.csv: listed in summary but missing"]
