#!/usr/bin/env python3
"""
Run-directory writers and the schemas every emitted file must follow.

Each run directory holds ``config.json`` (the resolved experiment config),
one or more CSV tables and ``summary.json``. CSV payloads never contain
timestamps, so reruns with the same config are byte-identical; wall-clock
metadata lives only in the summary.
"""
import csv
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from core.errors import SchemaError

logger = logging.getLogger(__name__)

SUMMARY_FORMAT_VERSION = 1

CSV_SCHEMAS = {
    "checks.csv": [
        ("check", str), ("status", str), ("measured", float), ("tolerance", float), ("detail", str),
    ],
    "train_log.csv": [
        ("method", str), ("seed", int), ("step", int), ("task_loss", float), ("balance_loss", float),
        ("grad_norm", float), ("min_load", float), ("max_load", float),
    ],
    "train_summary.csv": [
        ("method", str), ("seed", int), ("final_loss", float), ("final_accuracy", float),
    ],
    "scale_sweep.csv": [
        ("scale", float), ("seed", int), ("final_loss", float), ("initial_grad_norm", float), ("mean_grad_norm", float),
    ],
    "retention.csv": [
        ("method", str), ("seed", int), ("phase", int), ("task", int), ("accuracy", float),
    ],
    "degradation.csv": [
        ("method", str), ("seed", int), ("task", int), ("degradation", float),
    ],
    "sweep.csv": [
        ("n_experts", int), ("top_k", int), ("total_rank", int), ("status", str), ("reason", str),
        ("final_loss", float), ("final_accuracy", float), ("min_load", float),
    ],
    "moments.csv": [
        ("logit_scale", float), ("expert", int), ("samples", int), ("theoretical_mean", float),
        ("empirical_mean", float), ("theoretical_variance", float), ("empirical_variance", float),
    ],
    "accounting.csv": [
        ("preset", str), ("method", str), ("params", float), ("proportion", float), ("flops", float),
    ],
}

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format_version", "command", "seed", "created_at", "outputs", "results"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": SUMMARY_FORMAT_VERSION},
        "command": {"enum": ["verify", "train", "forget", "sweep", "moments", "account"]},
        "seed": {"type": "integer", "minimum": 0},
        "created_at": {"type": "string"},
        "outputs": {"type": "array", "items": {"type": "string"}},
        "results": {"type": "object"},
    },
}


def format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def to_jsonable(value):
    """numpy scalars/arrays to plain JSON; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_csv(path, rows):
    path = Path(path)
    schema = CSV_SCHEMAS.get(path.name)
    if schema is None:
        raise SchemaError(f"no schema registered for {path.name}")
    columns = [name for name, _ in schema]
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            unknown = set(row) - set(columns)
            if unknown:
                raise SchemaError(f"{path.name}: unexpected columns {sorted(unknown)}")
            writer.writerow([format_cell(row.get(name)) for name in columns])
    return path


class RunWriter:
    """Collects the files of one run directory."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.outputs = []

    def prepare(self, config):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.json").write_text(config.to_json(), encoding="utf-8")
        self.outputs.append("config.json")

    def table(self, name, rows):
        write_csv(self.out_dir / name, rows)
        self.outputs.append(name)
        logger.info("wrote %s", self.out_dir / name)

    def summary(self, command, seed, results):
        payload = {
            "format_version": SUMMARY_FORMAT_VERSION,
            "command": command,
            "seed": int(seed),
            "created_at": datetime.now(timezone.utc).isoformat(),
            "outputs": sorted(self.outputs),
            "results": to_jsonable(results),
        }
        path = self.out_dir / "summary.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------- schema checks ----------
def _check_cell(text, kind):
    # empty cells mark values that do not apply to the row
    if text == "" or kind is str:
        return
    kind(text)


def check_csv(path):
    """Problems found in one CSV file (empty when it conforms)."""
    path = Path(path)
    schema = CSV_SCHEMAS.get(path.name)
    if schema is None:
        return [f"{path.name}: no schema registered"]
    raw = path.read_bytes()
    if b"\r" in raw:
        return [f"{path.name}: line endings must be LF"]
    problems = []
    reader = csv.reader(raw.decode("utf-8").splitlines())
    header = next(reader, None)
    expected = [name for name, _ in schema]
    if header != expected:
        return [f"{path.name}: header {header} != {expected}"]
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(schema):
            problems.append(f"{path.name}:{line_no}: expected {len(schema)} cells, got {len(row)}")
            continue
        for text, (name, kind) in zip(row, schema):
            try:
                _check_cell(text, kind)
            except ValueError:
                problems.append(f"{path.name}:{line_no}: column {name} is not {kind.__name__}: {text!r}")
    return problems


def check_summary(path):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        return [f"summary.json: {e}"]
    validator = Draft202012Validator(SUMMARY_SCHEMA)
    return [f"summary.json: {error.message}" for error in validator.iter_errors(payload)]


def check_run_directory(run_dir, parse_config=None):
    """
    Validate every artifact of a finished run without recomputing anything.
    ``parse_config`` validates the config copy when given.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return [f"{run_dir}: not a directory"]
    problems = []
    config_path = run_dir / "config.json"
    if not config_path.exists():
        problems.append("config.json: missing")
    elif parse_config is not None:
        try:
            parse_config(config_path.read_text(encoding="utf-8"))
        except SchemaError as e:
            problems.append(f"config.json: {e}")
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        problems.append("summary.json: missing")
    else:
        problems.extend(check_summary(summary_path))
        try:
            listed = json.loads(summary_path.read_text(encoding="utf-8")).get("outputs", [])
        except (json.JSONDecodeError, AttributeError):
            listed = []
        for name in listed:
            if not (run_dir / name).exists():
                problems.append(f"{name}: listed in summary but missing")
    for csv_path in sorted(run_dir.glob("*.csv")):
        problems.extend(check_csv(csv_path))
    return problems
