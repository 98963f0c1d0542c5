import csv
import json
from pathlib import Path

import pytest

from main import main

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _config(tmp_path, command, seed=0, **sections):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps({"schema_version": 1, "command": command, "seed": seed, **sections}))
    return path


def _rows(path):
    with path.open(newline="") as handle:
        return list(csv.DictReader(handle))


def test_account_run_is_reproducible(tmp_path):
    config = CONFIG_DIR / "account.json"
    assert main(["account", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["account", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    for name in ("accounting.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["results"]["proportions"]["vit-clip"]["moe-lora"] == 2.24
    assert summary["results"]["proportions"]["decoder-7B"]["moe-lora"] == 0.81
    assert main(["--check-schemas", str(tmp_path / "a")]) == 0


def test_moments_run(tmp_path, capsys):
    config = _config(tmp_path, "moments", moments={"n_experts": 4, "top_k": 2, "samples": 2000, "shards": 2,
                                                   "logit_scales": [1.0, 1e-6]})
    assert main(["moments", "--config", str(config), "--out", str(tmp_path / "run")]) == 0
    rows = _rows(tmp_path / "run" / "moments.csv")
    assert len(rows) == 8
    assert float(rows[0]["theoretical_mean"]) == 0.25
    assert "[Moments]" in capsys.readouterr().out


def test_train_run_writes_logs(tmp_path):
    config = _config(
        tmp_path, "train", seed=2,
        layer={"total_rank": 8, "n_experts": 4, "top_k": 2},
        task={"m": 16, "n": 16, "band_width": 4, "eval_size": 64},
        train={"lr": 0.01, "steps": 10, "batch_size": 8, "eval_every": 5},
        experiment={"methods": ["spectral-moe", "single-lora"], "seeds": [0, 1], "scales": [1.0, 2.0]},
    )
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert len(_rows(out / "train_log.csv")) == 2 * 2 * 10
    assert {r["seed"] for r in _rows(out / "train_summary.csv")} == {"0", "1"}
    assert len(_rows(out / "scale_sweep.csv")) == 4
    assert main(["--check-schemas", str(out)]) == 0


def test_seed_override_is_recorded(tmp_path):
    config = CONFIG_DIR / "account.json"
    assert main(["account", "--config", str(config), "--out", str(tmp_path), "--seed", "9"]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 9


def test_divergence_exit_code(tmp_path):
    config = _config(
        tmp_path, "train",
        task={"m": 8, "n": 8, "band_width": 4, "eval_size": 16},
        train={"lr": 100.0, "steps": 200, "batch_size": 8},
        experiment={"methods": ["full-ft"], "seeds": [0]},
    )
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == 4


@pytest.mark.parametrize("text", ["{not json", json.dumps({"schema_version": 1, "command": "account"})])
def test_bad_config_exit_code(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    assert main(["account", "--config", str(path), "--out", str(tmp_path / "run")]) == 2


def test_config_for_another_command(tmp_path):
    assert main(["verify", "--config", str(CONFIG_DIR / "account.json"), "--out", str(tmp_path)]) == 2


def test_forgetting_with_one_task_is_a_config_error(tmp_path):
    config = _config(tmp_path, "forget", task={"m": 8, "n": 8, "count": 1}, experiment={"seeds": [0]})
    assert main(["forget", "--config", str(config), "--out", str(tmp_path / "run")]) == 2


def test_missing_config_exit_code(tmp_path):
    assert main(["account", "--config", str(tmp_path / "absent.json")]) == 3


def test_missing_arguments(tmp_path):
    assert main([]) == 2
    assert main(["account", "--config", str(CONFIG_DIR / "account.json"), "--jobs", "0"]) == 2


def test_check_schemas_reports_problems(tmp_path):
    assert main(["--check-schemas", str(tmp_path)]) == 1


def test_check_script_validates_run_directories(tmp_path, capsys):
    from check import check_runs

    assert main(["account", "--config", str(CONFIG_DIR / "account.json"), "--out", str(tmp_path / "ok")]) == 0
    (tmp_path / "empty").mkdir()
    assert check_runs([str(tmp_path / "ok"), str(tmp_path / "empty")]) == 1
    out = capsys.readouterr().out
    assert "  - OK" in out
    assert "config.json: missing" in out


def test_forget_run(tmp_path):
    config = _config(
        tmp_path, "forget", seed=1,
        layer={"total_rank": 8, "n_experts": 4, "top_k": 2},
        task={"m": 16, "n": 16, "band_width": 4, "count": 2, "eval_size": 64, "segment_gain": 4.0},
        train={"lr": 0.01, "steps": 10, "batch_size": 8},
        experiment={"methods": ["spectral-moe", "single-lora"], "seeds": [0]},
    )
    out = tmp_path / "run"
    assert main(["forget", "--config", str(config), "--out", str(out)]) == 0
    assert len(_rows(out / "retention.csv")) == 4 * 2 * 2
    assert {r["method"] for r in _rows(out / "degradation.csv")} == {
        "spectral-moe", "single-lora", "spectral-moe-routed", "spectral-moe-routed-dense",
    }
    summary = json.loads((out / "summary.json").read_text())
    assert "dense_routing_degrades_more" in summary["results"]


def test_sweep_run_is_independent_of_jobs(tmp_path):
    config = _config(
        tmp_path, "sweep", seed=4,
        task={"m": 16, "n": 16, "band_width": 4, "eval_size": 64},
        train={"lr": 0.01, "steps": 10, "batch_size": 8},
        sweep={"n_experts_grid": [2, 4], "top_k_grid": [1, 4], "total_rank": 8},
    )
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    statuses = [r["status"] for r in _rows(tmp_path / "a" / "sweep.csv")]
    assert statuses == ["ok", "skipped", "ok", "ok"]
