import json
import subprocess
import sys

import pytest

from jointgrasp.cli import run_command
from jointgrasp.data import load_manifest
from jointgrasp.dualnet import load_checkpoint

TINY = {
    "l_o": 3,
    "l_g": 2,
    "objects_per_category": 4,
    "views_per_object": 4,
    "image_size": 6,
    "channels": 1,
    "category_extractor": "mlp",
    "category_fc": [8],
    "category_hidden": [6],
    "grasp_extractor": "mlp",
    "grasp_fc": [4],
    "grasp_hidden": [4],
    "max_outer": 2,
    "batch_size": 8,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def test_unknown_subcommand_exits_2(capsys):
    assert run_command(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 0.1}))
    assert run_command(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_bad_override_value_exits_1(tmp_path, capsys):
    assert run_command(["train", "beta1=2.0", "--out", str(tmp_path / "o")]) == 1
    assert "beta1" in capsys.readouterr().err


def test_train_writes_checkpoint_and_history(config, tmp_path):
    out = tmp_path / "run"
    assert run_command(["train", "--config", str(config), "--seed", "3", "--out", str(out), "--deterministic"]) == 0
    model = load_checkpoint(out / "checkpoint.json")
    assert model.arch.l_o == 3
    lines = (out / "history.jsonl").read_text().strip().split("\n")
    assert 1 <= len(lines) <= 2
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["variant"] == "v3" and metrics["test"]["grasp"]["task"] == "grasp"
    assert not (out / "run.json").exists()


def test_deterministic_outputs_are_byte_identical(config, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        argv = ["train", "--config", str(config), "--seed", "1", "--out", str(out), "--deterministic", "lr=0.01"]
        assert run_command(argv) == 0
        outs.append(out)
    for name in ("checkpoint.json", "history.jsonl", "metrics.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_gradcheck_passes(tmp_path, capsys):
    assert run_command(["gradcheck", "--seed", "7", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["ok"] and report["max_rel_error"] <= 1e-4
    assert (tmp_path / "run.json").exists()


def test_synth_split_stats_eval_pipeline(config, tmp_path):
    data = tmp_path / "data"
    assert run_command(["synth", "--config", str(config), "--out", str(data), "--deterministic"]) == 0
    manifest = data / "manifest.csv"
    assert len(load_manifest(manifest)) == 3 * 4 * 4

    sp = tmp_path / "split"
    argv = ["split", "--config", str(config), "--data", str(manifest), "--protocol", "wwc", "--mask-p", "0.5"]
    assert run_command(argv + ["--out", str(sp), "--deterministic"]) == 0
    summary = json.loads((sp / "summary.json").read_text())
    assert summary["protocol"] == "wwc"
    assert summary["train"]["samples"] + summary["validation"]["samples"] + summary["test"]["samples"] == 48
    assert summary["train"]["masked"] > 0

    st = tmp_path / "stats"
    assert run_command(["stats", "--config", str(config), "--data", str(manifest), "--out", str(st), "--deterministic"]) == 0
    rows = (st / "what.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 3

    tr = tmp_path / "train"
    assert run_command(["train", "--config", str(config), "--data", str(manifest), "--out", str(tr), "--deterministic"]) == 0
    ev = tmp_path / "eval"
    argv = ["eval", "--checkpoint", str(tr / "checkpoint.json"), "--data", str(sp / "test" / "test.csv")]
    assert run_command(argv + ["--out", str(ev), "--deterministic"]) == 0
    assert 0.0 <= json.loads((ev / "metrics.json").read_text())["grasp"]["GA"] <= 1.0


def test_eval_requires_inputs(tmp_path, capsys):
    assert run_command(["eval", "--out", str(tmp_path)]) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_ablate_runs_all_variants(config, tmp_path):
    assert run_command(["ablate", "--config", str(config), "max_outer=1", "--out", str(tmp_path), "--deterministic"]) == 0
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert sorted(report) == ["v1", "v2", "v3"]
    assert (tmp_path / "ablation.csv").read_text().startswith("variant,grasp_GA")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "jointgrasp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
