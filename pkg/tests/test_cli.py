"""End-to-end CLI runs on a miniature configuration."""

import json

import numpy as np
import pytest

from storm_rme.cli import main

SMALL = [
    "--set", "map.train_sets=3", "--set", "map.test_sets=2",
    "--set", "map.extent_x=200", "--set", "map.extent_y=200",
]
SMALL_MODEL = [
    "--set", "model.dim=16", "--set", "model.blocks=2",
    "--set", "train.steps=20", "--set", "train.batch_size=4",
    "--set", "train.n_min=8", "--set", "train.n_max=20",
]


def run(out, command, *extra):
    return main([command, "--out", str(out), *SMALL, *SMALL_MODEL,
                 *map(str, extra)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("cliws")
    assert run(out, "generate") == 0
    assert run(out, "train") == 0
    return out


def test_generate_outputs(workspace):
    files = sorted(p.name for p in (workspace / "data").glob("*.csv"))
    assert files == ["test_000.csv", "test_001.csv",
                     "train_000.csv", "train_001.csv", "train_002.csv"]
    meta = json.loads((workspace / "data" / "generation.meta.json").read_text())
    assert meta["seed"] == 0
    assert len(meta["files"]) == 5


def test_train_outputs(workspace):
    assert (workspace / "storm.ckpt").exists()
    trace = (workspace / "reports" / "loss_trace.csv").read_text().splitlines()
    assert trace[0].startswith("# config_hash")
    assert trace[2] == "step,loss"
    assert len(trace) == 3 + 20


def test_eval_and_reports(workspace):
    assert run(out := workspace, "eval",
               "--set", "eval.iterations=3",
               "--set", "eval.n_values=8,12",
               "--set", "eval.tuning_scenes=4") == 0
    csv = (out / "reports" / "rmse_sweep.csv").read_text()
    for name in ("storm", "knn", "krr", "kriging"):
        assert name in csv
    assert (out / "reports" / "rmse_sweep.png").exists()
    meta = json.loads((out / "reports" / "rmse_sweep.meta.json").read_text())
    assert "split_hash" in meta
    assert "tuned" in meta


def test_eval_byte_identical_rerun(workspace):
    args = ["--set", "eval.iterations=3", "--set", "eval.n_values=8,12",
            "--set", "eval.tuning_scenes=4"]
    assert run(workspace, "eval", *args) == 0
    blobs = {}
    for name in ("rmse_sweep.csv", "rmse_sweep.meta.json", "rmse_sweep.png"):
        blobs[name] = (workspace / "reports" / name).read_bytes()
    assert run(workspace, "eval", *args) == 0
    for name, blob in blobs.items():
        assert (workspace / "reports" / name).read_bytes() == blob


def test_eval_workers_flag_identical(workspace):
    args = ["--set", "eval.iterations=3", "--set", "eval.n_values=8",
            "--set", "eval.tuning_scenes=4"]
    assert run(workspace, "eval", *args) == 0
    blob = (workspace / "reports" / "rmse_sweep.csv").read_bytes()
    assert run(workspace, "eval", "--workers", "2", *args) == 0
    assert (workspace / "reports" / "rmse_sweep.csv").read_bytes() == blob


def test_active_command(workspace):
    assert run(workspace, "active",
               "--set", "active.n_values=8",
               "--set", "active.scenes=3",
               "--set", "active.max_candidates=10") == 0
    csv = (workspace / "reports" / "active_comparison.csv").read_text()
    assert "selected" in csv and "random" in csv


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_unknown_estimator_is_config_error(tmp_path, capsys):
    code = main(["eval", "--out", str(tmp_path),
                 "--set", "eval.estimators=storm,splines"])
    assert code == 1
    assert "splines" in capsys.readouterr().err


def test_missing_data_reports_error(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_seed_changes_outputs(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out, seed in ((out1, "0"), (out2, "1")):
        assert main(["generate", "--out", str(out), "--seed", seed,
                     *SMALL]) == 0
    a = (out1 / "data" / "train_000.csv").read_bytes()
    b = (out2 / "data" / "train_000.csv").read_bytes()
    assert a != b


def test_generate_byte_identical_rerun(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert main(["generate", "--out", str(out), *SMALL]) == 0
    for name in ("train_000.csv", "test_001.csv", "generation.meta.json"):
        assert (out1 / "data" / name).read_bytes() == \
            (out2 / "data" / name).read_bytes()
