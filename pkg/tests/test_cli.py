import json

import pytest

from condo.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from condo.world import load_benchmark

CONFIG = {
    "benchmark": {"preset": "condition_shift", "seed": 1, "n_frames": 128, "n_train_scans": 2,
                  "inference_conditions": [0.5, 1.0], "max_step": 2.0},
    "train": {"b": 2.0, "batch_size": 16, "hidden_dims": [8], "feat_dim": 8},
    "strategies": [{"kind": "condo"}],
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_gen_writes_benchmark(tmp_path, config_file, capsys):
    assert main(["gen", "--config", str(config_file), "--out", str(tmp_path / "bm")]) == EXIT_OK
    bm = load_benchmark(tmp_path / "bm" / "benchmark.json")
    assert len(bm.events) == 2


def test_run_and_report(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config_file), "--out", str(out), "--seed", "3"]) == EXIT_OK
    assert (out / "train_only" / "summary.json").exists()
    assert len(list(out.glob("*/summary.json"))) == 2
    assert main(["report", "--run", str(out), "--format", "json"]) == EXIT_OK
    assert (out / "report.json").exists()
    assert main(["report", "--run", str(out)]) == EXIT_OK
    assert (out / "report_summary.csv").exists()


def test_sweep_buffer(tmp_path, config_file):
    out = tmp_path / "sweep"
    assert main(["sweep", "--axis", "buffer", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    assert len(list(out.glob("*/summary.json"))) == 5


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"benchmark": {"preset": "condition_shift", "colour": 1}}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text(json.dumps({"benchmark": {"n_frames": 64, "max_step": 0.01}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--axis", "colour", "--config", str(bad), "--out", "x"])
    assert exc.value.code == 2


def test_runtime_errors_exit_3(tmp_path):
    assert main(["report", "--run", str(tmp_path / "nothing")]) == EXIT_RUNTIME
