import json

import numpy as np
import pytest

from uniformer import tensorfile
from uniformer.cli import main
from uniformer.model import ModelConfig, save_config
from uniformer.pipeline import TrainConfig, save_train_config


@pytest.fixture()
def tiny_config_path(tmp_path):
    cfg = ModelConfig(
        stage_channels=(8, 16, 32, 64),
        stage_depths=(1, 1, 1, 1),
        stage_types="LLGG",
        tube=(3, 3, 3),
        head_dim=16,
        num_classes=4,
    )
    path = tmp_path / "tiny.json"
    save_config(cfg, path)
    return path


def test_params_preset(capsys):
    assert main(["params", "--config", "S@400"]) == 0
    out = capsys.readouterr().out.strip()
    assert abs(int(out) - 21.4e6) / 21.4e6 < 0.01


def test_describe_with_trace(tiny_config_path, capsys):
    rc = main(["describe", "--config", str(tiny_config_path), "--input", "3x2x32x32"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "stage types:    LLGG" in out
    assert "stem" in out and "64x1x1x1" in out


def test_flops_csv(tiny_config_path, tmp_path, capsys):
    csv = tmp_path / "report.csv"
    rc = main(
        [
            "flops",
            "--config",
            str(tiny_config_path),
            "--input",
            "3x2x32x32",
            "--views",
            "4",
            "--csv",
            str(csv),
        ]
    )
    assert rc == 0
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "name,out_shape,params,flops"
    assert lines[-1].startswith("TOTAL_4_VIEWS")
    assert "flops (4 views)" in capsys.readouterr().out


def test_sample_indices_dense(capsys):
    rc = main(
        [
            "sample-indices",
            "--protocol",
            "dense",
            "--video-len",
            "64",
            "--frames",
            "16",
            "--stride",
            "4",
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out.strip()
    assert out == "clip=0 crop=0 " + ",".join(str(1 + 4 * j) for j in range(16))


def test_sample_indices_uniform(capsys):
    rc = main(
        ["sample-indices", "--protocol", "uniform", "--video-len", "32", "--segments", "16"]
    )
    assert rc == 0
    assert capsys.readouterr().out.strip().endswith(",".join(str(2 * i + 1) for i in range(16)))


def test_gradcheck_command(tiny_config_path, capsys):
    rc = main(
        ["gradcheck", "--config", str(tiny_config_path), "--seed", "1", "--max-checks", "2"]
    )
    out = capsys.readouterr().out
    assert rc == 0 and "PASS" in out


def test_train_and_eval_round_trip(tiny_config_path, tmp_path, capsys):
    train_cfg = tmp_path / "train.json"
    save_train_config(
        TrainConfig(base_lr=4e-3, batch_size=8, warmup_epochs=2, total_epochs=10, seed=0),
        train_cfg,
    )
    log = tmp_path / "log.csv"
    params = tmp_path / "weights.ufp"
    rc = main(
        [
            "train-toy",
            "--config",
            str(tiny_config_path),
            "--train-config",
            str(train_cfg),
            "--log",
            str(log),
            "--params",
            str(params),
        ]
    )
    assert rc == 0
    assert "final train accuracy" in capsys.readouterr().out
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 10 and lines[0].startswith("0,")
    assert params.exists()

    videos = tmp_path / "videos"
    videos.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        tensorfile.write_tensor(videos / f"v{i}.uft", rng.standard_normal((3, 12, 32, 32)))
    rc = main(
        [
            "eval",
            "--config",
            str(tiny_config_path),
            "--params",
            str(params),
            "--input-dir",
            str(videos),
            "--clips",
            "2",
            "--crops",
            "1",
            "--frames",
            "4",
            "--stride",
            "2",
        ]
    )
    assert rc == 0
    out_lines = capsys.readouterr().out.strip().splitlines()
    assert len(out_lines) == 2
    name, pred, score = out_lines[0].split(",")
    assert name == "v0.uft" and 0 <= int(pred) < 4 and 0 < float(score) <= 1


def test_error_is_single_line(tmp_path, capsys):
    rc = main(["params", "--config", str(tmp_path / "missing.json")])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_invalid_config_content(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage_types": "LLXG"}))
    rc = main(["params", "--config", str(bad)])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: ")
