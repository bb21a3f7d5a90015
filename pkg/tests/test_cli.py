import json

import numpy as np
import pytest

from sveavatar import io as sio
from sveavatar.cli import cli_main

from conftest import tiny_train_config


def _tiny_cfg_file(path):
    d = tiny_train_config().to_dict()
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli_main(["synth-data", "--seed", "0", "--frames", "6", "--width", "12", "--height", "12",
                     "--out", str(root / "d")]) == 0
    cfg = _tiny_cfg_file(root / "c.json")
    assert cli_main(["train", "--config", str(cfg), "--data", str(root / "d"), "--out", str(root / "run")]) == 0
    return root


def test_pipeline_checkpoint_exists(pipeline):
    assert (pipeline / "run" / "checkpoint.json").exists()
    assert (pipeline / "run" / "checkpoint.bin").exists()
    assert (pipeline / "run" / "train_log.csv").read_text().startswith(
        "step,stage,total,rgb,mask_bce,eikonal,depth,surface_sdf")


def test_evaluate_render_reenact_mesh(pipeline, capsys):
    ck, d = str(pipeline / "run"), str(pipeline / "d")
    assert cli_main(["evaluate", "--checkpoint", ck, "--data", d, "--out", str(pipeline / "rep.json")]) == 0
    rep = json.loads((pipeline / "rep.json").read_text())
    assert rep["n_frames"] == 1 and rep["lpips"] is None
    assert cli_main(["render", "--checkpoint", ck, "--data", d, "--out", str(pipeline / "r"),
                     "--frames", "0"]) == 0
    assert sio.read_png(pipeline / "r" / "0.png").shape == (12, 12, 3)
    assert (pipeline / "r" / "0.depth.f32").stat().st_size == 4 * 144
    assert cli_main(["reenact", "--checkpoint", ck, "--data", d, "--out", str(pipeline / "re")]) == 0
    assert (pipeline / "re" / "0000.png").exists()
    assert cli_main(["extract-mesh", "--checkpoint", ck, "--data", d, "--resolution", "16",
                     "--out", str(pipeline / "m.obj")]) == 0


def test_dump_config(capsys):
    assert cli_main(["train", "--dump-config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["lambda1"] == 1.0 and d["depth_supervision"] == "init_only"


def test_usage_errors():
    assert cli_main(["train", "--bogus"]) == 1
    assert cli_main(["frobnicate"]) == 1
    assert cli_main([]) == 1


def test_mismatched_k_exit_2(pipeline, tmp_path, capsys):
    assert cli_main(["synth-data", "--frames", "2", "--width", "12", "--height", "12", "--expr-dim", "3",
                     "--out", str(tmp_path / "d3")]) == 0
    code = cli_main(["evaluate", "--checkpoint", str(pipeline / "run"), "--data", str(tmp_path / "d3")])
    assert code == 2
    assert "config hash mismatch" in capsys.readouterr().err


def test_cli_deterministic(tmp_path):
    args = ["--frames", "3", "--width", "12", "--height", "12", "--seed", "4"]
    for name in ("a", "b"):
        assert cli_main(["synth-data", *args, "--out", str(tmp_path / name)]) == 0
    cfg = _tiny_cfg_file(tmp_path / "c.json")
    for name in ("a", "b"):
        assert cli_main(["train", "--config", str(cfg), "--data", str(tmp_path / name),
                         "--out", str(tmp_path / f"run_{name}")]) == 0
    for rel in ("a/manifest.json", "a/frames/1.png"):
        assert (tmp_path / rel).read_bytes() == (tmp_path / rel.replace("a/", "b/")).read_bytes()
    assert (tmp_path / "run_a/checkpoint.bin").read_bytes() == (tmp_path / "run_b/checkpoint.bin").read_bytes()
    assert (tmp_path / "run_a/train_log.csv").read_bytes() == (tmp_path / "run_b/train_log.csv").read_bytes()
