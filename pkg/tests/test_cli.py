import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from muvie.checkpoint import save_checkpoint
from muvie.cli import load_model, main

SMALL = {
    "scenes": {"n_train": 2, "n_test": 1, "n_frames": 16, "width": 32, "height": 32},
    "model": {"d_scene": 8, "d_task": 8, "d_prompt": 4, "d_hidden": 16, "n_heads": 2, "n_samples": 8,
              "cva_depth": 2, "cta_depth": 1, "unet_widths": [4, 8, 8]},
    "train": {"rays_per_batch": 32, "n_views": 3, "stage1_iters": 1, "stage2_iters": 1, "log_every": 1},
    "eval": {"chunk": 512},
}


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.yaml").write_text(yaml.safe_dump(SMALL))
    assert main(["--workdir", str(root), "gen-data", "--config", "small.yaml"]) == 0
    assert main(["--workdir", str(root), "train", "--config", "small.yaml"]) == 0
    return root


def test_gen_data_default_makes_nine_scenes(tmp_path):
    assert main(["--workdir", str(tmp_path), "gen-data"]) == 0
    scenes = sorted(p.name for p in (tmp_path / "data").glob("*/scene_*"))
    assert len(scenes) == 9
    assert len(list((tmp_path / "data" / "test").iterdir())) == 1


def test_gen_data_is_byte_identical(work, tmp_path):
    (tmp_path / "small.yaml").write_text(yaml.safe_dump(SMALL))
    main(["--workdir", str(tmp_path), "gen-data", "--config", "small.yaml"])
    assert _digest(tmp_path / "data") == _digest(work / "data")


def test_gen_data_requires_scenes_section(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"model": {}}))
    assert main(["--workdir", str(tmp_path), "gen-data", "--config", "c.yaml"]) == 2
    assert "scenes" in capsys.readouterr().err


def test_train_outputs(work):
    run = work / "run"
    assert (run / "checkpoint.bin").exists() and (run / "config.yaml").exists()
    rows = (run / "losses.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,stage,total") and len(rows) == 3
    model, cfg, header = load_model(run / "checkpoint.bin")
    assert header["iteration"] == 2 and cfg.model.d_scene == 8


def test_train_flags(work, tmp_path):
    args = ["--workdir", str(work), "train", "--config", "small.yaml", "--out", str(tmp_path / "r"),
            "--ablate", "no-cta", "--iters", "1,0", "--views", "2", "--setting2"]
    assert main(args) == 0
    _, cfg, header = load_model(tmp_path / "r" / "checkpoint.bin")
    assert cfg.model.ablate == "no-cta" and cfg.model.setting2 and cfg.train.n_views == 2
    assert header["iteration"] == 1
    assert "unet_sn" in (tmp_path / "r" / "losses.csv").read_text().splitlines()[0]


def test_bad_iters_flag(work):
    with pytest.raises(SystemExit):
        main(["--workdir", str(work), "train", "--iters", "5"])


def test_render_outputs_and_warning(work):
    scene = "data/test/scene_002"
    assert main(["--workdir", str(work), "render", "--scene", scene, "--frame", "0"]) == 0
    for t in ("rgb", "sl"):
        assert (work / "render" / f"{t}_0000.png").exists()
    for t in ("sn", "sh", "ed", "kp"):
        assert (work / "render" / f"{t}_0000.pfm").exists()
    with pytest.warns(UserWarning, match="not a held-out"):
        main(["--workdir", str(work), "render", "--scene", scene, "--frame", "3", "--out", "r3"])
    assert main(["--workdir", str(work), "render", "--scene", scene, "--frame", "99"]) == 2


def test_eval_report(work):
    assert main(["--workdir", str(work), "eval"]) == 0
    report = json.loads((work / "eval" / "report.json").read_text())
    assert set(report["methods"]) == {"model", "heuristic"}
    assert set(report["methods"]["model"]) == {"train_scenes", "test_scenes"}
    for row in report["methods"]["model"]["test_scenes"]["all"].values():
        assert all(math.isfinite(v) for v in row.values())
    md = (work / "eval" / "report.md").read_text()
    assert "| model |" in md and "| heuristic |" in md


def test_eval_baseline_only(work, tmp_path):
    assert main(["--workdir", str(work), "eval", "--baseline-only", "--out", str(tmp_path)]) == 0
    assert set(json.loads((tmp_path / "report.json").read_text())["methods"]) == {"heuristic"}


def test_eval_nan_metric_exits_nonzero(work, tmp_path):
    model, cfg, _ = load_model(work / "run" / "checkpoint.bin")
    with torch.no_grad():
        for p in model.decoder.density.parameters():
            p.fill_(float("nan"))
    save_checkpoint(tmp_path / "nan.bin", model, config=cfg.to_dict())
    code = main(["--workdir", str(work), "eval", "--checkpoint", str(tmp_path / "nan.bin"),
                 "--out", str(tmp_path / "e")])
    assert code == 1


def test_eval_missing_data(tmp_path):
    assert main(["--workdir", str(tmp_path), "eval", "--baseline-only"]) == 2
