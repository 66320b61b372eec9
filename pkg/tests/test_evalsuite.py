import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from muvie.config import TASKS
from muvie.evalsuite import (METRICS, EvalError, OraclePredictor, evaluate_model, format_markdown, has_nan,
                             heuristic_baseline, l1_error, miou, psnr, write_report)
from muvie.geometry import CameraIntrinsics, CameraPose
from muvie.toyscenes import TaskBundle


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(a, a) == 99.0
    assert math.isnan(psnr(a + np.nan, a))
    with pytest.raises(EvalError):
        psnr(np.zeros(0), np.zeros(0))
    with pytest.raises(EvalError):
        psnr(a, np.zeros((4, 4, 1)))


@given(st.floats(1e-6, 0.5), st.floats(1e-6, 0.5))
def test_psnr_decreases_with_error(e1, e2):
    a = np.zeros(10)
    lo, hi = sorted((e1, e2))
    assert psnr(a + lo, a) >= psnr(a + hi, a)


def test_miou_examples():
    gt = np.array([0, 0, 1, 1])
    assert miou(gt, gt) == 1.0
    # gt (A, A, B, B) vs pred all A: IoU_A = 2/4, IoU_B = 0
    assert miou(np.array([0, 0, 0, 0]), np.array([0, 0, 1, 1])) == 0.25
    assert miou(np.array([1, 0]), np.array([0, 1])) == 0.0
    assert miou(np.array([0, 1, 2, 3]), np.array([0, 2, 1, 3])) == pytest.approx(0.5)
    with pytest.raises(EvalError, match="n_classes"):
        miou(np.array([7]), np.array([0]), n_classes=5)


def test_l1():
    assert l1_error(np.ones(3), np.zeros(3)) == 1.0
    with pytest.raises(EvalError):
        l1_error(np.ones(3), np.ones(4))


def test_oracle_scores_perfectly(scene):
    table, records = evaluate_model(OraclePredictor([scene]), {"train_scenes": [scene]}, n_views=3)
    row = table["train_scenes"]["all"]
    assert row["rgb"]["psnr"] == 99.0 and row["sl"]["miou"] == 1.0
    assert all(row[t]["l1"] == 0 for t in ("sn", "sh", "ed", "kp"))
    assert len(records) == len(scene.held_out)
    assert all(r.orbit_gap_deg == pytest.approx(22.5) for r in records)


def test_table_schema_and_determinism(scene):
    a, _ = evaluate_model(heuristic_baseline, {"test_scenes": [scene]}, n_views=3)
    b, _ = evaluate_model(heuristic_baseline, {"test_scenes": [scene]}, n_views=3)
    assert a == b
    row = a["test_scenes"][scene.name]
    assert set(row) == set(TASKS)
    for t in TASKS:
        assert list(row[t]) == [METRICS[t]] and math.isfinite(row[t][METRICS[t]])


def test_split_errors(scene):
    with pytest.raises(EvalError, match="unknown split"):
        evaluate_model(heuristic_baseline, {"val": [scene]})
    with pytest.raises(EvalError, match="no scenes"):
        evaluate_model(heuristic_baseline, {"train_scenes": []})
    with pytest.raises(EvalError, match="lacks"):
        evaluate_model(lambda s, t: {"rgb": s[0].rgb}, {"train_scenes": [scene]})


def test_heuristic_identity_pose(scene):
    b = scene.bundles[0]
    out = heuristic_baseline([b], b.view)
    for t in TASKS:
        assert np.array_equal(out[t], b.task_map(t)), t
    assert not out["hole"].any()


def _plane_bundle(pose, w=48, h=32, depth=2.0):
    intr = CameraIntrinsics(fx=40.0, fy=40.0, cx=(w - 1) / 2, cy=(h - 1) / 2, width=w, height=h)
    v, u = np.mgrid[0:h, 0:w]
    rgb = np.stack([u / w, v / h, 0.5 + 0 * u], -1).astype(np.float32)
    one = np.ones((h, w, 1), np.float32)
    return TaskBundle(rgb, np.zeros((h, w, 3), np.float32) + [0, 0, -1], 0.5 * one, 0 * one, 0 * one,
                      np.ones((h, w, 1), np.int64), depth * one, pose, intr)


def test_heuristic_plane_translation():
    shift = 4                                  # pixels
    src = _plane_bundle(CameraPose.identity())
    tx = shift * 2.0 / 40.0
    tgt = _plane_bundle(CameraPose.from_translation((tx, 0, 0)))
    out = heuristic_baseline([src], tgt.view)
    w = src.rgb.shape[1]
    np.testing.assert_allclose(out["rgb"][:, : w - shift], src.rgb[:, shift:], atol=1 / 255)
    assert out["hole"][:, w - shift:].all() and not out["hole"][:, : w - shift].any()
    np.testing.assert_allclose(out["depth"][..., 0], 2.0, atol=1e-6)


def test_heuristic_fills_holes(scene):
    out = heuristic_baseline(scene.bundles[1:2], scene.bundles[0].view)
    assert out["hole"].dtype == bool and out["hole"].shape[:2] == scene.bundles[0].rgb.shape[:2]
    for t in TASKS:
        assert np.isfinite(out[t]).all()


def test_heuristic_errors(scene):
    with pytest.raises(EvalError):
        heuristic_baseline([], scene.bundles[0].view)


def test_report_files(tmp_path, scene):
    table, records = evaluate_model(heuristic_baseline, {"test_scenes": [scene]}, n_views=3,
                                    image_dir=tmp_path / "img", method="heuristic")
    write_report(tmp_path, {"heuristic": table}, records, extra={"n_views": 3})
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["methods"]["heuristic"]["test_scenes"]["all"]["rgb"]["psnr"] > 0
    assert len(payload["views"]) == len(scene.held_out) and payload["n_views"] == 3
    md = (tmp_path / "report.md").read_text()
    assert "| heuristic |" in md and "RGB psnr" in md
    frame = scene.held_out[0]
    d = tmp_path / "img" / "heuristic" / "test_scenes" / scene.name
    for t in TASKS:
        ext = "png" if t in ("rgb", "sl") else "pfm"
        assert (d / f"{t}_{frame:04d}.{ext}").exists()


def test_has_nan():
    assert has_nan({"a": {"b": [1.0, float("nan")]}})
    assert not has_nan({"a": {"b": 1.0}})
    assert "nan" in format_markdown({"m": {"s": {"all": {t: {METRICS[t]: float("nan")} for t in TASKS}}}})
