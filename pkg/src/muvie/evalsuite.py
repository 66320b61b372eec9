"""Metrics, the depth-reprojection baseline and report generation.

A *predictor* is any callable ``(sources: list[TaskBundle], target: CameraView)
-> dict[str, ndarray]`` returning (H, W, C) maps keyed by task, with ``sl`` as
integer class ids. Trained models are wrapped by :class:`muvie.model.ModelPredictor`;
:func:`heuristic_baseline` and :class:`OraclePredictor` satisfy it directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import TASKS
from .dataset import Scene, write_pfm
from .geometry import CameraView
from .model import nearest_views
from .toyscenes import TaskBundle

PSNR_CAP = 99.0
METRICS = {"rgb": "psnr", "sl": "miou", "sn": "l1", "sh": "l1", "ed": "l1", "kp": "l1"}
SPLITS = ("train_scenes", "test_scenes")

Predictor = Callable[[Sequence[TaskBundle], CameraView], Mapping[str, np.ndarray]]


class EvalError(ValueError):
    pass


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; zero error is capped at 99 dB."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise EvalError("psnr of an empty image")
    if pred.shape != gt.shape:
        raise EvalError(f"psnr shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if math.isnan(mse):
        return mse
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def miou(pred, gt, n_classes: int | None = None) -> float:
    """Mean IoU over the classes that occur in ``gt`` or ``pred``."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise EvalError(f"miou shape mismatch {pred.shape} vs {gt.shape}")
    classes = np.union1d(np.unique(pred), np.unique(gt))
    if n_classes is not None and classes.size and classes.max() >= n_classes:
        raise EvalError(f"class id {classes.max()} >= n_classes={n_classes}")
    if classes.size == 0:
        return 1.0
    ious = [np.sum((pred == c) & (gt == c)) / np.sum((pred == c) | (gt == c)) for c in classes]
    return float(np.mean(ious))


def l1_error(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvalError(f"l1 shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def task_metric(task: str, pred, gt, n_classes: int | None = None) -> float:
    m = METRICS[task]
    if m == "psnr":
        return psnr(pred, gt)
    if m == "miou":
        return miou(pred, gt, n_classes)
    return l1_error(pred, gt)


# ----------------------------------------------------------------------------
# heuristic baseline


def heuristic_baseline(sources: Sequence[TaskBundle], target: CameraView,
                       tasks: Sequence[str] = TASKS) -> dict[str, np.ndarray]:
    """Forward-warp the nearest source view into the target using its depth.

    Every source pixel with depth is unprojected and splatted to the nearest
    target pixel under a z-buffer. Background pixels are treated as points at
    infinity (rotation only) and lose against any surface. Target pixels that
    receive nothing are filled from the nearest filled pixel; they are flagged
    in the returned ``hole`` map (H, W, 1 bool).
    """
    if not sources:
        raise EvalError("heuristic baseline needs at least one source view")
    src = sources[nearest_views([b.view for b in sources], target, 1)[0]]
    si, ti = src.intrinsics, target.intrinsics
    hs, ws = src.rgb.shape[:2]
    v, u = np.mgrid[0:hs, 0:ws]
    depth = src.depth[..., 0].astype(np.float64)
    hit = depth > 0
    cam = np.stack([(u - si.cx) / si.fx, (v - si.cy) / si.fy, np.ones_like(depth, dtype=np.float64)], -1)
    r_s, c_s = src.pose.rotation, src.pose.center
    r_t, c_t = target.pose.rotation, target.pose.center
    # surface points go through the full rigid transform, background only through rotation
    world_dir = cam @ r_s.T
    tgt = np.where(hit[..., None], (world_dir * depth[..., None] + c_s - c_t) @ r_t, world_dir @ r_t)
    z = tgt[..., 2]
    ok = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        tu = np.round(ti.fx * tgt[..., 0] / z + ti.cx)
        tv = np.round(ti.fy * tgt[..., 1] / z + ti.cy)
    ok &= (tu >= 0) & (tu < ti.width) & (tv >= 0) & (tv < ti.height)
    # splat far-to-near so the nearest surface wins; background (infinite depth) goes first
    priority = np.where(hit, z, np.inf)[ok]
    order = np.argsort(-priority, kind="stable")
    sel_src = np.flatnonzero(ok.ravel())[order]
    dest = (tv.ravel()[sel_src] * ti.width + tu.ravel()[sel_src]).astype(np.int64)
    filled = np.zeros(ti.height * ti.width, dtype=bool)
    filled[dest] = True
    index = np.zeros(ti.height * ti.width, dtype=np.int64)
    index[dest] = sel_src                  # later writes (nearer points) win
    holes = ~filled.reshape(ti.height, ti.width)
    if holes.all():
        raise EvalError("no source pixel projects into the target view")
    if holes.any():
        _, (iy, ix) = ndimage.distance_transform_edt(holes, return_indices=True)
        index = index.reshape(ti.height, ti.width)[iy, ix].ravel()
    out = {}
    for t in tasks:
        m = src.task_map(t)
        out[t] = m.reshape(hs * ws, -1)[index].reshape(ti.height, ti.width, -1)
    depth_t = np.where(hit.ravel(), z.ravel(), 0.0)[index]
    out["depth"] = depth_t.reshape(ti.height, ti.width, 1).astype(np.float32)
    out["hole"] = holes[..., None]
    return out


class OraclePredictor:
    """Returns the ground truth of the requested view; looks frames up by pose."""

    def __init__(self, scenes: Sequence[Scene]):
        self._gt = {}
        for sc in scenes:
            for b in sc.bundles:
                self._gt[self._key(b.view)] = b

    @staticmethod
    def _key(view: CameraView):
        return np.round(view.pose.camera_to_world, 9).tobytes()

    def __call__(self, sources, target: CameraView):
        b = self._gt[self._key(target)]
        return {t: b.task_map(t).copy() for t in TASKS}


# ----------------------------------------------------------------------------
# evaluation


def orbit_gap_deg(target: TaskBundle, sources: Sequence[TaskBundle]) -> float | None:
    """Smallest orbit-angle difference between the target and any source frame."""
    a = target.meta.get("orbit_angle_deg")
    if a is None or any("orbit_angle_deg" not in s.meta for s in sources):
        return None
    return float(min(abs((s.meta["orbit_angle_deg"] - a + 180.0) % 360.0 - 180.0) for s in sources))


@dataclass
class ViewRecord:
    method: str
    split: str
    scene: str
    frame: int
    orbit_gap_deg: float | None
    metrics: dict

    def to_dict(self):
        return {"method": self.method, "split": self.split, "scene": self.scene, "frame": self.frame,
                "orbit_gap_deg": self.orbit_gap_deg, "metrics": self.metrics}


def _write_images(root: Path, frame: int, maps: Mapping[str, np.ndarray], tasks) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for t in tasks:
        m = np.asarray(maps[t])
        if t == "rgb":
            Image.fromarray(np.round(np.clip(np.nan_to_num(m), 0, 1) * 255).astype(np.uint8), "RGB").save(
                root / f"rgb_{frame:04d}.png")
        elif t == "sl":
            Image.fromarray(m[..., 0].astype(np.uint8), "L").save(root / f"sl_{frame:04d}.png")
        else:
            write_pfm(root / f"{t}_{frame:04d}.pfm", m.astype(np.float32))


def _mean_metrics(records: Sequence[ViewRecord], tasks) -> dict:
    return {t: {METRICS[t]: float(np.mean([r.metrics[t] for r in records]))} for t in tasks}


def evaluate_model(predictor: Predictor, splits: Mapping[str, Sequence[Scene]], n_views: int = 5,
                   tasks: Sequence[str] = TASKS, method: str = "model", n_classes: int | None = None,
                   image_dir=None) -> tuple[dict, list[ViewRecord]]:
    """Score a predictor on the held-out frames of every scene in every split.

    Predictors exposing ``for_scene(scene)`` are rebound per scene (depth bounds).
    Sources for a held-out frame are the ``n_views`` nearest non-held-out frames
    of the same scene. Returns ``(table, records)`` where ``table`` is nested
    split -> scene -> task -> metric, with an ``all`` entry pooling every view
    of the split.
    """
    table: dict = {}
    records: list[ViewRecord] = []
    for split, scenes in splits.items():
        if split not in SPLITS:
            raise EvalError(f"unknown split {split!r}; expected one of {SPLITS}")
        if not scenes:
            raise EvalError(f"split {split!r} has no scenes")
        table[split] = {}
        split_records = []
        for sc in scenes:
            if not sc.held_out:
                raise EvalError(f"scene {sc.name!r} has no held-out frames")
            if not sc.train:
                raise EvalError(f"scene {sc.name!r} has no source frames")
            scene_records = []
            bound = predictor.for_scene(sc) if hasattr(predictor, "for_scene") else predictor
            for f in sc.held_out:
                if not 0 <= f < len(sc):
                    raise EvalError(f"held-out frame {f} outside scene {sc.name!r} ({len(sc)} frames)")
                target = sc.bundles[f]
                cands = [sc.bundles[i] for i in sc.train]
                sources = [cands[i] for i in nearest_views([b.view for b in cands], target.view, n_views)]
                pred = bound(sources, target.view)
                missing = [t for t in tasks if t not in pred]
                if missing:
                    raise EvalError(f"predictor output lacks tasks {missing}")
                metrics = {t: task_metric(t, pred[t], target.task_map(t), n_classes) for t in tasks}
                rec = ViewRecord(method, split, sc.name, f, orbit_gap_deg(target, sources), metrics)
                scene_records.append(rec)
                if image_dir is not None:
                    _write_images(Path(image_dir) / method / split / sc.name, f, pred, tasks)
            table[split][sc.name] = _mean_metrics(scene_records, tasks)
            split_records += scene_records
        table[split]["all"] = _mean_metrics(split_records, tasks)
        records += split_records
    return table, records


def has_nan(report: Mapping) -> bool:
    if isinstance(report, Mapping):
        return any(has_nan(v) for v in report.values())
    if isinstance(report, (list, tuple)):
        return any(has_nan(v) for v in report)
    return isinstance(report, float) and math.isnan(report)


def format_markdown(methods: Mapping[str, dict], tasks: Sequence[str] = TASKS) -> str:
    """One table per split: a row per method, a column per task metric (pooled views)."""
    lines = []
    splits = []
    for table in methods.values():
        splits += [s for s in table if s not in splits]
    head = "| method | " + " | ".join(f"{t.upper()} {METRICS[t]}" for t in tasks) + " |"
    rule = "|---|" + "---|" * len(tasks)
    for split in splits:
        lines += [f"## {split}", "", head, rule]
        for name, table in methods.items():
            if split not in table:
                continue
            row = table[split]["all"]
            lines.append(f"| {name} | " + " | ".join(f"{row[t][METRICS[t]]:.4f}" for t in tasks) + " |")
        lines.append("")
    return "\n".join(lines)


def write_report(out_dir, methods: Mapping[str, dict], records: Sequence[ViewRecord] = (),
                 tasks: Sequence[str] = TASKS, extra: dict | None = None) -> Path:
    """Write ``report.json`` (method -> split -> scene -> task -> metric, plus per-view
    records) and ``report.md``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"methods": dict(methods), "views": [r.to_dict() for r in records], **(extra or {})}
    (out / "report.json").write_text(json.dumps(payload, indent=1))
    (out / "report.md").write_text(format_markdown(methods, tasks))
    return out / "report.json"
