"""The full synthesis model: encoder + attention decoder + volume rendering.

Rendering a target ray:

1. stratified samples ``q_m`` along the ray between the scene bounds;
2. each ``q_m`` is projected into the V source views to gather encoder
   features and the source annotations (invalid views are masked);
3. the decoder turns features and view angles into a density and per-task
   convex weights over views; each task's point value is the weighted sum of
   the gathered source annotations;
4. the point values are volume-rendered along the ray, the leftover
   transmittance going to the background value of each task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import geometry
from .attention import MultiTaskDecoder, compose_prediction
from .config import ModelConfig
from .encoder import build_encoder, gather
from .geometry import CameraView
from .renderer import RaySampleBatch, composite, sample_gaps, stratified_sample
from .toyscenes import BACKGROUND_CLASS, TaskBundle


@dataclass
class SourceSet:
    """Source views prepared for rendering: images, value maps per task and cameras."""

    images: torch.Tensor             # (V, H, W, 3)
    values: dict[str, torch.Tensor]  # task -> (V, C, H, W)
    k: torch.Tensor
    w2c: torch.Tensor
    centers: torch.Tensor

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[1]


def one_hot_maps(sl: np.ndarray, n_classes: int) -> np.ndarray:
    """(..., H, W, 1) integer labels -> (..., H, W, C) float one-hot."""
    return np.eye(n_classes, dtype=np.float32)[sl[..., 0].astype(np.int64)]


def task_source_map(bundle: TaskBundle, task: str, n_classes: int) -> np.ndarray:
    if task == "sl":
        return one_hot_maps(bundle.sl, n_classes)
    return bundle.task_map(task)


def make_source_set(bundles: Sequence[TaskBundle], tasks: Sequence[str], n_classes: int,
                    overrides: dict[str, torch.Tensor] | None = None,
                    dtype=torch.float32) -> SourceSet:
    """Stack source bundles. ``overrides`` replaces a task's (V, H, W, C) source maps,
    which is how predicted annotations enter at inference time."""
    overrides = overrides or {}
    images = torch.as_tensor(np.stack([b.rgb for b in bundles]), dtype=dtype)
    values = {}
    for t in tasks:
        if t in overrides:
            m = torch.as_tensor(overrides[t], dtype=dtype)
        elif t == "rgb":
            m = images
        else:
            m = torch.as_tensor(np.stack([task_source_map(b, t, n_classes) for b in bundles]), dtype=dtype)
        values[t] = m.permute(0, 3, 1, 2)
    k, w2c, centers = geometry.view_tensors([b.view for b in bundles], dtype=dtype)
    return SourceSet(images, values, k, w2c, centers)


def nearest_views(candidates: Sequence[CameraView], target: CameraView, n: int,
                  exclude: Sequence[int] = ()) -> list[int]:
    """Indices of the ``n`` candidates whose camera centres are closest to the target's."""
    c = target.pose.center
    order = sorted((float(np.linalg.norm(v.pose.center - c)), i) for i, v in enumerate(candidates)
                   if i not in set(exclude))
    return [i for _, i in order[:n]]


class MTVSModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tasks = tuple(cfg.tasks)
        self.encoder = build_encoder(cfg.encoder, cfg.d_scene)
        self.decoder = MultiTaskDecoder(
            len(self.tasks), cfg.d_scene, cfg.d_task, cfg.d_prompt, cfg.n_heads, cfg.d_hidden,
            cfg.cva_depth, cfg.cta_depth, cfg.pe_freqs, cfg.ablate)
        self.unet = None
        if cfg.setting2:
            from .setting2 import UNet
            self.unet = UNet(cfg.setting2_tasks, cfg.n_classes, cfg.unet_widths)

    def channels(self, task: str) -> int:
        return self.cfg.channels(task)

    def background(self, task: str, dtype=torch.float32) -> torch.Tensor:
        bg = torch.zeros(self.channels(task), dtype=dtype)
        if task == "sl":
            bg[BACKGROUND_CLASS] = 1.0
        return bg

    def decoder_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def encode(self, src: SourceSet) -> torch.Tensor:
        return self.encoder.extract_features(src.images)

    def render_rays(self, src: SourceSet, volumes: torch.Tensor, origins: torch.Tensor,
                    dirs: torch.Tensor, near: float, far: float, jitter: bool = False,
                    generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
        """Render (R, 3) rays; returns task -> (R, C) plus ``opacity`` (R,)."""
        dtype = volumes.dtype
        r = origins.shape[0]
        m = self.cfg.n_samples
        t = stratified_sample(near, far, m, jitter=jitter, batch_shape=(r,), generator=generator,
                              dtype=dtype)
        delta = sample_gaps(t, far)
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]          # (R, M, 3)
        flat = pts.reshape(-1, 3)
        w, h = src.size
        uv, _, valid = geometry.project_points(flat, src.k, src.w2c, w, h)  # (V, P, 2), (V, P)
        feats = gather(volumes, uv, valid)                                  # (P, V, d)
        ray_dirs = dirs[:, None, :].expand(r, m, 3).reshape(-1, 3)
        angles = geometry.view_angles(ray_dirs, flat, src.centers).T        # (P, V)
        mask = valid.T
        seen = mask.any(-1)
        # points no source view sees get zero density; unmask them so attention stays defined
        safe_mask = mask | ~seen[:, None]
        out = self.decoder(feats, angles, safe_mask)
        sigma = (out.sigma * seen.to(dtype)).reshape(r, m)

        value_maps = torch.cat([src.values[t_] for t_ in self.tasks], dim=1)
        sampled = gather(value_maps, uv, valid)                             # (P, V, sum C)
        split = torch.split(sampled, [self.channels(t_) for t_ in self.tasks], dim=-1)
        point_values = compose_prediction(out.weights, list(split))
        values = {t_: y.reshape(r, m, -1) for t_, y in zip(self.tasks, point_values)}
        comp = composite(RaySampleBatch(t, delta, sigma, values),
                         {t_: self.background(t_, dtype) for t_ in self.tasks})
        result = dict(comp.rendered)
        result["opacity"] = comp.opacity
        return result

    @torch.no_grad()
    def render_view(self, src: SourceSet, view: CameraView, near: float, far: float,
                    chunk: int = 1024) -> dict[str, np.ndarray]:
        """Render every pixel of ``view``; returns (H, W, C) numpy maps, ``sl`` as class ids
        and ``sl_prob`` as composited class probabilities."""
        dtype = next(self.parameters()).dtype
        volumes = self.encode(src)
        o, d = geometry.image_rays(view)
        o = torch.as_tensor(o, dtype=dtype)
        d = torch.as_tensor(d, dtype=dtype)
        parts: dict[str, list] = {}
        for s in range(0, len(o), chunk):
            out = self.render_rays(src, volumes, o[s:s + chunk], d[s:s + chunk], near, far)
            for k_, v_ in out.items():
                parts.setdefault(k_, []).append(v_)
        h, w = view.intrinsics.height, view.intrinsics.width
        maps = {k_: torch.cat(v_).reshape(h, w, -1).numpy() for k_, v_ in parts.items()}
        if "sl" in maps:
            maps["sl_prob"] = maps["sl"]
            maps["sl"] = maps["sl"].argmax(-1)[..., None].astype(np.uint8)
        return maps


class ModelPredictor:
    """Adapter giving a trained model the evaluation predictor interface.

    With ``setting2=True`` the source annotations of the Setting II tasks are
    replaced by the U-Net's predictions from the source RGB images.
    """

    def __init__(self, model: MTVSModel, near: float | None = None, far: float | None = None,
                 chunk: int = 1024, setting2: bool = False):
        self.model, self.near, self.far, self.chunk = model, near, far, chunk
        self.setting2 = setting2

    def for_scene(self, scene) -> "ModelPredictor":
        """Copy bound to a scene's depth bounds."""
        return ModelPredictor(self.model, scene.near, scene.far, self.chunk, self.setting2)

    def __call__(self, sources: Sequence[TaskBundle], target: CameraView) -> dict[str, np.ndarray]:
        if self.near is None or self.far is None:
            raise ValueError("depth bounds unset; bind them with for_scene()")
        self.model.eval()
        if self.setting2:
            from .setting2 import infer_setting2
            return infer_setting2(self.model, sources, target, self.near, self.far, chunk=self.chunk)
        src = make_source_set(sources, self.model.tasks, self.model.cfg.n_classes,
                              dtype=next(self.model.parameters()).dtype)
        return self.model.render_view(src, target, self.near, self.far, self.chunk)
