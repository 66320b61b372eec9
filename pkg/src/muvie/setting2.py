"""Inference without source annotations.

A small U-Net predicts the source-view annotations from RGB. It is trained
jointly with the renderer on pixel-wise task losses against the ground truth,
while the renderer keeps learning its blending weights on ground-truth
annotations. At inference only the predictions are blended.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TASK_CHANNELS, LossWeights
from .geometry import CameraView
from .toyscenes import TaskBundle


class Setting2Error(ValueError):
    pass


def _conv(c_in, c_out):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(),
                         nn.Conv2d(c_out, c_out, 3, padding=1), nn.ReLU())


class TaskDecoder(nn.Module):
    """Light deconvolution path back to full resolution with skip connections."""

    def __init__(self, widths: Sequence[int], c_out: int):
        super().__init__()
        w = list(widths)
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        c = w[-1]
        for skip in reversed(w):
            self.up.append(nn.ConvTranspose2d(c, skip, 2, stride=2))
            self.fuse.append(nn.Conv2d(2 * skip, skip, 3, padding=1))
            c = skip
        self.out = nn.Conv2d(c, c_out, 1)

    def forward(self, bottleneck, skips):
        x = bottleneck
        for up, fuse, s in zip(self.up, self.fuse, reversed(skips)):
            x = F.relu(fuse(torch.cat([up(x), s], dim=1)))
        return self.out(x)


class UNet(nn.Module):
    """Shared encoder with one decoder head per task; 3 down/up levels."""

    def __init__(self, tasks: Sequence[str], n_classes: int = 5, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.tasks = tuple(tasks)
        self.n_classes = n_classes
        self.factor = 2 ** len(widths)
        self.enc = nn.ModuleList()
        c = 3
        for w in widths:
            self.enc.append(_conv(c, w))
            c = w
        self.bottleneck = _conv(widths[-1], widths[-1])
        self.heads = nn.ModuleDict(
            {t: TaskDecoder(widths, n_classes if t == "sl" else TASK_CHANNELS[t]) for t in self.tasks})

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """(V, H, W, 3) -> task -> (V, H, W, C) in the task's value range."""
        v, h, w, _ = images.shape
        if h % self.factor or w % self.factor:
            raise Setting2Error(f"resolution {h}x{w} not divisible by {self.factor}; pad the inputs")
        x = images.permute(0, 3, 1, 2)
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        out = {}
        for t, head in self.heads.items():
            y = head(x, skips)
            if t == "sn":
                y = torch.tanh(y)
            elif t == "sl":
                y = torch.softmax(y, dim=1)
            else:
                y = torch.sigmoid(y)
            out[t] = y.permute(0, 2, 3, 1)
        return out


def unet_predict(model_or_unet, images) -> list[dict[str, np.ndarray]]:
    """Per-view predicted bundles (task -> (H, W, C) numpy) for a stack of images."""
    unet = getattr(model_or_unet, "unet", model_or_unet)
    dtype = next(unet.parameters()).dtype
    with torch.no_grad():
        out = unet(torch.as_tensor(np.asarray(images), dtype=dtype))
    return [{t: y[i].numpy() for t, y in out.items()} for i in range(len(images))]


def regression_l1(pred, gt):
    return (pred - gt).abs().mean()


def unet_loss(pred: dict[str, torch.Tensor], gt: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Pixel-wise task losses between predicted and true source maps.

    Regression maps use mean absolute error over views, pixels and channels;
    ``sl`` takes class-probability maps against integer (V, H, W, 1) labels.
    """
    losses = {}
    for t, p in pred.items():
        g = gt[t]
        if t == "sl":
            if p.shape[:-1] != g.shape[:-1]:
                raise Setting2Error(f"sl prediction {tuple(p.shape)} vs labels {tuple(g.shape)}")
            prob = p.gather(-1, g.long()).clamp_min(1e-8)
            losses[t] = -prob.log().mean()
        else:
            if p.shape != g.shape:
                raise Setting2Error(f"{t} prediction {tuple(p.shape)} vs target {tuple(g.shape)}")
            losses[t] = regression_l1(p, g)
    return losses


def final_loss(render_losses: dict, unet_losses: dict, weights: LossWeights):
    """sum_j lambda_j (L_T_j + L_U_j); tasks without a U-Net branch contribute only L_T_j."""
    total = 0.0
    for t, lt in render_losses.items():
        total = total + weights[t] * (lt + unet_losses.get(t, 0.0))
    return total


def predicted_overrides(model, sources: Sequence[TaskBundle]) -> dict[str, torch.Tensor]:
    if model.unet is None:
        raise Setting2Error("model was built without the Setting II U-Net (setting2=false)")
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(np.stack([b.rgb for b in sources]), dtype=dtype)
    with torch.no_grad():
        return model.unet(images)


def infer_setting2(model, sources: Sequence[TaskBundle], target: CameraView, near: float, far: float,
                   predictions: dict[str, torch.Tensor] | None = None, chunk: int = 1024):
    """Render the target from source RGB + poses, blending predicted annotations.

    ``predictions`` substitutes the U-Net output (task -> (V, H, W, C)); RGB is
    always blended from the raw source images.
    """
    from .model import make_source_set

    if predictions is None:
        predictions = predicted_overrides(model, sources)
    dtype = next(model.parameters()).dtype
    overrides = dict(predictions)
    v, (h, w) = len(sources), sources[0].rgb.shape[:2]
    for t in model.tasks:
        # no annotation reaches the renderer unless it was predicted
        if t != "rgb" and t not in overrides:
            overrides[t] = torch.zeros(v, h, w, model.channels(t), dtype=dtype)
    src = make_source_set(sources, model.tasks, model.cfg.n_classes, overrides, dtype=dtype)
    maps = model.render_view(src, target, near, far, chunk)
    keep = ("rgb", "opacity", *predictions.keys())
    return {k: v for k, v in maps.items() if k in keep or (k == "sl_prob" and "sl" in keep)}
