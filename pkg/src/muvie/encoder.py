"""Image encoders that turn source views into per-pixel feature volumes.

An encoder exposes two calls:

``extract_features(images)``
    (V, H, W, 3) images in [0, 1] -> (V, d_scene, H, W) feature volumes
``gather(volumes, uv, valid)``
    bilinear lookup of projected points -> (P, V, d_scene), zero rows where invalid

``gather_scene_features`` wraps the two for a single world point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraView, project_points, view_tensors


class EncoderError(ValueError):
    pass


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride) if (stride != 1 or c_in != c_out) else nn.Identity()

    def forward(self, x):
        return F.relu(self.skip(x) + self.conv2(F.relu(self.conv1(x))))


def gather(volumes: torch.Tensor, uv: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (V, C, H, W) maps at pixel coords uv (V, P, 2) -> (P, V, C).

    Pixel centres are at integer coordinates, so ``align_corners=True``.
    """
    v_, c, h, w = volumes.shape
    grid = torch.stack([2 * uv[..., 0] / (w - 1) - 1, 2 * uv[..., 1] / (h - 1) - 1], dim=-1)
    out = F.grid_sample(volumes, grid[:, :, None, :].to(volumes.dtype), mode="bilinear",
                        padding_mode="zeros", align_corners=True)[..., 0]
    out = out * valid[:, None, :].to(out.dtype)
    return out.permute(2, 0, 1)


class PyramidEncoder(nn.Module):
    """Residual conv blocks at strides 1, 2 and 4; outputs upsampled, concatenated with
    the image and fused by a 1x1 conv into ``d_scene`` channels at input resolution."""

    def __init__(self, d_scene: int = 32, widths: Sequence[int] = (16, 32, 32)):
        super().__init__()
        self.d_scene = d_scene
        self.block1 = ResidualBlock(3, widths[0], 1)
        self.block2 = ResidualBlock(widths[0], widths[1], 2)
        self.block3 = ResidualBlock(widths[1], widths[2], 2)
        self.fuse = nn.Conv2d(3 + sum(widths), d_scene, 1)

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images)
        x = images.permute(0, 3, 1, 2)
        h, w = x.shape[-2:]
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        up = [F.interpolate(f, size=(h, w), mode="bilinear", align_corners=True) for f in (f2, f3)]
        return self.fuse(torch.cat([x, f1, *up], dim=1))

    forward = extract_features
    gather = staticmethod(gather)


class SingleScaleEncoder(nn.Module):
    """One residual block at full resolution; a cheaper drop-in backbone."""

    def __init__(self, d_scene: int = 32, width: int = 32):
        super().__init__()
        self.d_scene = d_scene
        self.block = ResidualBlock(3, width, 1)
        self.fuse = nn.Conv2d(3 + width, d_scene, 1)

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images)
        x = images.permute(0, 3, 1, 2)
        return self.fuse(torch.cat([x, self.block(x)], dim=1))

    forward = extract_features
    gather = staticmethod(gather)


ENCODERS = {"pyramid": PyramidEncoder, "single-scale": SingleScaleEncoder}


def build_encoder(name: str, d_scene: int) -> nn.Module:
    try:
        return ENCODERS[name](d_scene)
    except KeyError:
        raise EncoderError(f"unknown encoder {name!r}; choose from {sorted(ENCODERS)}") from None


def _check_images(images):
    if images.dim() != 4 or images.shape[-1] != 3:
        raise EncoderError(f"expected (V, H, W, 3) images, got {tuple(images.shape)}")


def extract_features(encoder, images) -> list[torch.Tensor]:
    """Per-view feature volumes (d_scene, H, W) for a list/stack of (H, W, 3) images."""
    if isinstance(images, (list, tuple)):
        shapes = {tuple(np.shape(im)) for im in images}
        if len(shapes) != 1:
            raise EncoderError(f"source views have mismatched resolutions: {sorted(shapes)}")
        images = np.stack([np.asarray(im) for im in images])
    images = torch.as_tensor(images, dtype=next(encoder.parameters()).dtype)
    return list(encoder.extract_features(images))


@dataclass
class SceneFeature:
    features: torch.Tensor   # (V, d_scene)
    mask: torch.Tensor       # (V,) bool


def gather_scene_features(volumes, views: Sequence[CameraView], q) -> SceneFeature:
    if len(volumes) != len(views):
        raise EncoderError(f"{len(volumes)} volumes for {len(views)} views")
    vol = torch.stack(list(volumes))
    k, w2c, _ = view_tensors(views, dtype=torch.float64)
    q = torch.as_tensor(np.asarray(q, dtype=np.float64)).reshape(1, 3)
    h, w = vol.shape[-2:]
    uv, _, valid = project_points(q, k, w2c, w, h)
    feats = gather(vol, uv.to(vol.dtype), valid)[0]
    return SceneFeature(feats, valid[:, 0])
