"""Pinhole camera model, rays, projection and angle encodings.

Conventions used across the package:

* cameras look down their local +z axis, +x right, +y down;
* pixel ``(u, v)`` maps to the camera-space direction ``((u-cx)/fx, (v-cy)/fy, 1)``;
* pixel centres sit at integer coordinates;
* poses are 4x4 row-major camera-to-world matrices.

The scalar helpers (``generate_rays``, ``project_point``, ``view_angle``) validate
their inputs and raise. The batched torch helpers used inside the model do not;
they return validity masks instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


class GeometryError(ValueError):
    pass


class BoundsError(GeometryError):
    """A pixel lies outside the image."""


class BehindCameraError(GeometryError):
    """A point has non-positive camera-frame depth."""


class DegenerateGeometryError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square pixels, principal point at the image centre, horizontal field of view."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


@dataclass(frozen=True)
class CameraPose:
    camera_to_world: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"pose must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise GeometryError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise GeometryError("rotation block has det != +1")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise GeometryError("bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "camera_to_world", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(4))

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> "CameraPose":
        m = np.eye(4)
        m[:3, 3] = t
        return cls(m)

    @classmethod
    def look_at(cls, eye, target, world_up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, world_up)
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise DegenerateGeometryError("viewing direction parallel to world up")
        right /= n
        down = np.cross(forward, right)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, forward, eye
        return cls(m)


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def pixel_directions(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Unnormalised camera-frame directions (z = 1) for pixel arrays."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def generate_rays(view: CameraView, pixels: Sequence[tuple[float, float]]) -> list[Ray]:
    intr = view.intrinsics
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    bad = (px[:, 0] < 0) | (px[:, 0] > intr.width - 1) | (px[:, 1] < 0) | (px[:, 1] > intr.height - 1)
    if bad.any():
        raise BoundsError(f"pixel {tuple(px[bad][0])} outside {intr.width}x{intr.height} image")
    origins, dirs = camera_rays(view, px[:, 0], px[:, 1])
    return [Ray(o, d) for o, d in zip(origins, dirs)]


def camera_rays(view: CameraView, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ray generation without bounds checks; returns (origins, unit directions)."""
    d_cam = pixel_directions(view.intrinsics, u, v)
    d = d_cam @ view.pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(view.pose.center, d.shape).copy()
    return o, d


def image_rays(view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel in row-major order, shapes (H*W, 3)."""
    h, w = view.intrinsics.height, view.intrinsics.width
    v, u = np.mgrid[0:h, 0:w]
    return camera_rays(view, u.ravel(), v.ravel())


def project_point(q, view: CameraView) -> tuple[float, float, float]:
    """Project a world point to continuous pixel coordinates; returns (u, v, depth)."""
    q = np.asarray(q, dtype=np.float64)
    w2c = np.linalg.inv(view.pose.camera_to_world)
    p = w2c[:3, :3] @ q + w2c[:3, 3]
    if p[2] <= 0:
        raise BehindCameraError(f"point {q.tolist()} has camera depth {p[2]:.6g}")
    intr = view.intrinsics
    return intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy, float(p[2])


def positional_encoding(x, n_freqs: int):
    """(sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)) per component.

    Accepts python scalars, numpy arrays or torch tensors. The encoding of each
    input component occupies 2L consecutive output entries.
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    if isinstance(x, torch.Tensor):
        freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)) * math.pi
        arg = x[..., None] * freqs
        out = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)
        return out.reshape(*x.shape[:-1], -1) if x.dim() else out.reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    freqs = (2.0 ** np.arange(n_freqs)) * math.pi
    arg = x[..., None] * freqs
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return out.reshape(*x.shape[:-1], -1) if x.ndim else out.reshape(-1)


def view_angle(ray: Ray, source_center, q) -> float:
    """Angle between the target ray direction and the line source_center -> q."""
    line = np.asarray(q, dtype=np.float64) - np.asarray(source_center, dtype=np.float64)
    n = np.linalg.norm(line)
    if n < 1e-12:
        raise DegenerateGeometryError("query point coincides with source camera centre")
    d = np.asarray(ray.direction, dtype=np.float64)
    c = float(np.dot(d / np.linalg.norm(d), line / n))
    return math.acos(min(1.0, max(-1.0, c)))


# ----------------------------------------------------------------------------
# batched torch versions used by the model


def view_tensors(views: Sequence[CameraView], dtype=torch.float32):
    """Stack intrinsics (V, 4) [fx, fy, cx, cy], world-to-camera (V, 4, 4) and centres (V, 3)."""
    k = torch.tensor([[v.intrinsics.fx, v.intrinsics.fy, v.intrinsics.cx, v.intrinsics.cy] for v in views],
                     dtype=dtype)
    w2c = torch.tensor(np.stack([np.linalg.inv(v.pose.camera_to_world) for v in views]), dtype=dtype)
    centers = torch.tensor(np.stack([v.pose.center for v in views]), dtype=dtype)
    return k, w2c, centers


def project_points(points: torch.Tensor, k: torch.Tensor, w2c: torch.Tensor,
                   width: int, height: int):
    """Project (..., 3) world points into V views.

    Returns ``uv`` of shape (V, ..., 2), depth (V, ...) and a validity mask that
    is true where the point is in front of the camera and inside the image.
    """
    flat = points.reshape(-1, 3)
    cam = torch.einsum("vij,pj->vpi", w2c[:, :3, :3], flat) + w2c[:, None, :3, 3]
    z = cam[..., 2]
    zs = torch.where(z > 1e-8, z, torch.ones_like(z))
    u = k[:, None, 0] * cam[..., 0] / zs + k[:, None, 2]
    v = k[:, None, 1] * cam[..., 1] / zs + k[:, None, 3]
    valid = (z > 1e-8) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    shape = (w2c.shape[0],) + points.shape[:-1]
    return torch.stack([u, v], -1).reshape(*shape, 2), z.reshape(shape), valid.reshape(shape)


def view_angles(directions: torch.Tensor, points: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Angles (V, ...) between ray directions (..., 3) and source-centre-to-point lines."""
    line = points[None] - centers.reshape(-1, *([1] * (points.dim() - 1)), 3)
    line = line / line.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    d = directions / directions.norm(dim=-1, keepdim=True)
    return torch.acos((line * d[None]).sum(-1).clamp(-1.0, 1.0))
