"""Procedural sphere scenes with analytic ground truth for every task.

A scene is a handful of Lambertian spheres (plus an optional plane) under one
directional light. ``render_ground_truth`` ray-traces a view and derives all six
task maps from the hit geometry; ``generate_dataset`` writes an orbit of such
views in the on-disk format handled by :mod:`muvie.dataset`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, CameraPose, CameraView, image_rays

N_CLASSES = 5
BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    class_id: int


@dataclass(frozen=True)
class Plane:
    """Infinite plane ``{x : normal . x = offset}``; the normal is the lit side."""

    normal: tuple[float, float, float]
    offset: float
    albedo: tuple[float, float, float]
    class_id: int


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple[Sphere, ...]
    light_direction: tuple[float, float, float]
    plane: Plane | None = None
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ambient: float = 0.1
    n_classes: int = N_CLASSES
    seed: int = 0

    def __post_init__(self):
        for s in self.spheres:
            if s.radius <= 0:
                raise ValueError(f"sphere radius must be positive, got {s.radius}")
            if not 0 <= s.class_id < self.n_classes:
                raise ValueError(f"class id {s.class_id} outside [0, {self.n_classes})")
        if self.plane is not None and not 0 <= self.plane.class_id < self.n_classes:
            raise ValueError(f"plane class id {self.plane.class_id} outside [0, {self.n_classes})")
        if abs(np.linalg.norm(self.light_direction) - 1.0) > 1e-6:
            raise ValueError("light_direction must be unit length")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["spheres"] = tuple(Sphere(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
                             for s in d["spheres"])
        if d.get("plane") is not None:
            d["plane"] = Plane(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["plane"].items()})
        for k in ("light_direction", "background_color"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TaskBundle:
    """Per-view stack of RGB, the five property maps and auxiliary depth.

    Shapes: rgb/sn (H, W, 3), sh/ed/kp/depth (H, W, 1), sl (H, W, 1) int.
    ``depth`` is camera-frame z of the nearest hit and 0 where the ray misses.
    """

    rgb: np.ndarray
    sn: np.ndarray
    sh: np.ndarray
    ed: np.ndarray
    kp: np.ndarray
    sl: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    intrinsics: CameraIntrinsics
    meta: dict = field(default_factory=dict)

    @property
    def view(self) -> CameraView:
        return CameraView(self.intrinsics, self.pose)

    @property
    def valid(self) -> np.ndarray:
        return self.depth[..., 0] > 0

    def task_map(self, task: str) -> np.ndarray:
        return getattr(self, task)


def random_scene(seed: int, n_classes: int = N_CLASSES, n_spheres: tuple[int, int] = (2, 4),
                 extent: float = 0.8, radius: tuple[float, float] = (0.3, 0.6),
                 with_plane: bool = False) -> SceneSpec:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(n_spheres[0], n_spheres[1] + 1))
    spheres = []
    for _ in range(k):
        c = rng.uniform(-extent, extent, size=3)
        c[2] *= 0.5
        hue = rng.uniform(0, 1)
        albedo = _hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0))
        spheres.append(Sphere(tuple(float(x) for x in c), float(rng.uniform(*radius)),
                              tuple(float(x) for x in albedo), int(rng.integers(1, n_classes))))
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 0.5
    light /= np.linalg.norm(light)
    plane = None
    if with_plane:
        plane = Plane((0.0, 0.0, 1.0), -extent, (0.6, 0.6, 0.6), int(rng.integers(1, n_classes)))
    return SceneSpec(tuple(spheres), tuple(float(x) for x in light), plane=plane,
                     n_classes=n_classes, seed=seed)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def trace(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: distance along the ray (inf on miss), normal, primitive index.

    Index -1 means miss, len(spheres) means the plane.
    """
    n = len(origins)
    best = np.full(n, np.inf)
    idx = np.full(n, -1)
    normals = np.zeros((n, 3))
    for i, s in enumerate(spec.spheres):
        oc = origins - np.asarray(s.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit &= t > 1e-9
        closer = hit & (t < best)
        best[closer] = t[closer]
        idx[closer] = i
    if spec.plane is not None:
        pn = np.asarray(spec.plane.normal, dtype=np.float64)
        denom = dirs @ pn
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (spec.plane.offset - origins @ pn) / denom
        closer = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < best)
        best[closer] = t[closer]
        idx[closer] = len(spec.spheres)
    points = origins + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    for i, s in enumerate(spec.spheres):
        m = idx == i
        normals[m] = (points[m] - np.asarray(s.center)) / s.radius
    if spec.plane is not None:
        m = idx == len(spec.spheres)
        pn = np.asarray(spec.plane.normal, dtype=np.float64)
        # face the normal towards the viewer
        flip = np.where(dirs[m] @ pn > 0, -1.0, 1.0)
        normals[m] = flip[:, None] * pn
    normals[idx >= 0] /= np.linalg.norm(normals[idx >= 0], axis=1, keepdims=True)
    return best, normals, idx


def analytic_normal(spec: SceneSpec, points: np.ndarray, idx: np.ndarray, view_dirs=None) -> np.ndarray:
    """Normal of primitive ``idx`` evaluated at ``points`` (used to check stored normals)."""
    out = np.zeros_like(points)
    for i, s in enumerate(spec.spheres):
        m = idx == i
        v = points[m] - np.asarray(s.center)
        out[m] = v / np.linalg.norm(v, axis=1, keepdims=True)
    if spec.plane is not None:
        m = idx == len(spec.spheres)
        pn = np.asarray(spec.plane.normal, dtype=np.float64)
        flip = np.ones(m.sum()) if view_dirs is None else np.where(view_dirs[m] @ pn > 0, -1.0, 1.0)
        out[m] = flip[:, None] * pn
    return out


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def label_boundaries(sl: np.ndarray) -> np.ndarray:
    """True where a pixel's class differs from any 4-neighbour."""
    b = np.zeros(sl.shape, dtype=bool)
    d = sl[1:, :] != sl[:-1, :]
    b[1:, :] |= d
    b[:-1, :] |= d
    d = sl[:, 1:] != sl[:, :-1]
    b[:, 1:] |= d
    b[:, :-1] |= d
    return b


def edge_map(sl: np.ndarray, depth: np.ndarray, n_classes: int) -> np.ndarray:
    """Sobel magnitude over class indicators and normalised depth, max-normalised.

    The 4-neighbour boundary indicator is added so one-pixel-wide regions, where
    Sobel responses cancel, still register as edges.
    """
    d = depth / depth.max() if depth.max() > 0 else depth
    raw = sobel_magnitude(d)
    for c in range(n_classes):
        raw = raw + sobel_magnitude((sl == c).astype(np.float64))
    raw = raw + label_boundaries(sl)
    return raw / raw.max() if raw.max() > 0 else raw


def corner_map(rgb: np.ndarray, sigma: float = 1.0, k: float = 0.05) -> np.ndarray:
    """Harris response ``det(M) - k tr(M)^2`` on luminance, negatives clipped, max-normalised."""
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    r = np.clip(sxx * syy - sxy ** 2 - k * (sxx + syy) ** 2, 0, None)
    return r / r.max() if r.max() > 0 else r


def render_ground_truth(spec: SceneSpec, view: CameraView) -> TaskBundle:
    intr = view.intrinsics
    h, w = intr.height, intr.width
    origins, dirs = image_rays(view)
    dist, normals, idx = trace(spec, origins, dirs)
    hit = idx >= 0

    forward = view.pose.rotation[:, 2]
    depth = np.where(hit, np.where(hit, dist, 0.0) * (dirs @ forward), 0.0)

    albedo = np.zeros((len(idx), 3))
    cls = np.zeros(len(idx), dtype=np.int64)
    for i, s in enumerate(spec.spheres):
        albedo[idx == i] = s.albedo
        cls[idx == i] = s.class_id
    if spec.plane is not None:
        m = idx == len(spec.spheres)
        albedo[m] = spec.plane.albedo
        cls[m] = spec.plane.class_id

    light = np.asarray(spec.light_direction, dtype=np.float64)
    shade = np.where(hit, np.clip(normals @ light, 0.0, None), 0.0)
    rgb = np.where(hit[:, None], np.clip(albedo * shade[:, None] + spec.ambient, 0.0, 1.0),
                   np.asarray(spec.background_color))

    rgb = rgb.reshape(h, w, 3)
    sl = cls.reshape(h, w)
    depth = depth.reshape(h, w)
    return TaskBundle(
        rgb=rgb.astype(np.float32),
        sn=normals.reshape(h, w, 3).astype(np.float32),
        sh=shade.reshape(h, w, 1).astype(np.float32),
        ed=edge_map(sl, depth, spec.n_classes)[..., None].astype(np.float32),
        kp=corner_map(rgb)[..., None].astype(np.float32),
        sl=sl[..., None].astype(np.uint8),
        depth=depth[..., None].astype(np.float32),
        pose=view.pose,
        intrinsics=intr,
    )


@dataclass(frozen=True)
class Orbit:
    """Cameras on a horizontal circle around ``target`` looking at it."""

    radius: float = 4.0
    elevation_deg: float = 25.0
    start_deg: float = 0.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def pose(self, angle_deg: float) -> CameraPose:
        a, e = math.radians(angle_deg), math.radians(self.elevation_deg)
        eye = np.asarray(self.target) + self.radius * np.array(
            [math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
        return CameraPose.look_at(eye, self.target)

    def angles(self, n_frames: int) -> list[float]:
        return [self.start_deg + 360.0 * i / n_frames for i in range(n_frames)]


def held_out_indices(n_frames: int, every: int = 8) -> list[int]:
    return list(range(0, n_frames, every))


def generate_dataset(spec: SceneSpec, n_frames: int, orbit: Orbit, path,
                     intrinsics: CameraIntrinsics | None = None, n_views: int = 5,
                     scene_radius: float = 1.8) -> Path:
    """Render an orbit of ``n_frames`` views and write them to ``path``; every 8th frame is held out."""
    from .dataset import write_dataset

    if n_frames < n_views + 1:
        raise ValueError(f"n_frames={n_frames} must be at least n_views + 1 = {n_views + 1}")
    intrinsics = intrinsics or CameraIntrinsics.from_fov(64, 64, 40.0)
    bundles = []
    for i, a in enumerate(orbit.angles(n_frames)):
        b = render_ground_truth(spec, CameraView(intrinsics, orbit.pose(a)))
        b.meta = {"index": i, "orbit_angle_deg": a}
        bundles.append(b)
    bounds = (max(orbit.radius - scene_radius, 0.05), orbit.radius + scene_radius)
    return write_dataset(path, bundles, held_out_indices(n_frames), spec=spec, bounds=bounds)
