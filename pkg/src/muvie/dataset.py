"""On-disk scene format.

::

    scene/
      poses.json            intrinsics, bounds, per-frame camera_to_world (row-major 4x4)
      split.json            held-out and train frame indices
      frames/rgb_0000.png   8-bit RGB
      frames/sl_0000.png    8-bit grayscale class ids
      frames/{sn,sh,ed,kp,depth}_0000.pfm   little-endian float32 PFM

Depth is 0 where the ray misses; the validity mask is ``depth > 0``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, CameraPose, GeometryError
from .toyscenes import SceneSpec, TaskBundle

FLOAT_TASKS = ("sn", "sh", "ed", "kp", "depth")


class DatasetError(Exception):
    pass


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Returns (H, W, C) float32."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            kind = f.readline().strip()
            dims = f.readline().decode("ascii")
            scale = float(f.readline().decode("ascii").strip())
            raw = f.read()
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    except (UnicodeDecodeError, ValueError) as e:
        raise DatasetError(f"malformed PFM header in {path}: {e}") from None
    if kind not in (b"PF", b"Pf"):
        raise DatasetError(f"malformed PFM header in {path}: bad magic {kind!r}")
    m = re.fullmatch(r"\s*(\d+)\s+(\d+)\s*", dims)
    if not m:
        raise DatasetError(f"malformed PFM header in {path}: bad dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    c = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    if len(raw) != w * h * c * 4:
        raise DatasetError(f"shape mismatch in {path}: expected {w}x{h}x{c} floats, got {len(raw) // 4}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, c)
    return np.flipud(data).astype(np.float32)


@dataclass
class Scene:
    """A loaded scene: bundles in frame order plus split metadata."""

    bundles: list[TaskBundle]
    held_out: list[int]
    train: list[int]
    near: float
    far: float
    name: str = ""
    spec: SceneSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.bundles)


def write_dataset(path, bundles: list[TaskBundle], held_out: list[int], spec: SceneSpec | None = None,
                  bounds: tuple[float, float] = (0.1, 10.0)) -> Path:
    path = Path(path)
    frames = path / "frames"
    try:
        frames.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {frames}: {e}") from None
    intr = bundles[0].intrinsics
    poses = {
        "intrinsics": intr.to_dict(),
        "near": float(bounds[0]),
        "far": float(bounds[1]),
        "frames": [
            {"index": i, "camera_to_world": b.pose.camera_to_world.tolist(),
             **{k: v for k, v in b.meta.items() if k != "index"}}
            for i, b in enumerate(bundles)
        ],
    }
    if spec is not None:
        poses["scene"] = spec.to_dict()
    (path / "poses.json").write_text(json.dumps(poses, indent=1))
    split = {"held_out": sorted(held_out), "train": [i for i in range(len(bundles)) if i not in held_out]}
    (path / "split.json").write_text(json.dumps(split))
    for i, b in enumerate(bundles):
        rgb8 = np.round(np.clip(b.rgb, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb8, "RGB").save(frames / f"rgb_{i:04d}.png")
        Image.fromarray(b.sl[..., 0].astype(np.uint8), "L").save(frames / f"sl_{i:04d}.png")
        for t in FLOAT_TASKS:
            write_pfm(frames / f"{t}_{i:04d}.pfm", getattr(b, t))
    return path


def _read_json(p: Path):
    try:
        return json.loads(p.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file {p}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {p}: {e}") from None


def _read_png(p: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(p) as im:
            if im.mode != mode:
                raise DatasetError(f"{p} has mode {im.mode}, expected {mode}")
            return np.asarray(im)
    except FileNotFoundError:
        raise DatasetError(f"missing file {p}") from None
    except OSError as e:
        raise DatasetError(f"unreadable image {p}: {e}") from None


def load_dataset(path) -> Scene:
    path = Path(path)
    poses_path = path / "poses.json"
    poses = _read_json(poses_path)
    split = _read_json(path / "split.json")
    try:
        intr = CameraIntrinsics(**poses["intrinsics"])
        frames = poses["frames"]
        mats = [CameraPose(np.asarray(f["camera_to_world"], dtype=np.float64)) for f in frames]
        near, far = float(poses["near"]), float(poses["far"])
    except (KeyError, TypeError, ValueError, GeometryError) as e:
        raise DatasetError(f"malformed pose data in {poses_path}: {e!r}") from None
    h, w = intr.height, intr.width
    bundles = []
    for i, (f, pose) in enumerate(zip(frames, mats)):
        maps = {}
        maps["rgb"] = _read_png(path / "frames" / f"rgb_{i:04d}.png", "RGB").astype(np.float32) / 255.0
        maps["sl"] = _read_png(path / "frames" / f"sl_{i:04d}.png", "L")[..., None].copy()
        for t in FLOAT_TASKS:
            maps[t] = read_pfm(path / "frames" / f"{t}_{i:04d}.pfm")
        for name, m in maps.items():
            if m.shape[:2] != (h, w):
                raise DatasetError(f"shape mismatch in frame {i} {name}: {m.shape[:2]} vs {(h, w)}")
        meta = {k: v for k, v in f.items() if k != "camera_to_world"}
        bundles.append(TaskBundle(pose=pose, intrinsics=intr, meta=meta, **maps))
    spec = SceneSpec.from_dict(poses["scene"]) if "scene" in poses else None
    held = [int(i) for i in split.get("held_out", [])]
    train = [int(i) for i in split.get("train", [i for i in range(len(bundles)) if i not in held])]
    return Scene(bundles, held, train, near, far, name=path.name, spec=spec)
