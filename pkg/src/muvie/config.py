"""Experiment configuration: nested dataclasses loaded from a YAML file.

Sections: ``scenes`` (dataset generation), ``model``, ``train`` and ``eval``.
CLI flags override individual keys after loading; ``MUVIE_SEED`` overrides
``seed``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

TASKS = ("rgb", "sn", "sh", "ed", "kp", "sl")
TASK_CHANNELS = {"rgb": 3, "sn": 3, "sh": 1, "ed": 1, "kp": 1}


class ConfigError(ValueError):
    pass


@dataclass
class ScenesConfig:
    n_train: int = 8
    n_test: int = 1
    n_frames: int = 16
    width: int = 64
    height: int = 64
    fov_deg: float = 40.0
    orbit_radius: float = 4.0
    elevation_deg: float = 25.0
    scene_radius: float = 1.8
    n_classes: int = 5
    min_spheres: int = 2
    max_spheres: int = 4
    with_plane: bool = False
    seed: int = 0


@dataclass
class ModelConfig:
    tasks: tuple[str, ...] = TASKS
    n_classes: int = 5
    encoder: str = "pyramid"
    d_scene: int = 32
    d_task: int = 32
    d_prompt: int = 16
    n_heads: int = 4
    d_hidden: int = 64
    cva_depth: int = 4
    cta_depth: int = 2
    pe_freqs: int = 6
    n_samples: int = 32
    ablate: str | None = None
    # Setting II
    setting2: bool = False
    setting2_tasks: tuple[str, ...] = ("sn", "ed", "kp")
    unet_widths: tuple[int, ...] = (16, 32, 64)

    def channels(self, task: str) -> int:
        return self.n_classes if task == "sl" else TASK_CHANNELS[task]


@dataclass
class LossWeights:
    rgb: float = 1.0
    sn: float = 1.0
    sl: float = 0.04
    sh: float = 0.1
    kp: float = 2.0
    ed: float = 0.4

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if not v > 0:
                raise ConfigError(f"loss weight {k} must be positive, got {v}")

    def __getitem__(self, task: str) -> float:
        return getattr(self, task)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    rays_per_batch: int = 1024
    frames_per_batch: int = 2
    n_views: int = 5
    stage1_iters: int = 5000
    stage2_iters: int = 1000
    loss_weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50

    def __post_init__(self):
        for k in ("rays_per_batch", "frames_per_batch", "n_views"):
            if getattr(self, k) < 1:
                raise ConfigError(f"train.{k} must be positive")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be non-negative")


@dataclass
class EvalConfig:
    n_views: int | None = None
    chunk: int = 1024
    write_images: bool = True


@dataclass
class Config:
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in fields:
            raise ConfigError(f"unknown key {where}.{k}")
        sub = {"loss_weights": LossWeights}.get(k)
        if sub is not None:
            v = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad section {where!r}: {e}") from None


def config_from_dict(data: dict, require_scenes: bool = False) -> Config:
    data = dict(data or {})
    if require_scenes and "scenes" not in data:
        raise ConfigError("config is missing the 'scenes' section")
    allowed = {"scenes", "model", "train", "eval", "seed"}
    for k in data:
        if k not in allowed:
            raise ConfigError(f"unknown section {k!r}")
    cfg = Config(
        scenes=_build(ScenesConfig, data.get("scenes"), "scenes"),
        model=_build(ModelConfig, data.get("model"), "model"),
        train=_build(TrainConfig, data.get("train"), "train"),
        eval=_build(EvalConfig, data.get("eval"), "eval"),
        seed=int(data.get("seed", 0)),
    )
    for t in cfg.model.tasks:
        if t not in TASKS:
            raise ConfigError(f"unknown task {t!r} in model.tasks")
    if "MUVIE_SEED" in os.environ:
        cfg.seed = int(os.environ["MUVIE_SEED"])
    return cfg


def load_config(path, require_scenes: bool = False) -> Config:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return config_from_dict(data, require_scenes=require_scenes)


def save_config(cfg: Config, path) -> None:
    d = cfg.to_dict()
    Path(path).write_text(yaml.safe_dump(_plain(d), sort_keys=False))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
