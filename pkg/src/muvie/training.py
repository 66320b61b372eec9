"""Losses, ray batching, the two-stage schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import geometry
from .checkpoint import save_checkpoint
from .config import Config, LossWeights, TrainConfig
from .dataset import Scene
from .model import MTVSModel, SourceSet, make_source_set, nearest_views
from .setting2 import final_loss, unet_loss

log = logging.getLogger(__name__)

REGRESSION_L1 = ("sn", "sh", "ed", "kp")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


def task_loss(pred: torch.Tensor, gt: torch.Tensor, task: str) -> torch.Tensor:
    """RGB: mean squared error. SN/SH/ED/KP: mean absolute error.
    SL: cross-entropy of class probabilities (..., C) against integer labels (...)."""
    if task == "rgb":
        if pred.shape != gt.shape:
            raise ValueError(f"rgb prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
        return ((pred - gt) ** 2).mean()
    if task in REGRESSION_L1:
        if pred.shape != gt.shape:
            raise ValueError(f"{task} prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
        return (pred - gt).abs().mean()
    if task == "sl":
        labels = gt.long().reshape(pred.shape[:-1])
        p = pred.gather(-1, labels[..., None])[..., 0]
        return -torch.log(p.clamp_min(1e-8)).mean()
    raise ValueError(f"unknown task {task!r}")


def multitask_loss(losses: dict, weights: LossWeights, tasks: Sequence[str] | None = None):
    tasks = tuple(losses) if tasks is None else tuple(tasks)
    missing = [t for t in tasks if t not in losses]
    if missing:
        raise ValueError(f"missing loss for tasks {missing}")
    return sum(weights[t] * losses[t] for t in tasks)


# ----------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class SchedulePlan:
    stage1_iters: int
    stage2_iters: int

    @property
    def boundary(self) -> int:
        return self.stage1_iters

    @property
    def total(self) -> int:
        return self.stage1_iters + self.stage2_iters

    def stage(self, iteration: int) -> int:
        return 1 if iteration < self.boundary else 2

    def frozen_parameters(self, model: MTVSModel, iteration: int) -> list[torch.nn.Parameter]:
        """Stage 1 freezes the self-attention of the cross-task module's joint stage."""
        if self.stage(iteration) == 2:
            return []
        return list(model.decoder.cta.self_attention_parameters())


def two_stage_schedule(cfg: TrainConfig) -> SchedulePlan:
    return SchedulePlan(cfg.stage1_iters, cfg.stage2_iters)


# ----------------------------------------------------------------------------
# ray batches


@dataclass
class RayGroup:
    """Rays from one target frame together with that frame's source views."""

    src: SourceSet
    origins: torch.Tensor
    dirs: torch.Tensor
    gt: dict[str, torch.Tensor]
    near: float
    far: float
    source_gt: dict[str, torch.Tensor] = field(default_factory=dict)


class RaySampler:
    """Draws target frames uniformly from all training frames of the training scenes and
    pixels uniformly within them; sources are the nearest other training frames."""

    def __init__(self, scenes: Sequence[Scene], tasks: Sequence[str], n_classes: int, n_views: int,
                 setting2_tasks: Sequence[str] = (), seed: int = 0):
        self.scenes = list(scenes)
        self.tasks = tuple(tasks)
        self.n_classes = n_classes
        self.n_views = n_views
        self.setting2_tasks = tuple(setting2_tasks)
        self.rng = np.random.default_rng(seed)
        self.frames = [(s, i) for s, sc in enumerate(self.scenes) for i in sc.train]
        if not self.frames:
            raise TrainingError("no training frames")
        self._sources: dict[tuple[int, int], list[int]] = {}

    def sources_for(self, scene_idx: int, frame: int) -> list[int]:
        key = (scene_idx, frame)
        if key not in self._sources:
            sc = self.scenes[scene_idx]
            cands = [sc.bundles[i].view for i in sc.train]
            order = nearest_views(cands, sc.bundles[frame].view, self.n_views,
                                  exclude=[sc.train.index(frame)] if frame in sc.train else [])
            self._sources[key] = [sc.train[i] for i in order]
        return self._sources[key]

    def sample(self, n_rays: int, n_frames: int, dtype=torch.float32) -> list[RayGroup]:
        picks = self.rng.integers(len(self.frames), size=n_frames)
        counts = np.full(n_frames, n_rays // n_frames)
        counts[: n_rays % n_frames] += 1
        groups = []
        for (s, f), n in zip((self.frames[p] for p in picks), counts):
            sc = self.scenes[s]
            target = sc.bundles[f]
            srcs = [sc.bundles[i] for i in self.sources_for(s, f)]
            h, w = target.rgb.shape[:2]
            pix = self.rng.integers(h * w, size=int(n))
            u, v = pix % w, pix // w
            o, d = geometry.camera_rays(target.view, u, v)
            gt = {t: torch.as_tensor(target.task_map(t)[v, u], dtype=dtype) for t in self.tasks}
            src_gt = {}
            for t in self.setting2_tasks:
                src_gt[t] = torch.as_tensor(np.stack([b.task_map(t) for b in srcs]),
                                            dtype=torch.long if t == "sl" else dtype)
            groups.append(RayGroup(make_source_set(srcs, self.tasks, self.n_classes, dtype=dtype),
                                   torch.as_tensor(o, dtype=dtype), torch.as_tensor(d, dtype=dtype),
                                   gt, sc.near, sc.far, src_gt))
        return groups


# ----------------------------------------------------------------------------
# training state and steps


@dataclass
class LossRecord:
    iteration: int
    total: float
    tasks: dict[str, float]
    unet: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainState:
    model: MTVSModel
    optimizer: torch.optim.Optimizer
    schedule: SchedulePlan
    weights: LossWeights
    generator: torch.Generator
    iteration: int = 0


def make_state(model: MTVSModel, cfg: TrainConfig, seed: int = 0) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    return TrainState(model, opt, two_stage_schedule(cfg), cfg.loss_weights,
                      torch.Generator().manual_seed(seed))


def batch_losses(model: MTVSModel, groups: Sequence[RayGroup], generator=None, jitter: bool = True):
    """Per-task rendering losses and (with a U-Net) per-task source-prediction losses."""
    preds: dict[str, list] = {t: [] for t in model.tasks}
    gts: dict[str, list] = {t: [] for t in model.tasks}
    unet_terms: dict[str, list] = {}
    for g in groups:
        volumes = model.encode(g.src)
        out = model.render_rays(g.src, volumes, g.origins, g.dirs, g.near, g.far, jitter=jitter,
                                generator=generator)
        for t in model.tasks:
            preds[t].append(out[t])
            gts[t].append(g.gt[t])
        if model.unet is not None:
            for t, l in unet_loss(model.unet(g.src.images), g.source_gt).items():
                unet_terms.setdefault(t, []).append(l)
    losses = {t: task_loss(torch.cat(preds[t]), torch.cat(gts[t]), t) for t in model.tasks}
    u_losses = {t: torch.stack(v).mean() for t, v in unet_terms.items()}
    return losses, u_losses


def train_step(state: TrainState, groups: Sequence[RayGroup]) -> LossRecord:
    model = state.model
    model.train()
    losses, u_losses = batch_losses(model, groups, state.generator)
    if u_losses:
        total = final_loss(losses, u_losses, state.weights)
    else:
        total = multitask_loss(losses, state.weights, model.tasks)
    if not torch.isfinite(total):
        detail = {t: v.item() for t, v in {**losses, **u_losses}.items()}
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration}: {detail}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    for p in state.schedule.frozen_parameters(model, state.iteration):
        p.grad = None
    state.optimizer.step()
    rec = LossRecord(state.iteration, total.item(), {t: v.item() for t, v in losses.items()},
                     {t: v.item() for t, v in u_losses.items()})
    state.iteration += 1
    return rec


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def build_model(cfg: Config, dtype=torch.float32) -> MTVSModel:
    seed_everything(cfg.seed)
    model = MTVSModel(cfg.model)
    return model.to(dtype)


def train(cfg: Config, scenes: Sequence[Scene], out_dir, model: MTVSModel | None = None,
          progress: bool = False) -> tuple[MTVSModel, list[LossRecord]]:
    """Run the full two-stage schedule; writes ``checkpoint.bin`` and ``losses.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = model or build_model(cfg)
    state = make_state(model, cfg.train, cfg.seed)
    setting2_tasks = cfg.model.setting2_tasks if cfg.model.setting2 else ()
    sampler = RaySampler(scenes, model.tasks, cfg.model.n_classes, cfg.train.n_views,
                         setting2_tasks, seed=cfg.seed)
    records = []
    fields = ["iteration", "stage", "total", *[f"loss_{t}" for t in model.tasks],
              *[f"unet_{t}" for t in setting2_tasks]]
    t0 = time.time()
    with open(out_dir / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for it in range(state.schedule.total):
            groups = sampler.sample(cfg.train.rays_per_batch, cfg.train.frames_per_batch)
            rec = train_step(state, groups)
            records.append(rec)
            writer.writerow([rec.iteration, state.schedule.stage(rec.iteration), f"{rec.total:.6g}",
                             *[f"{rec.tasks[t]:.6g}" for t in model.tasks],
                             *[f"{rec.unet[t]:.6g}" for t in setting2_tasks]])
            if progress and (it % cfg.train.log_every == 0 or it == state.schedule.total - 1):
                log.info("iter %d/%d stage %d loss %.4f (%s) %.0fs", it, state.schedule.total,
                         state.schedule.stage(it), rec.total,
                         " ".join(f"{t}={v:.4f}" for t, v in rec.tasks.items()), time.time() - t0)
    save_checkpoint(out_dir / "checkpoint.bin", model, state.optimizer, state.iteration,
                    config=cfg.to_dict())
    return model, records
