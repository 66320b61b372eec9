"""End-to-end runs shared by the scripts and the acceptance suite.

``run_desk`` generates the toy dataset, trains the full model and compares it
with the heuristic baseline. ``run_ablation`` trains the full model and both
ablated variants under one budget over several seeds and ranks them.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .cli import gen_data, load_scenes
from .config import Config, save_config
from .evalsuite import METRICS, evaluate_model, has_nan, heuristic_baseline, write_report
from .model import ModelPredictor
from .training import train

log = logging.getLogger(__name__)

HIGHER_IS_BETTER = {"psnr": True, "miou": True, "l1": False}
VARIANTS = ("full", "no-cta", "no-cva")


def desk_config() -> Config:
    """Scaled-down schedule that fits a single CPU core in about half an hour."""
    cfg = Config()
    cfg.model.n_samples = 24
    cfg.train.rays_per_batch = 96
    cfg.train.n_views = 3
    cfg.train.stage1_iters, cfg.train.stage2_iters = 2000, 400
    cfg.eval.n_views = 3
    return cfg


def ablation_config() -> Config:
    """Short budget used for each (variant, seed) pair of the ablation."""
    cfg = desk_config()
    cfg.model.n_samples = 16
    cfg.train.rays_per_batch = 64
    cfg.train.stage1_iters, cfg.train.stage2_iters = 300, 60
    cfg.eval.write_images = False
    return cfg


def ensure_data(cfg: Config, root) -> dict:
    root = Path(root)
    if not list(root.glob("*/scene_*/poses.json")):
        gen_data(cfg.scenes, root)
    return load_scenes(root / "*" / "scene_*")


def _far_subset(records, method: str, min_gap: float) -> list[float]:
    return [r.metrics["rgb"] for r in records
            if r.method == method and r.split == "train_scenes"
            and r.orbit_gap_deg is not None and r.orbit_gap_deg >= min_gap]


def run_desk(workdir, cfg: Config | None = None, min_gap_deg: float = 20.0) -> dict:
    """Train on the training scenes and score held-out views against the heuristic.

    Returns a summary with the pooled training-scene PSNR and mIoU, the
    model/heuristic RGB PSNR on views whose nearest source is at least
    ``min_gap_deg`` away in orbit angle, a NaN flag and wall-clock times.
    """
    cfg = cfg or desk_config()
    work = Path(workdir)
    splits = ensure_data(cfg, work / "data")
    run = work / "run"
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.yaml")
    t0 = time.time()
    model, records = train(cfg, splits["train_scenes"], run, progress=True)
    train_time = time.time() - t0
    model.eval()
    pred = ModelPredictor(model, chunk=cfg.eval.chunk)
    ordered = {s: splits[s] for s in ("train_scenes", "test_scenes") if s in splits}
    n_views = cfg.eval.n_views or cfg.train.n_views
    image_dir = work / "eval" / "images" if cfg.eval.write_images else None
    m_table, m_rec = evaluate_model(pred, ordered, n_views, cfg.model.tasks, "model", cfg.model.n_classes,
                                    image_dir)
    h_table, h_rec = evaluate_model(heuristic_baseline, ordered, n_views, cfg.model.tasks, "heuristic",
                                    cfg.model.n_classes, image_dir)
    far_model = _far_subset(m_rec, "model", min_gap_deg)
    far_heur = _far_subset(h_rec, "heuristic", min_gap_deg)
    summary = {
        "train_psnr": m_table["train_scenes"]["all"]["rgb"]["psnr"],
        "train_miou": m_table["train_scenes"]["all"]["sl"]["miou"],
        "far_views": len(far_model),
        "far_psnr_model": float(np.mean(far_model)) if far_model else math.nan,
        "far_psnr_heuristic": float(np.mean(far_heur)) if far_heur else math.nan,
        "nan": has_nan(m_table) or any(not math.isfinite(r.total) for r in records),
        "train_seconds": train_time,
        "total_seconds": time.time() - t0,
    }
    methods = {"model": m_table, "heuristic": h_table}
    write_report(work / "eval", methods, m_rec + h_rec, cfg.model.tasks, extra={"desk": summary})
    log.info("desk summary %s", summary)
    return summary


def rank_variants(scores: dict[str, list[dict]], tasks: Sequence[str]) -> dict[str, float]:
    """Mean rank of each variant over seeds and task metrics (1 = best, ties share ranks).

    ``scores[variant][seed_index][task]`` is the pooled metric of that run.
    """
    names = list(scores)
    n_seeds = len(next(iter(scores.values())))
    ranks = {n: [] for n in names}
    for s in range(n_seeds):
        for t in tasks:
            vals = np.array([scores[n][s][t] for n in names])
            key = -vals if HIGHER_IS_BETTER[METRICS[t]] else vals
            for n, r in zip(names, rankdata(key, method="average")):
                ranks[n].append(float(r))
    return {n: float(np.mean(r)) for n, r in ranks.items()}


def format_ablation(scores: dict[str, list[dict]], ranks: dict[str, float], tasks: Sequence[str]) -> str:
    head = "| variant | " + " | ".join(f"{t.upper()} {METRICS[t]}" for t in tasks) + " | mean rank |"
    lines = [head, "|---|" + "---|" * (len(tasks) + 1)]
    for n, runs in scores.items():
        cells = [f"{np.mean([r[t] for r in runs]):.4f}" for t in tasks]
        lines.append(f"| {n} | " + " | ".join(cells) + f" | {ranks[n]:.2f} |")
    return "\n".join(lines) + "\n"


def run_ablation(workdir, cfg: Config | None = None, seeds: Sequence[int] = (0, 1, 2),
                 variants: Sequence[str] = VARIANTS) -> dict:
    """Train every variant with every seed under the same budget and rank them on
    the held-out views of the training scenes."""
    cfg = cfg or ablation_config()
    work = Path(workdir)
    splits = ensure_data(cfg, work / "data")
    tasks = cfg.model.tasks
    n_views = cfg.eval.n_views or cfg.train.n_views
    scores: dict[str, list[dict]] = {v: [] for v in variants}
    for v in variants:
        for seed in seeds:
            c = copy.deepcopy(cfg)
            c.model.ablate = None if v == "full" else v
            c.seed = seed
            run = work / "runs" / f"{v}_seed{seed}"
            model, _ = train(c, splits["train_scenes"], run)
            model.eval()
            table, _ = evaluate_model(ModelPredictor(model, chunk=c.eval.chunk),
                                      {"train_scenes": splits["train_scenes"]}, n_views, tasks, v,
                                      c.model.n_classes)
            row = table["train_scenes"]["all"]
            scores[v].append({t: row[t][METRICS[t]] for t in tasks})
            log.info("ablation %s seed %d: %s", v, seed, scores[v][-1])
    ranks = rank_variants(scores, tasks)
    (work / "ablation.md").write_text(format_ablation(scores, ranks, tasks))
    (work / "ablation.json").write_text(json.dumps({"scores": scores, "mean_rank": ranks}, indent=1))
    return {"scores": scores, "mean_rank": ranks}
