"""Command line entry points: ``gen-data``, ``train``, ``render`` and ``eval``.

All relative paths resolve against ``--workdir``. Datasets live under
``<workdir>/data/{train,test}/scene_XXX``; the parent directory name decides
whether a scene counts as a training or an unseen test scene.
"""

from __future__ import annotations

import argparse
import glob
import logging
import sys
import warnings
from pathlib import Path

import torch

from . import toyscenes
from .checkpoint import CheckpointError, load_checkpoint, read_container
from .config import TASKS, Config, ConfigError, ScenesConfig, config_from_dict, load_config, save_config
from .dataset import DatasetError, Scene, load_dataset
from .evalsuite import (SPLITS, EvalError, evaluate_model, has_nan, heuristic_baseline, write_report,
                        _write_images)
from .geometry import CameraIntrinsics
from .model import MTVSModel, ModelPredictor, nearest_views
from .training import NonFiniteLossError, train

log = logging.getLogger("muvie")

SPLIT_DIRS = {"train": "train_scenes", "test": "test_scenes"}


def gen_data(cfg: ScenesConfig, root) -> list[Path]:
    """Write ``n_train`` + ``n_test`` procedurally generated scenes below ``root``."""
    root = Path(root)
    intr = CameraIntrinsics.from_fov(cfg.width, cfg.height, cfg.fov_deg)
    orbit = toyscenes.Orbit(cfg.orbit_radius, cfg.elevation_deg)
    paths = []
    for i in range(cfg.n_train + cfg.n_test):
        split = "train" if i < cfg.n_train else "test"
        spec = toyscenes.random_scene(cfg.seed * 10_000 + i, cfg.n_classes,
                                      (cfg.min_spheres, cfg.max_spheres), with_plane=cfg.with_plane)
        paths.append(toyscenes.generate_dataset(spec, cfg.n_frames, orbit, root / split / f"scene_{i:03d}",
                                                intrinsics=intr, n_views=1,
                                                scene_radius=cfg.scene_radius))
    return paths


def load_scenes(pattern) -> dict[str, list[Scene]]:
    """Load every scene directory matching ``pattern``, grouped into evaluation splits."""
    dirs = sorted(Path(p) for p in glob.glob(str(pattern)) if (Path(p) / "poses.json").exists())
    if not dirs:
        raise DatasetError(f"no datasets match {pattern}")
    out: dict[str, list[Scene]] = {}
    for d in dirs:
        split = SPLIT_DIRS.get(d.parent.name, "train_scenes")
        out.setdefault(split, []).append(load_dataset(d))
    return out


def load_model(path) -> tuple[MTVSModel, Config, dict]:
    _, header = read_container(path)
    cfg = config_from_dict(header.get("config", {}))
    model = MTVSModel(cfg.model)
    load_checkpoint(path, model)
    model.eval()
    return model, cfg, header


def _parse_iters(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("--iters expects two integers, e.g. 500,100") from None
    return a, b


def _resolve(workdir: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _config(args, require_scenes=False) -> Config:
    if args.config is None:
        return config_from_dict({})
    return load_config(_resolve(args.workdir, args.config), require_scenes=require_scenes)


def cmd_gen_data(args) -> int:
    cfg = _config(args, require_scenes=True)
    paths = gen_data(cfg.scenes, _resolve(args.workdir, args.out))
    print(f"wrote {len(paths)} scenes under {_resolve(args.workdir, args.out)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.setting2:
        cfg.model.setting2 = True
    if args.ablate:
        cfg.model.ablate = args.ablate
    if args.iters:
        cfg.train.stage1_iters, cfg.train.stage2_iters = args.iters
    if args.views:
        cfg.train.n_views = args.views
    scenes = load_scenes(_resolve(args.workdir, args.data)).get("train_scenes", [])
    if not scenes:
        raise DatasetError(f"no training scenes under {args.data}")
    out = _resolve(args.workdir, args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    if args.threads:
        torch.set_num_threads(args.threads)
    train(cfg, scenes, out, progress=True)
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def cmd_render(args) -> int:
    model, cfg, _ = load_model(_resolve(args.workdir, args.checkpoint))
    scene = load_dataset(_resolve(args.workdir, args.scene))
    if not 0 <= args.frame < len(scene):
        raise DatasetError(f"frame {args.frame} outside scene ({len(scene)} frames)")
    if args.frame not in scene.held_out:
        warnings.warn(f"frame {args.frame} is not a held-out frame; its own annotations are excluded "
                      "from the sources", stacklevel=1)
    n_views = args.views or cfg.eval.n_views or 5
    cands = [i for i in range(len(scene)) if i not in scene.held_out and i != args.frame]
    target = scene.bundles[args.frame]
    order = nearest_views([scene.bundles[i].view for i in cands], target.view, n_views)
    sources = [scene.bundles[cands[i]] for i in order]
    maps = ModelPredictor(model, scene.near, scene.far, cfg.eval.chunk, setting2=args.setting2)(
        sources, target.view)
    out = _resolve(args.workdir, args.out)
    tasks = [t for t in model.tasks if t in maps]
    _write_images(out, args.frame, maps, tasks)
    print(f"rendered {', '.join(tasks)} for frame {args.frame} into {out}")
    return 0


def cmd_eval(args) -> int:
    splits = load_scenes(_resolve(args.workdir, args.data))
    out = _resolve(args.workdir, args.out)
    methods, records = {}, []
    n_views = args.views
    cfg = None
    if not args.baseline_only:
        if args.checkpoint is None:
            raise EvalError("--checkpoint is required unless --baseline-only is given")
        model, cfg, _ = load_model(_resolve(args.workdir, args.checkpoint))
        n_views = n_views or cfg.eval.n_views or cfg.train.n_views
    n_views = n_views or 5
    n_classes = cfg.model.n_classes if cfg else None
    image_dir = out / "images" if (cfg is None or cfg.eval.write_images) else None
    tasks = cfg.model.tasks if cfg else TASKS
    ordered = {s: splits[s] for s in SPLITS if s in splits}
    if not args.baseline_only:
        pred = ModelPredictor(model, chunk=cfg.eval.chunk, setting2=args.setting2)
        methods["model"], records = evaluate_model(pred, ordered, n_views, tasks, "model", n_classes, image_dir)
    t, r = evaluate_model(heuristic_baseline, ordered, n_views, tasks, "heuristic", n_classes, image_dir)
    methods["heuristic"] = t
    records += r
    write_report(out, methods, records, tasks, extra={"n_views": n_views})
    print((out / "report.md").read_text())
    if has_nan(methods):
        print("error: report contains NaN metrics", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="muvie", description="Multi-task view synthesis on toy scenes.")
    p.add_argument("--workdir", type=Path, default=Path("."), help="base for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate toy scene datasets")
    g.add_argument("--config")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on the training scenes")
    t.add_argument("--config")
    t.add_argument("--data", default="data/*/scene_*")
    t.add_argument("--out", default="run")
    t.add_argument("--setting2", action="store_true", help="train the U-Net branch as well")
    t.add_argument("--ablate", choices=("no-cta", "no-cva"))
    t.add_argument("--iters", type=_parse_iters, help="stage1,stage2 iteration counts")
    t.add_argument("--views", type=int, help="source views per target")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render all task maps for one frame")
    r.add_argument("--checkpoint", default="run/checkpoint.bin")
    r.add_argument("--scene", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--views", type=int)
    r.add_argument("--setting2", action="store_true", help="blend U-Net predictions instead of annotations")
    r.add_argument("--out", default="render")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate held-out views and write report files")
    e.add_argument("--checkpoint", default="run/checkpoint.bin")
    e.add_argument("--data", default="data/*/scene_*")
    e.add_argument("--views", type=int)
    e.add_argument("--baseline-only", action="store_true")
    e.add_argument("--setting2", action="store_true")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, ConfigError, DatasetError, EvalError, NonFiniteLossError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
