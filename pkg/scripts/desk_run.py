"""Generate the toy dataset, train the full model and compare it with the heuristic.

Usage: python3 scripts/desk_run.py [--workdir desk] [--config configs/desk.yaml]
"""

import argparse
import json
import logging

import torch

from muvie.config import load_config
from muvie.experiments import desk_config, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default="desk")
    p.add_argument("--config", help="YAML config; defaults to the built-in desk settings")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(args.threads)
    cfg = load_config(args.config) if args.config else desk_config()
    print(json.dumps(run_desk(args.workdir, cfg), indent=1))


if __name__ == "__main__":
    main()
