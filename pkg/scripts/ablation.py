"""Train the full model and the no-cta / no-cva variants over three seeds and rank them.

Usage: python3 scripts/ablation.py [--workdir ablation] [--config configs/ablation.yaml]
"""

import argparse
import logging

import torch

from muvie.config import load_config
from muvie.experiments import ablation_config, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default="ablation")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(args.threads)
    cfg = load_config(args.config) if args.config else ablation_config()
    run_ablation(args.workdir, cfg, [int(s) for s in args.seeds.split(",")])
    print(open(f"{args.workdir}/ablation.md").read())


if __name__ == "__main__":
    main()
