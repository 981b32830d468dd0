#!/usr/bin/env python3
"""Fidelity against query budget for the basic attack, optionally with MixMatch.

    python3 scripts/budget_sweep.py configs/desk_basic.yaml --budgets 4 8 16 32 64 --mixmatch
"""

import argparse
import json
from pathlib import Path

import torch

from mextract.config import load_config
from mextract.data import load_dataset
from mextract.harness import emit_report, load_victim, run_experiment, split_dataset


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--budgets", type=int, nargs="+", default=[4, 8, 16, 32, 64])
    p.add_argument("--mixmatch", action="store_true", help="also run the MixMatch trainer")
    p.add_argument("--out", default="runs/budget_sweep.json")
    args = p.parse_args()
    torch.set_num_threads(1)

    base = load_config(args.config)
    data = load_dataset(base.victim.dataset)
    ref, _ = split_dataset(data, base.split_fraction, base.split_seed)
    victim = load_victim(base.victim, data.subset(ref))

    variants = [{}] + ([{"trainer": {"mixmatch": True}}] if args.mixmatch else [])
    results = []
    for extra in variants:
        for b in args.budgets:
            cfg = base.replace(name=f"{base.name}-b{b}", budget={"batches": b}, output_dir=None, cache_path=None, **extra)
            res = run_experiment(cfg, victim=victim)
            print(f"{cfg.strategy_label:>16}  {b:>3} batches  fidelity {res.mean():.4f}", flush=True)
            results.append(res)
    print(emit_report(results, "table"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(emit_report(results, "json"))


if __name__ == "__main__":
    main()
