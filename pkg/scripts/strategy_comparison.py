#!/usr/bin/env python3
"""Query strategies side by side at one budget: random, k-center, PGD, CW and mixed batches.

    python3 scripts/strategy_comparison.py configs/desk_basic.yaml --batches 8 --adv-fidelity
"""

import argparse
from pathlib import Path

import torch

from mextract.config import load_config
from mextract.data import load_dataset
from mextract.harness import emit_report, load_victim, run_experiment, split_dataset

STRATEGIES = {
    "basic": {"name": "basic"},
    "active_kcenter": {"name": "active_kcenter"},
    "adversarial_pgd": {"name": "adversarial_pgd", "ratio": [1, 1]},
    "adversarial_cw": {"name": "adversarial_cw", "ratio": [1, 1]},
    "mixed_1_3": {"name": "mixed", "ratio": [1, 3]},
}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--round-epochs", type=int, default=20, help="warm-start epochs between rounds")
    p.add_argument("--adv-fidelity", action="store_true")
    p.add_argument("--out", default="runs/strategy_comparison.json")
    args = p.parse_args()
    torch.set_num_threads(1)

    base = load_config(args.config)
    data = load_dataset(base.victim.dataset)
    ref, _ = split_dataset(data, base.split_fraction, base.split_seed)
    victim = load_victim(base.victim, data.subset(ref))

    results = []
    for name, strategy in STRATEGIES.items():
        cfg = base.replace(
            name=name,
            strategy=strategy,
            budget={"batches": args.batches},
            trainer={"round_epochs": args.round_epochs},
            evaluation={"adversarial_fidelity": args.adv_fidelity},
            output_dir=None,
            cache_path=None,
        )
        res = run_experiment(cfg, victim=victim)
        line = f"{cfg.strategy_label:>24}  fidelity {res.mean():.4f}"
        if args.adv_fidelity:
            line += f"  adv-fidelity {res.mean('adversarial_fidelity'):.4f}"
        print(line, flush=True)
        results.append(res)
    print(emit_report(results, "table"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(emit_report(results, "json"))


if __name__ == "__main__":
    main()
