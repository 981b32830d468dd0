#!/usr/bin/env python3
"""Final fidelity under each response policy the oracle can apply.

    python3 scripts/policy_comparison.py configs/desk_basic.yaml --batches 90
"""

import argparse
from pathlib import Path

import torch

from mextract.config import load_config
from mextract.data import load_dataset
from mextract.harness import emit_report, load_victim, run_experiment, split_dataset

POLICIES = {
    "full": {"kind": "full"},
    "quantized-0.1": {"kind": "quantized", "width": 0.1},
    "quantized-0.2": {"kind": "quantized", "width": 0.2},
    "descriptor": {"kind": "descriptor"},
    "top1": {"kind": "top1"},
    "label_only": {"kind": "label_only"},
}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--batches", type=int, default=None)
    p.add_argument("--policies", nargs="+", default=list(POLICIES), choices=list(POLICIES))
    p.add_argument("--out", default="runs/policy_comparison.json")
    args = p.parse_args()
    torch.set_num_threads(1)

    base = load_config(args.config)
    if args.batches is not None:
        base = base.replace(budget={"batches": args.batches})
    data = load_dataset(base.victim.dataset)
    ref, _ = split_dataset(data, base.split_fraction, base.split_seed)
    victim = load_victim(base.victim, data.subset(ref))

    results = []
    for name in args.policies:
        cfg = base.replace(name=name, policy=POLICIES[name], output_dir=None, cache_path=None)
        res = run_experiment(cfg, victim=victim)
        agg = res.aggregate()["fidelity"]
        print(f"{name:>14}  fidelity {100 * agg['mean']:.2f} ± {100 * agg['std']:.2f}", flush=True)
        results.append(res)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(emit_report(results, "json"))


if __name__ == "__main__":
    main()
