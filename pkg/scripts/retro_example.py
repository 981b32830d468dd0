#!/usr/bin/env python3
"""Longitudinal snapshot comparison on two victims trained a "year" apart.

Both victims label the same test inputs; their top-1 answers are written as
snapshot files and compared with ``mextract retro-diff``'s machinery.

    python3 scripts/retro_example.py --out runs/retro
"""

import argparse
from pathlib import Path

import torch

from mextract.config import VictimConfig
from mextract.data import load_digits
from mextract.harness import load_victim, split_dataset
from mextract.oracle import input_id
from mextract.retro import LongitudinalRecord, diff_report, ingest_snapshot, snapshot_diff, write_snapshot


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/retro")
    args = p.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data = load_digits()
    ref, test = split_dataset(data, 0.8, 0)
    x = data.inputs[test]
    for year, (epochs, seed) in {"2020": (15, 1), "2024": (60, 2)}.items():
        victim = load_victim(VictimConfig(train_epochs=epochs, seed=seed), data.subset(ref))
        probs = victim.predict(x)
        recs = [LongitudinalRecord(input_id(xi), year, int(p.argmax()), float(p.max())) for xi, p in zip(x, probs)]
        write_snapshot(out / f"snapshot_{year}.csv", recs)

    diff = snapshot_diff(ingest_snapshot(out / "snapshot_2020.csv", 10), ingest_snapshot(out / "snapshot_2024.csv", 10))
    print(diff_report(diff))


if __name__ == "__main__":
    main()
