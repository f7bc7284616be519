"""Temporal-gap trend: k-NN JF after training with each delta_max; writes delta_sweep.csv."""

import argparse
import csv
from pathlib import Path

import torch

from lila.studies import gap_study


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--axis", default="1,3,5,10")
    p.add_argument("--out", default="runs/delta")
    args = p.parse_args()
    torch.set_num_threads(1)
    axis = tuple(int(v) for v in args.axis.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "delta_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "delta_max", "jf"])

        def emit(row):
            for d, jf in zip(row.axis, row.jf):
                w.writerow([row.seed, d, repr(jf)])
            fh.flush()
            print(row.seed, dict(zip(row.axis, (round(v, 4) for v in row.jf))),
                  "interior max" if row.interior_max else "no interior max", flush=True)

        rows = gap_study(range(args.seeds), axis, steps=args.steps, on_row=emit)
    print(f"interior maximum in {sum(r.interior_max for r in rows)}/{len(rows)} seeds")


if __name__ == "__main__":
    main()
