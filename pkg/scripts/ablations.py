"""Cue-modality and training-component ablation tables at toy scale."""

import argparse

import torch

from lila.benchmarks import BenchmarkConfig
from lila.harness import ExperimentSpec, ablation_matrix
from lila.studies import toy_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--table", choices=("cues", "components"), default="components")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--benchmarks", default="vos_knn,normals,segmentation")
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    torch.set_num_threads(1)
    spec = ExperimentSpec(name=args.table, train=toy_config(max_steps=args.steps, seed=args.seed),
                          benchmarks=tuple(args.benchmarks.split(",")),
                          bench=BenchmarkConfig(seed=args.seed), out=f"{args.out}/{args.table}")
    bundle = ablation_matrix(spec, table=args.table)
    for run in bundle.runs:
        flat = {f"{b}.{m}": round(v, 4) for b, ms in run.metrics.items() for m, v in ms.items()}
        print(f"{run.label:16s}{' (reference)' if run.reference else '':13s}", flat)


if __name__ == "__main__":
    main()
