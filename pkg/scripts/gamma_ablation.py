#!/usr/bin/env python
"""Holdout accuracy with and without RI over gamma and client count."""
import argparse
from dataclasses import replace

from analytic_fl.errors import RankError
from analytic_fl.harness import DatasetConfig, ExperimentConfig, PartitionConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    base = ExperimentConfig(seed=args.seed, dataset=DatasetConfig("dummy", 10000, 32, 10, 0.3))
    gammas = (0.0, 0.1, 1.0, 10.0, 100.0)
    print("acc w/o | w/ RI  " + "".join(f"{'g=' + str(g):>18}" for g in gammas))
    for K in (100, 500, 1000):
        cells = []
        for g in gammas:
            cfg = replace(base, gamma=g, partition=PartitionConfig("dirichlet", K, alpha=0.1))
            try:
                off = f"{100 * run_experiment(replace(cfg, ri=False)).accuracy_afl:.2f}"
            except RankError:
                off = "rank"
            on = "N/A" if g == 0 else f"{100 * run_experiment(cfg).accuracy_afl:.2f}"
            cells.append(f"{off} | {on}")
        print(f"K={K:<15}" + "".join(f"{c:>18}" for c in cells))


if __name__ == "__main__":
    main()
