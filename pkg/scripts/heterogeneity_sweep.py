#!/usr/bin/env python
"""AFL vs FedAvg holdout accuracy across Dirichlet alphas and IID at K=100."""
import argparse
from dataclasses import replace

from analytic_fl.baseline import FedAvgConfig
from analytic_fl.harness import DatasetConfig, ExperimentConfig, PartitionConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clients", type=int, default=100)
    p.add_argument("--rounds", type=int, default=50)
    args = p.parse_args()
    base = ExperimentConfig(seed=args.seed, dataset=DatasetConfig("dummy", 6000, 32, 10, 0.3),
                            baseline=FedAvgConfig(rounds=args.rounds))
    settings = [("alpha=0.005", PartitionConfig("dirichlet", args.clients, alpha=0.005)),
                ("alpha=0.01", PartitionConfig("dirichlet", args.clients, alpha=0.01)),
                ("alpha=0.1", PartitionConfig("dirichlet", args.clients, alpha=0.1)),
                ("alpha=1", PartitionConfig("dirichlet", args.clients, alpha=1.0)),
                ("IID", PartitionConfig("iid", args.clients))]
    print(f"{'setting':<12}{'FedAvg':>10}{'AFL':>10}")
    for name, part in settings:
        r = run_experiment(replace(base, partition=part))
        print(f"{name:<12}{100 * r.accuracy_fedavg:>10.2f}{100 * r.accuracy_afl:>10.2f}")


if __name__ == "__main__":
    main()
