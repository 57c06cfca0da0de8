#!/usr/bin/env python
"""Deviation from the centralized weight on 10000 x 512 dummy data, with and without RI."""
import argparse
import json
import logging

from analytic_fl.harness import format_table_a1, run_table_a1


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    table = run_table_a1(args.seeds)
    print(format_table_a1(table))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(table, f, indent=2)


if __name__ == "__main__":
    main()
