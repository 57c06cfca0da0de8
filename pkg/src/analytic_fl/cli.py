"""Command-line entry point: ``afl <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 numerical or rank error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import aggregation as agg
from .data import gen_dummy, read_embeddings, write_embeddings
from .errors import (ConfigError, ContractError, FormatError, NumericalError,
                     RankError)
from .harness import (ExperimentConfig, accuracy, format_table_a1, run_experiment,
                      run_table_a1, with_override, write_report)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _summary(report) -> dict:
    out = report.deterministic_part()
    out.pop("config")
    out["timings"] = report.timings
    return out


def cmd_gen_dummy(args) -> int:
    ds = gen_dummy(args.n, args.d, args.c, args.seed, separation=args.separation)
    write_embeddings(ds, args.out)
    print(f"wrote {ds.n}x{ds.d} embeddings, C={ds.C}, to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    report = run_experiment(cfg)
    print(json.dumps(_summary(report), indent=2))
    return 0


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    field_name, sep, values = args.vary.partition("=")
    if not sep or not values:
        raise ConfigError("--vary expects FIELD=v1,v2,...")
    reports = []
    for raw in values.split(","):
        value = _parse_value(raw)
        run_cfg = with_override(cfg, field_name, value)
        run_cfg.output_path = None
        run_cfg.weights_path = None
        report = run_experiment(run_cfg)
        reports.append({"value": value, **report.to_dict()})
        print(f"{field_name}={raw}: delta_w={report.delta_w:.3e} "
              f"acc_afl={report.accuracy_afl} acc_fedavg={report.accuracy_fedavg}")
    if args.out or cfg.output_path:
        write_report({"vary": field_name, "runs": reports}, args.out or cfg.output_path)
    return 0


def cmd_table_a1(args) -> int:
    table = run_table_a1(args.seeds, N=args.n, d=args.d, C=args.c, gamma=args.gamma,
                         base_seed=args.base_seed)
    print(format_table_a1(table))
    if args.out:
        write_report(table, args.out)
    return 0


def cmd_eval(args) -> int:
    update = agg.read_update(args.weights)
    ds = read_embeddings(args.data)
    print(json.dumps({"n": ds.n, "accuracy": accuracy(update.W_r, ds)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afl", description="Analytic federated learning harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dummy", help="write a Gaussian-cluster AFLE dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--c", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--separation", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_dummy)

    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("table-a1", help="dummy-data deviation table, with and without RI")
    t.add_argument("--seeds", type=int, default=5)
    t.add_argument("--n", type=int, default=10000)
    t.add_argument("--d", type=int, default=512)
    t.add_argument("--c", type=int, default=10)
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--base-seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_table_a1)

    s = sub.add_parser("sweep", help="rerun a config over several values of one field")
    s.add_argument("--config", required=True)
    s.add_argument("--vary", required=True, help="FIELD=v1,v2,... (dotted for nested fields)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="accuracy of AFLU weights on an AFLE dataset")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankError, NumericalError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
