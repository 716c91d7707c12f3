"""Command-line surface: ``gpe run | sweep | check | export``.

Output root resolution for ``run`` and ``sweep``: ``--out`` flag, else the
``out`` key of the ``[run]`` config section, else the ``GPE_OUT`` environment
variable, else ``./runs``. Each run writes into its own subdirectory unless
``--out`` names the directory explicitly.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, parse_config, set_axis
from .errors import GpeError
from . import checks as ck
from . import runner as rn


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if args.seed is not None:
        cfg.stream.seed = args.seed
    if getattr(args, "variant", None):
        cfg.run.variant = args.variant
    if getattr(args, "buffer", None) is not None:
        cfg.replay.capacity = args.buffer
        if cfg.replay.scheme == "none" and args.buffer > 0:
            cfg.replay.scheme = "der"
    return cfg


def _out_root(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.run.out:
        return Path(cfg.run.out)
    return Path(os.environ.get("GPE_OUT", "runs"))


def _run(args) -> int:
    cfg = _load(args)
    record = rn.run_experiment(cfg)
    out = _out_root(args, cfg)
    if not args.out:
        out = out / f"{record.config_hash}-s{record.seed}-{cfg.run.variant}"
    rn.export_results(record, out)
    print(
        f"{cfg.run.variant} run (seed {record.seed}): "
        f"final metric {record.summary['final_metric']:.4f}, "
        f"mean across stages {record.summary['mean_metric_across_stages']:.4f}"
    )
    print(f"results in {out}")
    return 0


def _sweep(args) -> int:
    cfg = _load(args)
    values = [v for v in args.values.split(",") if v]
    records = rn.run_sweep(cfg, args.axis, values)
    out = _out_root(args, cfg)
    for value, record in zip(values, records):
        rn.export_results(record, out / f"{args.axis}-{value}")
    table = rn.sweep_table(args.axis, values, records)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"results in {out}")
    return 0


def _check(args) -> int:
    results = ck.run_checks(args.config, args.only)
    failed = 0
    for r in results:
        verdict = "PASS" if r.passed else "FAIL"
        failed += 0 if r.passed else 1
        print(f"{verdict} ({r.letter}) {r.name}: {r.detail}")
    if failed:
        print(f"{failed} gate(s) failed")
    return 1 if failed else 0


def _export(args) -> int:
    record = rn.load_record(args.record)
    paths = rn.export_results(record, args.out)
    print("\n".join(str(p) for p in paths))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gpe",
        description="Prototype-drift-constrained incremental learning harness",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train one experiment and export results")
    sweep = sub.add_parser("sweep", help="grid over one numeric config field")
    check = sub.add_parser("check", help="run the property/invariant gates")
    export = sub.add_parser("export", help="rewrite result files from a record.json")

    for p in (run, sweep):
        p.add_argument("--config", help="config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the stream seed")
        p.add_argument("--out", help="output directory")
    run.add_argument("--variant", choices=("gpe", "lb", "ub"), help="training variant")
    run.add_argument("--buffer", type=int, help="replay capacity (activates der when scheme is none)")
    sweep.add_argument("--axis", required=True, help="numeric config key (e.g. gamma, k)")
    sweep.add_argument("--values", required=True, help="comma-separated values")

    check.add_argument("--config", help="config for whole-run gates (default configs/rmnist_md.cfg)")
    check.add_argument("--only", help="gate letters to run, e.g. 'a,c,i'")

    export.add_argument("--record", required=True, help="path to a record.json")
    export.add_argument("--out", required=True, help="output directory")

    args = parser.parse_args(argv)
    handler = {"run": _run, "sweep": _sweep, "check": _check, "export": _export}[args.verb]
    try:
        return handler(args)
    except GpeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
