"""Command-line entry point: ``bipprune <command> [--config FILE] [--key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import ConfigError
from .harness import (config_from_dict, cost_report, emit_tradeoff_plot, load_config,
                      run_experiment, winning_ticket_report, apply_overrides)
from .records import summaries_from_csv
from .tensor import NumericError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="bipprune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("train-dense", "train the dense reference models only"),
                        ("prune", "run one pruning method"),
                        ("sweep", "run every method, sparsity and seed in the config")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
        s.add_argument("--threads", type=int, help="worker threads (default: BIP_THREADS or 1)")
        if name == "prune":
            s.add_argument("--method", required=True)
    g = sub.add_parser("gradcheck", help="print the derivative identity table")
    g.add_argument("--seed", type=int, default=0)
    r = sub.add_parser("report", help="winning-ticket and cost tables for a run directory")
    r.add_argument("run_dir", type=Path)
    pl = sub.add_parser("plot", help="write the accuracy/sparsity CSV and gnuplot script")
    pl.add_argument("run_dir", type=Path)
    return p


def _config(args, overrides):
    cfg = load_config(args.config, overrides)
    raw = cfg.to_dict()
    if args.command == "train-dense":
        raw["methods"] = ["dense"]
    elif args.command == "prune":
        raw["methods"] = [args.method]
    if args.out:
        raw["output_dir"] = args.out
    return config_from_dict(raw)


def _summary(run_dir: Path):
    path = run_dir / "summary.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found")
    return summaries_from_csv(path.read_text())


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    try:
        if bad:
            raise ConfigError(f"unrecognized arguments: {' '.join(bad)}")
        if args.command in ("train-dense", "prune", "sweep"):
            cfg = _config(args, extra)
            records = run_experiment(cfg, force=args.force, threads=args.threads)
            for rec in records:
                print(f"{rec.method:<7} p={rec.sparsity:<6g} seed={rec.seed:<3d} "
                      f"acc={rec.test_acc:.4f} sparsity={rec.realized_sparsity:.4f}")
            print(f"wrote {cfg.output_dir}")
            return EXIT_OK
        if extra:
            raise ConfigError(f"{args.command} takes no config overrides")
        if args.command == "gradcheck":
            from .oracles import format_table, run_gradchecks
            results = run_gradchecks(args.seed)
            print(format_table(results))
            return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC
        records = _summary(args.run_dir)
        if args.command == "report":
            dense = [r for r in records if r.method == "dense"]
            if dense:
                print(winning_ticket_report(records, dense).format())
                print()
            print(cost_report(records).format())
            return EXIT_OK
        csv_path, script = emit_tradeoff_plot(records, args.run_dir)
        print(f"wrote {csv_path} and {script}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
