"""Command line entry point: ``fedseg run|sweep|compare|selftest|report``.

Exit codes: 0 success, 1 validation error (bad config, bad flags), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from ..federation import FederationError
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedseg", description="Federated liver segmentation simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="experiment JSON")
        sp.add_argument("--seed", type=int, help="override the config's master seed")
        sp.add_argument("--out", help="output directory (default: the config's output_dir)")
        return sp

    with_config("run", "train one federation with the configured strategy")
    with_config("sweep", "FedNorm M x beta and FedNorm+ beta grids, emits the model-selection table")
    with_config("compare", "baselines, all strategies and the comparison report")
    sub.add_parser("selftest", help="fast invariant and oracle checks")
    rp = sub.add_parser("report", help="re-render a comparison directory as a text table")
    rp.add_argument("dir")
    return p


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dispatch(args) -> int:
    if args.command == "selftest":
        from .selftest import run_selftest
        return EXIT_OK if run_selftest() else EXIT_RUNTIME
    if args.command == "report":
        from .report import load_report
        if not (Path(args.dir) / "dice_per_patient.csv").exists():
            raise ConfigError(f"{args.dir}: no dice_per_patient.csv")
        print(load_report(args.dir).render(), end="")
        return EXIT_OK

    from . import experiment
    cfg = _load(args)
    experiment.worker_count()  # validates FSEG_THREADS before any work
    out = args.out or cfg.output_dir
    if args.command == "run":
        run = experiment.run_experiment(cfg, out)
        w = run.winner()
        print(f"{cfg.strategy}: last-round global validation {w['last_score']:.4f}, "
              f"best {w['score']:.4f} at round {w['round']}; outputs in {out}")
    elif args.command == "sweep":
        sweep = experiment.run_sweep(cfg, out)
        print(sweep.render(), end="")
    else:
        comp = experiment.run_comparison(cfg, out)
        print(comp.report.render(), end="")
        print(f"wrote {Path(out) / 'report.json'} and {Path(out) / 'dice_per_patient.csv'} "
              f"in {comp.timings['total']:.0f}s")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, FederationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # the CLI turns every other failure into exit code 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
