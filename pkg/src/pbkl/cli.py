"""``pbkl`` command line: one subcommand per pipeline stage plus ``run-all``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from .errors import (
    ConfigError, DivergenceAbort, IntegrityError, MissingPBError, NegativeUnavailableError, NumericError,
    ShapeError,
)
from .selection import STRATEGIES

COMMANDS = {
    "gen-data": lambda store, a: ex.gen_data(store),
    "train": lambda store, a: ex.train_conditions(store),
    "score-failures": lambda store, a: ex.score_failures(store),
    "select": lambda store, a: ex.select(store, a.strategy),
    "retrain": lambda store, a: ex.retrain(store, a.strategy),
    "eval": lambda store, a: ex.evaluate_all(store, a.strategy),
    "report": lambda store, a: ex.report(store, a.strategy),
    "run-all": lambda store, a: ex.run_all(store, a.strategy),
}

EXIT_CODES = {ConfigError: 2, IntegrityError: 3, MissingPBError: 3, DivergenceAbort: 4}
KNOWN_ERRORS = (ConfigError, IntegrityError, MissingPBError, NegativeUnavailableError, DivergenceAbort,
                ShapeError, NumericError, OSError)


def _seeds(text):
    try:
        seeds = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser():
    p = argparse.ArgumentParser(prog="pbkl", description="Failure-aware imitation learning experiments.")
    p.add_argument("command", nargs="?", choices=sorted(COMMANDS), help="pipeline stage to run")
    p.add_argument("--config", help="INI experiment config (defaults apply to missing keys)")
    p.add_argument("--out", help="artifact directory (overrides [run] out)")
    p.add_argument("--seeds", type=_seeds, help="comma-separated training seeds, e.g. 0,1,2,3,4")
    p.add_argument("--strategy", choices=STRATEGIES, help="restrict select/retrain/eval/report to one strategy")
    p.add_argument("--subset-size", type=int, help="failures per selected subset")
    p.add_argument("--verify", action="store_true", help="check the experiment index for dangling entries")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_line(command, exc):
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"pbkl: error: command={command or '-'} type={type(exc).__name__} message={msg}"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None and not args.verify:
        print("pbkl: error: command=- type=UsageError message=give a command or --verify", file=sys.stderr)
        return 2
    try:
        cfg = ex.ExperimentConfig.load(args.config)
        if args.out:
            cfg.override("run", "out", args.out)
        if args.seeds:
            cfg.override("run", "seeds", args.seeds)
        if args.subset_size is not None:
            cfg.override("selection", "subset_size", args.subset_size)
        store = ex.ArtifactStore(cfg["run"]["out"], cfg)
        if args.command:
            COMMANDS[args.command](store, args)
            print(f"ok: {args.command} -> {store.root}")
        if args.verify:
            problems = store.verify()
            for line in problems:
                print(line)
            if problems:
                print(f"pbkl: error: command=verify type=IntegrityError message={len(problems)} index problems",
                      file=sys.stderr)
                return 3
            print(f"verify: {len(store.read_index())} artifacts ok")
    except KNOWN_ERRORS as exc:
        print(_error_line(args.command, exc), file=sys.stderr)
        return next((code for t, code in EXIT_CODES.items() if isinstance(exc, t)), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
