"""Command-line entry points: gen, train, eval, report.

Exit codes: 0 success, 1 runtime fault, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import evalscheme as ev
from .config import RunConfig, load_config
from .errors import ConfigError, ContractViolation, DatasetParseError
from .pipeline import RunSpec, train
from .policy import load_checkpoint
from .taskgen import Split, TaskSpec, default_vocabulary, generate_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
OUT_ENV = "MAYE_OUT"
DEFAULT_OUT = "runs"

log = logging.getLogger("tokenrl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def output_root(flag: Optional[str]) -> Path:
    """``-o`` wins over the environment variable, which wins over the default."""
    if flag:
        return Path(flag)
    env = os.environ.get(OUT_ENV)
    return Path(env) if env else Path(DEFAULT_OUT)


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds contains duplicates: {text!r}")
    return seeds


def _range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tokenrl", description="Token-level clipped policy-gradient training on a synthetic task.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--train", type=int, required=True)
    g.add_argument("--val", type=int, default=100)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--text-fraction", type=float, default=1.0, help="fraction of text-dominant queries")
    g.add_argument("--answer-range", type=_range, default=(0, 99), metavar="LO,HI")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", help="train one run per seed")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("-d", "--data", required=True)
    t.add_argument("--seeds", default="1,2,3")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("-o", "--output", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("-d", "--data", required=True)
    e.add_argument("--split", choices=[s.value for s in (Split.VAL, Split.TEST)], default="test")
    e.add_argument("--configs", default=",".join(ev.EVAL_CONFIGS))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-tokens", type=int, default=32)

    r = sub.add_parser("report", help="aggregate seed runs and draw learning curves")
    r.add_argument("runs", nargs="+", help="seed run directories")
    r.add_argument("-o", "--output", default=None)
    r.add_argument("--no-plots", action="store_true")
    return p


def cmd_gen(args) -> int:
    spec = TaskSpec(args.train, args.val, args.test, dominance_mix=args.text_fraction,
                    answer_range=args.answer_range, seed=args.seed)
    flag_of = {"n_train": "--train", "n_val": "--val", "n_test": "--test", "dominance_mix": "--text-fraction",
               "answer_range": "--answer-range"}
    try:
        spec.validate()
    except ConfigError as exc:
        msg = str(exc)
        for field_name, flag in flag_of.items():
            msg = msg.replace(field_name, flag)
        raise ConfigError(msg) from None
    write_dataset(generate_dataset(spec), args.output)
    print(args.output)
    return EXIT_OK


def _train_one(job: tuple[RunConfig, str, str, int]) -> str:
    rc, data, out_root, seed = job
    ds = read_dataset(data)
    run_dir = Path(out_root) / f"seed_{seed}"
    train(RunSpec(dataset=ds, config=rc.with_seed(seed), out_dir=run_dir, dataset_path=str(data)))
    return str(run_dir)


def cmd_train(args) -> int:
    rc = load_config(args.config)
    rc.train.validate()
    seeds = parse_seeds(args.seeds)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if not Path(args.data).exists():
        raise ConfigError(f"dataset {args.data} does not exist")
    read_dataset(args.data)  # fail fast on a malformed file
    out_root = output_root(args.output)
    jobs = [(rc, args.data, str(out_root), s) for s in seeds]
    if args.jobs == 1 or len(seeds) == 1:
        dirs = [_train_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(_train_one, jobs))
    for d in dirs:
        print(d)
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    queries = ds.split(args.split)
    configs = [c for c in args.configs.split(",") if c]
    vocab = default_vocabulary()
    out = {}
    for cid in configs:
        out[cid] = ev.evaluate_split(params, queries, cid, vocab, seed=args.seed, max_tokens=args.max_tokens)
    print(json.dumps({"split": args.split, "accuracy": out}))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report

    out = output_root(args.output)
    path = build_report(args.runs, out, plots=not args.no_plots)
    print(path)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if args.command == "report" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
