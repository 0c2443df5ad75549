"""Command-line entry point: ``erglab <subcommand> --config PATH``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from erglab import __version__
from erglab.certificate import CertificationError
from erglab.config import ConfigError, load_config
from erglab.harness import SUBCOMMANDS, run

THREADS_ENV = "ERGLAB_THREADS"


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="erglab", description="Rate certificates and experiments for Markov chains in random environments.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="TOML experiment config")
    ap.add_argument("--seed", type=_u64, help="override master_seed")
    ap.add_argument("--threads", type=_positive, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    ap.add_argument("--out", help="output directory (default: output_dir from the config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"erglab {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        try:
            threads = int(env) if env else 1
        except ValueError:
            print(f"erglab: error: {THREADS_ENV}={env!r} is not an integer", file=sys.stderr)
            return 2
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        summary = run(cfg, args.subcommand, args.out, threads)
    except ConfigError as exc:
        print(f"erglab: {exc}", file=sys.stderr)
        return 2
    except CertificationError as exc:
        print(f"erglab: certification failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"erglab: {exc}", file=sys.stderr)
        return 2
    for c in summary.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:34s} margin={c.margin:.4g}  {c.detail}")
    print(f"config_sha256={summary.config_sha256} {'all checks passed' if summary.passed else 'some checks FAILED'}")
    return 0 if summary.passed else 1


if __name__ == "__main__":
    sys.exit(main())
