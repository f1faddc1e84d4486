"""Command line entry point: ``deepfosls <command> --config run.toml [--seed S] [--full] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
``DEEPFOSLS_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import experiments as ex
from .config import RunConfig, load_config
from .errors import ConfigurationError, InvalidArgumentError, TrainingAborted

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
THREADS_ENV = "DEEPFOSLS_THREADS"

log = logging.getLogger("deepfosls")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _kappa_list(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepfosls", description="Robust least-squares training of ReQU trial spaces")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=True, help="TOML run configuration")
        p.add_argument("--seed", type=_u64, default=None, help="base seed (overrides the config)")
        p.add_argument("--full", action="store_true", help="apply the [full] iteration overrides")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
        return p

    add("run", "train once and write history, report, checkpoints and samples")
    p = add("sweep-kappa", "one run per coefficient contrast plus combined ratio and Poincare tables")
    p.add_argument("--kappa0", type=_kappa_list, default=None, help="comma-separated contrasts")
    add("variance-study", "least-squares and Ritz runs over quadrature sizes")
    add("gibbs-study", "gradient-error total variation for several network families")
    p = add("run2d", "two-dimensional run with grid field dumps")
    p.add_argument("--problem", choices=["circle2d", "plane2d"], default=None)
    add("poincare-check", "discrete Poincare estimate against the one-dimensional reference root")
    return parser


def _threads() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _dispatch(args, cfg: RunConfig, out: Path) -> dict:
    seed = args.seed
    if args.command == "run":
        _, report = ex.execute_run(cfg, out, seed)
        return {"status": report["status"], "final": report["final"], "poincare": report["poincare"]}
    if args.command == "sweep-kappa":
        return ex.sweep_kappa(cfg, out, seed, args.kappa0)
    if args.command == "variance-study":
        return ex.variance_study(cfg, out, seed)
    if args.command == "gibbs-study":
        return ex.gibbs_study(cfg, out, seed)
    if args.command == "run2d":
        if args.problem:
            cfg = cfg.model_copy(update={"problem": cfg.problem.model_copy(update={"id": args.problem})})
        if cfg.problem.id not in ("circle2d", "plane2d"):
            raise ConfigurationError(f"run2d needs circle2d or plane2d, config has {cfg.problem.id!r}")
        _, report = ex.execute_run(cfg, out, seed)
        return {"status": report["status"], "final": report["final"]}
    return ex.poincare_check(cfg, out, seed)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.full:
            cfg = cfg.with_full()
        out = args.out or Path(cfg.outputs.directory)
        with threadpool_limits(limits=_threads()):
            summary = _dispatch(args, cfg, out)
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted at iteration {exc.iteration} (quadrature seed {exc.seed}): {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(json.dumps(ex._jsonable(summary), indent=2, sort_keys=True))
    log.info("outputs written to %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
