"""``vanishlab <config> [--output DIR] [--jobs K] [--allow-underresolved]``.

Exit status: 0 on success, 2 on a validation error, 3 on a numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load
from .evolve import NumericalAbort
from .runner import execute, write_outputs
from .vanishing import UnderResolved
from .velocity import NoExactFlow, StepBudgetExceeded

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3

log = logging.getLogger("vanishlab")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vanishlab", description="Vanishing-diffusivity selection lab.")
    p.add_argument("config", help="typed key=value configuration file")
    p.add_argument("--output", help="output directory (overrides run.output)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps (default 1)")
    p.add_argument("--allow-underresolved", action="store_true",
                   help="run parameters below the resolution guard, flagging them in the outputs")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        cfg = load(args.config)
        if args.allow_underresolved:
            if "sweep" not in cfg.sections or "allow_underresolved" not in cfg["sweep"]:
                raise ConfigError("--allow-underresolved", f"not applicable to kind {cfg.kind!r}")
            cfg = cfg.replace("sweep", "allow_underresolved", True)
        out_dir = Path(args.output) if args.output else Path(cfg["run"]["output"])
        log.info("running %s (N=%d) into %s", cfg.kind, cfg["grid"]["n"], out_dir)
        outcome = execute(cfg, jobs=args.jobs, base_dir=Path(args.config).resolve().parent)
    except (ConfigError, UnderResolved) as exc:
        print(f"vanishlab: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalAbort as exc:
        print(f"vanishlab: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (StepBudgetExceeded, NoExactFlow) as exc:
        print(f"vanishlab: numerical abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    manifest = write_outputs(outcome, out_dir)
    log.info("wrote %d files and %s in %.1f s", len(outcome.files), manifest, outcome.seconds)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
