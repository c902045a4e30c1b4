"""
Fork-Join Lab - Command-Line Entry Point

This module contains the argument parser and entry point of the `forkjoin`
command.

Features:
- `forkjoin run <scenario>` with config file, seed, replication, output
  directory, worker and acceptance-check overrides
- `forkjoin verify-assoc` for one exact association check
- `forkjoin plotdata <manifest>` for long-format plot data
- Exit codes: 0 success, 1 missing or unwritable files, 2 configuration
  errors, 3 failed acceptance checks under --check
"""

import argparse
import logging
import sys
from typing import List, Optional, Tuple

from . import __version__
from .association import arrival_pattern_dist, beta_threshold, check_association, covariance_check
from .config import SCENARIO_NAMES, ConfigError, Scenario, default_config, parse_beta_token, parse_config, parse_fraction
from .harness import MissingOutputsError, emit_plotdata, resolve_workers, run_scenario
from .model import SystemConfig

logger = logging.getLogger(__name__)

APP_NAME = "forkjoin"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_MISSING = 1
EXIT_CONFIG = 2
EXIT_CHECK = 3


def build_parser() -> argparse.ArgumentParser:
    """
    Create the argument parser

    Returns:
        Configured ArgumentParser with run, verify-assoc and plotdata commands
    """
    parser = argparse.ArgumentParser(
        prog=APP_NAME,
        description="Simulate and verify the limited fork-join queueing model.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    noise = parser.add_mutually_exclusive_group()
    noise.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    noise.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one scenario")
    run.add_argument("scenario", choices=SCENARIO_NAMES)
    run.add_argument("--config", help="INI configuration file")
    run.add_argument("--seed", type=int, help="64-bit master seed")
    run.add_argument("--reps", type=int, help="replications per configuration")
    run.add_argument("--out", help="output directory")
    run.add_argument("--threads", type=int, help="worker processes (default: $FORKJOIN_THREADS or CPU count)")
    run.add_argument("--check", action="store_true", default=None, help="exit with status 3 if any verdict fails")

    assoc = commands.add_parser("verify-assoc", help="exact association check for one (n, k, beta)")
    assoc.add_argument("--n", type=int, required=True)
    assoc.add_argument("--k", type=int, required=True)
    assoc.add_argument("--beta", default="threshold", help="multiple of Lambda, or 'threshold' (default)")
    assoc.add_argument("--lambda", dest="lambda_", default="2/3", help="per-queue arrival rate (default 2/3)")
    assoc.add_argument("--long-running", action="store_true", help="allow k = 5")
    assoc.add_argument("--threads", type=int)
    assoc.add_argument("--check", action="store_true", help="exit with status 3 if not associated")

    plot = commands.add_parser("plotdata", help="long-format plot data from a manifest")
    plot.add_argument("manifest", help="manifest.json written by `run`")
    plot.add_argument("--out", help="output CSV (default: plotdata.csv next to the manifest)")
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Configure the root logger once, writing to stderr."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def resolve_run(args: argparse.Namespace) -> Tuple[SystemConfig, Scenario]:
    """
    Combine defaults, the config file and command-line flags

    Command-line flags win over the file, which wins over defaults.
    """
    if args.config:
        system, scenario = parse_config(args.config, scenario_name=args.scenario)
    else:
        system, scenario = default_config(args.scenario)
    if args.seed is not None:
        system = system.with_updates(seed=args.seed)
    changes = {}
    if args.reps is not None:
        changes["replications"] = args.reps
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.check is not None:
        changes["check"] = args.check
    if changes:
        scenario = scenario.with_updates(**changes)
    return system, scenario


def _run(args: argparse.Namespace) -> int:
    system, scenario = resolve_run(args)
    workers = resolve_workers(args.threads)
    manifest = run_scenario(scenario, system, workers)

    print(f"{scenario.name}: {len(manifest.outputs)} files in {manifest.directory}")
    for name, passed in sorted(manifest.verdicts.items()):
        print(f"  {'PASS' if passed else 'FAIL'}  {name}")
    print(f"manifest: {manifest.path}")
    if scenario.check and not manifest.passed:
        logger.error("Acceptance check failed for scenario %s", scenario.name)
        return EXIT_CHECK
    return EXIT_OK


def _verify_assoc(args: argparse.Namespace) -> int:
    lam = parse_fraction(args.lambda_)
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 1 <= args.k <= args.n:
        raise ValueError(f"need 1 <= k <= n, got n={args.n}, k={args.k}")
    token = parse_beta_token(args.beta)
    Lambda = args.n * lam / args.k
    threshold = beta_threshold(args.n, args.k, Lambda)
    beta = threshold if token == "threshold" else parse_fraction(token) * Lambda

    dist = arrival_pattern_dist(args.n, args.k, Lambda, beta)
    workers = resolve_workers(args.threads) if args.k >= 5 else 1
    verdict = check_association(dist, workers=workers, long_running=args.long_running)

    print(f"n={args.n} k={args.k} Lambda={Lambda} beta={beta} (threshold {threshold})")
    print(f"associated: {verdict.associated} ({verdict.pairs_checked} pairs checked)")
    if verdict.counterexample is not None:
        example = verdict.counterexample
        print(
            f"counterexample: f={example.f.describe()} g={example.g.describe()} "
            f"E[fg]={example.joint} E[f]E[g]={example.product} gap={example.gap}"
        )
    for (i, j), value in covariance_check(dist).items():
        print(f"Cov(A{i + 1}, A{j + 1}) = {value}")
    if args.check and not verdict.associated:
        return EXIT_CHECK
    return EXIT_OK


def _plotdata(args: argparse.Namespace) -> int:
    path = emit_plotdata(args.manifest, args.out)
    print(path)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the command line

    Returns:
        Exit code (0 for success)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    handlers = {"run": _run, "verify-assoc": _verify_assoc, "plotdata": _plotdata}
    try:
        return handlers[args.command](args)

    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG

    except MissingOutputsError as e:
        logger.error("%s", e)
        return EXIT_MISSING

    except PermissionError as e:
        logger.error("Cannot write results: permission denied (%s)", e)
        return EXIT_MISSING

    except FileNotFoundError as e:
        logger.error("Cannot write results: directory not found (%s)", e)
        return EXIT_MISSING

    except OSError as e:
        logger.error("Cannot write results: system error (%s)", e)
        return EXIT_MISSING

    except ValueError as e:
        logger.error("Invalid parameters: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
