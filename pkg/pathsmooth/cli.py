import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv

from pathsmooth import __version__
from pathsmooth.config import load_config
from pathsmooth.errors import ConfigurationError, PathSmoothError
from pathsmooth.harness import (
    run_calibrate,
    run_clt,
    run_experiment,
    run_mse_passes,
    run_neff,
    run_simulate,
    run_smooth,
)
from pathsmooth.logging_config import configure_logging

logger = logging.getLogger("pathsmooth.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

COMMANDS = {
    "simulate": "Simulate observations (and true states) from the configured model",
    "smooth": "Run the configured smoother once and dump the weighted path ensemble",
    "neff": "Per-time effective sample size over R repetitions against the exact smoother",
    "clt": "Single-run CLT variance estimate against the across-repetition variance",
    "mse-passes": "MSE of the additive functional as a function of the number of passes",
    "calibrate": "Particle count per algorithm for a fixed CPU budget",
    "run": "Full configured experiment: ensemble dump, N_eff and CLT reports",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="pathsmooth",
        description="Particle smoothing with Metropolis-Hastings improvement passes",
        epilog="Exit codes: 0 success, 1 configuration or usage error, 2 runtime/algorithm error.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    subparsers.required = True

    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", type=Path, help="TOML experiment config (defaults apply when omitted)")
        sub.add_argument("--seed", type=int, help="Experiment seed (overrides config and PATHSMOOTH_SEED)")
        sub.add_argument("--n", type=int, dest="n_particles", help="Number of particles N")
        sub.add_argument("--k", type=int, dest="k_passes", help="Number of improvement passes K (fixed schedule)")
        sub.add_argument("--out", dest="output_dir", help="Output directory")
        sub.add_argument("--threads", type=int, help="Worker threads across repetitions (1 is bit-reproducible)")
        sub.add_argument("--repetitions", type=int, help="Number of repetitions R")
        if name == "calibrate":
            sub.add_argument("--budget", type=float, help="Target seconds per run (default: experiment.cpu_budget)")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {
        "seed": args.seed,
        "n_particles": args.n_particles,
        "k_passes": args.k_passes,
        "output_dir": args.output_dir,
        "threads": args.threads,
        "repetitions": args.repetitions,
    }
    # --k pins the pass count
    if args.k_passes is not None:
        overrides["k_schedule"] = "fixed"
    return overrides


def run(args: argparse.Namespace):
    config = load_config(args.config, overrides=_overrides(args))
    logger.info(f"{args.command}: model={config.model_kind} algorithm={config.algorithm} seed={config.seed}")
    if args.command == "simulate":
        return run_simulate(config)
    if args.command == "smooth":
        return run_smooth(config)
    if args.command == "neff":
        return run_neff(config)
    if args.command == "clt":
        # --n restricts the study to that particle count
        return run_clt(config, n_values=[args.n_particles] if args.n_particles is not None else None)
    if args.command == "mse-passes":
        return run_mse_passes(config)
    if args.command == "calibrate":
        budget = args.budget if args.budget is not None else config.cpu_budget
        if not budget > 0:
            raise ConfigurationError("a positive budget is required (--budget or experiment.cpu_budget)", key="budget")
        return run_calibrate(config, budget)
    return run_experiment(config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        manifest = run(args)
    except ConfigurationError as e:
        logger.debug("configuration error", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PathSmoothError as e:
        logger.debug("runtime error", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    print(_summary(manifest))
    return EXIT_OK


def _summary(manifest) -> str:
    return f"{manifest.command}: {len(manifest.outputs)} files, config {manifest.config_hash}"


if __name__ == "__main__":
    sys.exit(main())
