#!/usr/bin/env python3
# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Regret benchmark for transfer learning in nonparametric contextual bandits."""

import argparse
import dataclasses
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

import yaml

from utils.adaptive import LOG_BASES
from utils.errors import Error, UsageError
from utils.harness import ALGORITHMS, FORMATS, ExperimentConfig, emit_results, run_experiment

logger = logging.getLogger(__name__)

CONFIG_KEYS = frozenset(f.name for f in dataclasses.fields(ExperimentConfig))
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting on bad input."""

    def error(self, message: str):
        """Raise a usage error carrying the parser's message."""
        raise UsageError(message)


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    """Build the command-line parser.

    Options left out on the command line stay absent from the namespace, so
    config file values only yield to flags that were actually given.
    """
    parser = _ArgumentParser(description=__doc__, argument_default=argparse.SUPPRESS)
    parser.add_argument("--config", help="YAML or JSON file with option values")
    parser.add_argument(
        "--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR")
    )

    env = parser.add_argument_group("environment")
    env.add_argument("--n-q", type=int, help="horizon of the target bandit (required)")
    env.add_argument("--n-p", type=int, help="size of the auxiliary log")
    env.add_argument("--dim", type=int, help="covariate dimension")
    env.add_argument("--beta", type=float, help="Hölder exponent of the rewards")
    env.add_argument("--gamma", type=float, help="transfer exponent of the source")
    env.add_argument("--mu", type=_float_list, help="arm probabilities of the source")
    env.add_argument("--sigma", type=float, help="reward noise standard deviation")
    env.add_argument("--alpha", type=float, help="margin exponent, for the rate overlay")

    algo = parser.add_argument_group("algorithm")
    algo.add_argument("--algo", choices=ALGORITHMS, help="policy to run")
    algo.add_argument("--c-beta", type=float, help="Hölder constant, default 1/2 4^beta")
    algo.add_argument("--c-gamma", type=float, help="transfer constant")
    algo.add_argument("--q-lo", type=float, help="lower bound on the target density")
    algo.add_argument("--kappa", type=float, help="exploration coefficient, default from mu")
    algo.add_argument("--beta-lo", type=float, help="adaptive: lower bound on beta")
    algo.add_argument("--beta-hi", type=float, help="adaptive: upper bound on beta")
    algo.add_argument("--gamma-hi", type=float, help="adaptive: upper bound on gamma")
    algo.add_argument("--c-beta-hi", type=float, help="adaptive: upper bound on C_beta")
    algo.add_argument("--log-base", choices=sorted(LOG_BASES), help="adaptive: base of log b")
    algo.add_argument("--depth-cap", type=int, help="adaptive: deepest partition level")
    algo.add_argument("--fixed-arm", type=int, help="fixed: arm to pull")

    run = parser.add_argument_group("experiment")
    run.add_argument("--trials", type=int, help="number of Monte Carlo trials")
    run.add_argument("--seed", type=int, help="base seed")
    run.add_argument("--checkpoints", type=_int_list, help="comma-separated timesteps")
    run.add_argument("--workers", type=int, help="worker processes")
    run.add_argument("--out", help="output path, summary goes to stdout if absent")
    run.add_argument("--format", choices=FORMATS, help="csv traces or json summary")
    return parser


def load_config_file(path: str) -> Dict[str, Any]:
    """Read option values from a YAML or JSON mapping.

    Raises:
        UsageError: Raised if the file is unreadable, not a mapping, or has unknown keys.
    """
    try:
        with open(path) as f:
            values = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise UsageError(f"Cannot read config file {path}: {e}")
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise UsageError(f"Config file {path} must hold a mapping of options")
    unknown = sorted(set(values) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"Unknown options in {path}: {', '.join(unknown)}")
    return values


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, config file and flags into an experiment config.

    Raises:
        UsageError: Raised if an option is missing or invalid.
    """
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "log_level")}
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    values.update(flags)

    if "n_q" not in values:
        raise UsageError("Missing required option --n-q")
    if values.get("algo") == "baseline" and values.get("n_p"):
        logger.warning(f"Ignoring n_p={values['n_p']} for the baseline")
        values["n_p"] = 0
    try:
        return ExperimentConfig.from_dict(values)
    except TypeError as e:
        raise UsageError(f"Invalid option value: {e}")


def parse_config(argv: Optional[Sequence[str]] = None) -> ExperimentConfig:
    """Parse command-line arguments into an experiment config.

    Raises:
        UsageError: Raised on an unknown flag or an invalid value.
    """
    return config_from_args(build_parser().parse_args(argv))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the experiment described by `argv` and emit its results.

    Returns:
        int: 0 on success, 2 on a usage error, 1 on any other error.
    """
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
        config = config_from_args(args)
        summary = run_experiment(config)
        if config.out:
            emit_results(summary, summary.traces, config.format, config.out)
            logger.info(f"Wrote {config.format} results to {config.out}")
        else:
            print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    except UsageError as e:
        logger.error(e.message)
        return 2
    except Error as e:
        logger.error(e.message)
        return 1
    return 0


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
