#!/usr/bin/env python3
# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Configure integration test run."""

import logging
from typing import Callable, Dict, Tuple

import numpy as np
import pytest
from _pytest.config.argparsing import Parser

from utils.harness import ExperimentConfig, run_experiment

logger = logging.getLogger(__name__)


def pytest_addoption(parser: Parser) -> None:
    parser.addoption("--trials", action="store", type=int, default=20, help="Trials per setup.")
    parser.addoption(
        "--horizon", action="store", type=int, default=20_000, help="Target horizon n_Q."
    )
    parser.addoption("--workers", action="store", type=int, default=1, help="Worker processes.")


@pytest.fixture(scope="session")
def trials(request) -> int:
    """Get the number of trials per setup."""
    return request.config.getoption("--trials")


@pytest.fixture(scope="session")
def horizon(request) -> int:
    """Get the target horizon."""
    return request.config.getoption("--horizon")


@pytest.fixture(scope="session")
def final_regret(request, trials: int) -> Callable[..., Tuple[float, float]]:
    """Run a setup and get the mean and standard error of its final regret.

    Setups share d=2, K=2, beta=0.8, sigma=0.05 and the seed, so every setup
    sees the same bump signs and covariates trial by trial.
    """
    workers = request.config.getoption("--workers")
    cache: Dict[Tuple, Tuple[float, float]] = {}

    def run(**options) -> Tuple[float, float]:
        key = tuple(sorted(options.items()))
        if key not in cache:
            config = ExperimentConfig(
                checkpoints=(options["n_q"],), trials=trials, workers=workers, seed=0, **options
            )
            summary = run_experiment(config)
            final = np.array([trace.cum_regret[-1] for trace in summary.traces])
            se = float(final.std(ddof=1) / np.sqrt(len(final))) if len(final) > 1 else 0.0
            cache[key] = (float(final.mean()), se)
            logger.info(f"{options}: regret {cache[key][0]:.1f} +- {cache[key][1]:.1f}")
        return cache[key]

    return run
