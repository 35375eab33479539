# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Seeded Monte Carlo regret experiments."""

import csv
import dataclasses
import json
import logging
import pathlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from utils.adaptive import LOG_BASES, AdaptiveParams, AdaptivePolicy
from utils.elimination import BoundParams
from utils.environment import (
    AuxDataset,
    BumpEnvironment,
    Environment,
    SourceSpec,
    check_probabilities,
    exploration_coefficient,
    holder_constant,
    make_reward_spec,
)
from utils.errors import DomainError, Error, UsageError
from utils.transfer import TransferPolicy

_logger = logging.getLogger(__name__)

ALGORITHMS = ("transfer", "adaptive", "baseline", "oracle", "fixed")
FORMATS = ("csv", "json")
TRACE_HEADER = ("algo", "trial", "checkpoint_t", "cum_regret")
DEFAULT_CHECKPOINT_COUNT = 50
STREAMS = ("environment", "auxiliary", "context", "reward", "policy")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a regret experiment depends on.

    Unset optional fields fall back to values derived from the others, see
    the `effective_*` properties.
    """

    n_q: int
    algo: str = "transfer"
    n_p: int = 0
    dim: int = 2
    beta: float = 0.8
    c_beta: Optional[float] = None
    gamma: float = 1.0
    c_gamma: float = 1.0
    q_lo: float = 1.0
    kappa: Optional[float] = None
    mu: Tuple[float, ...] = (0.5, 0.5)
    sigma: float = 0.05
    alpha: Optional[float] = None
    beta_lo: float = 0.5
    beta_hi: float = 1.0
    gamma_hi: float = 2.0
    c_beta_hi: Optional[float] = None
    log_base: str = "e"
    depth_cap: Optional[int] = None
    fixed_arm: int = 1
    trials: int = 50
    seed: int = 0
    checkpoints: Optional[Tuple[int, ...]] = None
    workers: int = 1
    out: Optional[str] = None
    format: str = "csv"

    def __post_init__(self) -> None:
        """Validate option ranges.

        Raises:
            UsageError: Raised if an option is out of range.
        """
        if self.algo not in ALGORITHMS:
            raise UsageError(f"Unknown algorithm {self.algo}, expected one of {ALGORITHMS}")
        if self.format not in FORMATS:
            raise UsageError(f"Unknown format {self.format}, expected one of {FORMATS}")
        if self.log_base not in LOG_BASES:
            raise UsageError(f"Log base must be one of {sorted(LOG_BASES)}, not {self.log_base}")
        for name in ("n_q", "dim", "trials", "workers", "depth_cap"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise UsageError(f"{name} must be at least 1, not {value}")
        if self.n_p < 0:
            raise UsageError(f"n_p must be non-negative, not {self.n_p}")
        if not 0.0 < self.beta <= 1.0:
            raise UsageError(f"beta must lie in (0, 1], not {self.beta}")
        if self.sigma < 0.0:
            raise UsageError(f"sigma must be non-negative, not {self.sigma}")
        if self.kappa is not None and not 0.0 <= self.kappa <= 1.0:
            raise UsageError(f"kappa must lie in [0, 1], not {self.kappa}")
        if not 1 <= self.fixed_arm <= len(self.mu):
            raise UsageError(f"fixed_arm must lie in [1, {len(self.mu)}], not {self.fixed_arm}")
        if self.alpha is not None and (self.alpha < 0.0 or self.alpha * self.beta > self.dim):
            raise UsageError(f"alpha must satisfy 0 <= alpha and alpha * beta <= {self.dim}")
        if self.checkpoints is not None:
            points = list(self.checkpoints)
            if not points or points != sorted(set(points)) or points[0] < 1:
                raise UsageError("checkpoints must be distinct, sorted and positive")
            if points[-1] > self.n_q:
                raise UsageError(f"checkpoints must not exceed n_q={self.n_q}")
        try:
            check_probabilities(self.mu)
            SourceSpec(self.gamma, self.mu, self.n_p)
            self.bound_params()
            self.adaptive_params()
        except DomainError as e:
            raise UsageError(e.message)

    @property
    def n_arms(self) -> int:
        """Arm count K, the length of `mu`."""
        return len(self.mu)

    @property
    def effective_n_p(self) -> int:
        """Auxiliary sample count, 0 for the baseline."""
        return 0 if self.algo == "baseline" else self.n_p

    @property
    def effective_c_beta(self) -> float:
        """Hölder constant handed to the oracle policy."""
        return holder_constant(self.beta) if self.c_beta is None else self.c_beta

    @property
    def effective_c_beta_hi(self) -> float:
        """Upper bound on the Hölder constant handed to the adaptive policy."""
        return holder_constant(self.beta_hi) if self.c_beta_hi is None else self.c_beta_hi

    @property
    def effective_kappa(self) -> float:
        """Exploration coefficient handed to the oracle policy."""
        return exploration_coefficient(self.mu) if self.kappa is None else self.kappa

    @property
    def effective_checkpoints(self) -> Tuple[int, ...]:
        """Checkpoints, log-spaced over [1, n_q] unless given."""
        if self.checkpoints is not None:
            return tuple(self.checkpoints)
        return default_checkpoints(self.n_q)

    def bound_params(self) -> BoundParams:
        """Build the oracle bound parameters."""
        return BoundParams(
            beta=self.beta,
            c_beta=self.effective_c_beta,
            gamma=self.gamma,
            kappa=self.effective_kappa,
            n_q=self.n_q,
            n_p=self.effective_n_p,
            dim=self.dim,
        )

    def adaptive_params(self) -> AdaptiveParams:
        """Build the adaptive policy's prior knowledge."""
        return AdaptiveParams(self.beta_lo, self.beta_hi, self.effective_c_beta_hi, self.gamma_hi)

    def to_dict(self) -> Dict[str, Any]:
        """Get a JSON-ready copy of the options."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        """Build a config from `to_dict` output."""
        values = dict(values)
        values["mu"] = tuple(values.get("mu", cls.mu))
        if values.get("checkpoints") is not None:
            values["checkpoints"] = tuple(values["checkpoints"])
        return cls(**values)


@dataclass(frozen=True)
class RegretTrace:
    """Cumulative pseudo-regret of one trial at each checkpoint."""

    algo: str
    trial: int
    checkpoints: Tuple[int, ...]
    cum_regret: Tuple[float, ...]


@dataclass(frozen=True)
class Summary:
    """Regret statistics across trials.

    Attributes:
        config: The experiment options.
        checkpoints: Timesteps the statistics refer to.
        mean: Mean cumulative regret per checkpoint.
        std: Population standard deviation per checkpoint.
        wall_clock_seconds: Time spent running the trials.
        minimax_rate_overlay: Minimax regret rate per checkpoint, if alpha is known.
        traces: Per-trial traces, not serialized.
    """

    config: ExperimentConfig
    checkpoints: Tuple[int, ...]
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    wall_clock_seconds: float
    minimax_rate_overlay: Optional[Tuple[float, ...]] = None
    traces: List[RegretTrace] = field(default_factory=list, compare=False, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        """Get the JSON document of the summary."""
        return {
            "config": self.config.to_dict(),
            "checkpoints": [
                {"t": t, "mean": m, "std": s}
                for t, m, s in zip(self.checkpoints, self.mean, self.std)
            ],
            "minimax_rate_overlay": (
                None if self.minimax_rate_overlay is None else list(self.minimax_rate_overlay)
            ),
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "Summary":
        """Build a summary from its JSON document."""
        rows = document["checkpoints"]
        overlay = document.get("minimax_rate_overlay")
        return cls(
            config=ExperimentConfig.from_dict(document["config"]),
            checkpoints=tuple(int(row["t"]) for row in rows),
            mean=tuple(float(row["mean"]) for row in rows),
            std=tuple(float(row["std"]) for row in rows),
            wall_clock_seconds=float(document["wall_clock_seconds"]),
            minimax_rate_overlay=None if overlay is None else tuple(float(v) for v in overlay),
        )


class Policy(Protocol):
    """Contextual bandit policy driven one step at a time."""

    def select(self, x: Sequence[float]) -> int:
        """Choose the arm to pull at covariate `x`."""
        ...

    def observe(self, x: Sequence[float], arm: int, reward: float) -> None:
        """Receive the reward of the chosen arm."""
        ...


class OraclePolicy:
    """Pull the best arm everywhere."""

    def __init__(self, env: Environment) -> None:
        self.env = env

    def select(self, x: Sequence[float]) -> int:
        """Choose the best arm at `x`."""
        return self.env.oracle_gap(x)[2]

    def observe(self, x: Sequence[float], arm: int, reward: float) -> None:
        """Ignore the reward."""


class FixedArmPolicy:
    """Pull the same arm everywhere."""

    def __init__(self, arm: int) -> None:
        self.arm = arm

    def select(self, x: Sequence[float]) -> int:
        """Choose the fixed arm."""
        return self.arm

    def observe(self, x: Sequence[float], arm: int, reward: float) -> None:
        """Ignore the reward."""


def default_checkpoints(n_q: int) -> Tuple[int, ...]:
    """Get up to 50 distinct log-spaced checkpoints in [1, n_q]."""
    points = np.unique(np.rint(np.geomspace(1, n_q, DEFAULT_CHECKPOINT_COUNT)).astype(int))
    return tuple(int(t) for t in points)


def trial_streams(seed: int, trial: int) -> Dict[str, np.random.Generator]:
    """Derive independent random streams for one trial.

    Streams depend only on `(seed, trial)`, never on scheduling order.
    """
    root = np.random.SeedSequence(entropy=seed, spawn_key=(trial,))
    return {
        name: np.random.Generator(np.random.Philox(child))
        for name, child in zip(STREAMS, root.spawn(len(STREAMS)))
    }


def build_environment(config: ExperimentConfig, rng: np.random.Generator) -> BumpEnvironment:
    """Draw the bump environment of one trial."""
    reward = make_reward_spec(config.beta, config.sigma, rng, config.dim, config.n_arms)
    return BumpEnvironment(reward, SourceSpec(config.gamma, config.mu, config.effective_n_p))


def build_policy(
    config: ExperimentConfig, env: Environment, aux: AuxDataset, rng: np.random.Generator
) -> Policy:
    """Instantiate the configured policy."""
    if config.algo in ("transfer", "baseline"):
        return TransferPolicy(
            config.bound_params(), aux, config.n_arms, config.c_gamma, config.q_lo
        )
    if config.algo == "adaptive":
        return AdaptivePolicy(
            config.adaptive_params(),
            config.n_q,
            aux,
            rng,
            config.n_arms,
            config.depth_cap,
            config.log_base,
        )
    if config.algo == "oracle":
        return OraclePolicy(env)
    return FixedArmPolicy(config.fixed_arm)


def run_trial(config: ExperimentConfig, trial_index: int) -> RegretTrace:
    """Simulate one trial and record its cumulative pseudo-regret.

    Args:
        config: The experiment options.
        trial_index: Index of the trial, selects the random streams.

    Returns:
        RegretTrace: Cumulative regret at every checkpoint.
    """
    streams = trial_streams(config.seed, trial_index)
    env = build_environment(config, streams["environment"])
    aux = env.generate_aux_dataset(streams["auxiliary"])
    policy = build_policy(config, env, aux, streams["policy"])
    checkpoints = config.effective_checkpoints

    regret = 0.0
    recorded = []
    # Steps past the last checkpoint cannot change a recorded value.
    for t in range(1, checkpoints[-1] + 1):
        x = env.sample_target_context(streams["context"])
        arm = policy.select(x)
        policy.observe(x, arm, env.draw_reward(arm, x, streams["reward"]))
        regret += env.oracle_gap(x)[0] - env.mean_reward(arm, x)
        if t == checkpoints[len(recorded)]:
            recorded.append(regret)

    _logger.debug(f"Trial {trial_index} of {config.algo} ended with regret {regret:.6g}")
    return RegretTrace(config.algo, trial_index, checkpoints, tuple(recorded))


def minimax_rate(
    n_q: int, n_p: int, kappa: float, beta: float, alpha: float, gamma: float, dim: int
) -> float:
    """Evaluate the minimax regret rate of transfer under covariate shift.

    With e = (d + 2 beta) / (d + 2 beta + gamma) and s = beta (1 + alpha) / (2 beta + d)
    the rate is n_Q (n_Q + (kappa n_P)^e)^-s.

    Raises:
        DomainError: Raised if alpha * beta exceeds d.
    """
    if alpha * beta > dim:
        raise DomainError(f"alpha * beta = {alpha * beta} exceeds the dimension {dim}")
    effective = (kappa * n_p) ** ((dim + 2 * beta) / (dim + 2 * beta + gamma))
    return n_q * (n_q + effective) ** (-beta * (1 + alpha) / (2 * beta + dim))


def _run_trial_logged(config: ExperimentConfig, trial: int) -> RegretTrace:
    try:
        return run_trial(config, trial)
    except Exception as e:
        raise Error(f"Trial {trial} with seed {config.seed} failed: {e}") from e


def run_experiment(config: ExperimentConfig) -> Summary:
    """Run every trial and aggregate the regret per checkpoint.

    Raises:
        Error: Raised if any trial fails.
    """
    _logger.info(
        f"Running {config.trials} trials of {config.algo} with n_Q={config.n_q}, "
        f"n_P={config.effective_n_p} on {config.workers} worker(s)"
    )
    start = time.perf_counter()
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as executor:
            futures = [
                executor.submit(_run_trial_logged, config, trial)
                for trial in range(config.trials)
            ]
            traces = [future.result() for future in futures]
    else:
        traces = [_run_trial_logged(config, trial) for trial in range(config.trials)]
    elapsed = time.perf_counter() - start

    values = np.array([trace.cum_regret for trace in traces])
    checkpoints = config.effective_checkpoints
    overlay = None
    if config.alpha is not None:
        overlay = tuple(
            minimax_rate(
                t,
                config.effective_n_p,
                config.effective_kappa,
                config.beta,
                config.alpha,
                config.gamma,
                config.dim,
            )
            for t in checkpoints
        )
    summary = Summary(
        config=config,
        checkpoints=checkpoints,
        mean=tuple(float(v) for v in values.mean(axis=0)),
        std=tuple(float(v) for v in values.std(axis=0)),
        wall_clock_seconds=elapsed,
        minimax_rate_overlay=overlay,
        traces=traces,
    )
    _logger.info(f"Mean regret at t={checkpoints[-1]} is {summary.mean[-1]:.6g} ({elapsed:.1f}s)")
    return summary


def emit_results(
    summary: Summary,
    traces: Sequence[RegretTrace],
    fmt: str,
    path: Union[str, pathlib.Path],
) -> None:
    """Write per-trial traces as CSV or the summary as JSON.

    Raises:
        Error: Raised if the format is unknown or the file cannot be written.
    """
    if fmt not in FORMATS:
        raise Error(f"Unknown format {fmt}, expected one of {FORMATS}")
    path = pathlib.Path(path)
    _logger.debug(f"Writing {fmt} results to {path}")
    try:
        with path.open("w", newline="") as f:
            if fmt == "csv":
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(TRACE_HEADER)
                for trace in traces:
                    for t, value in zip(trace.checkpoints, trace.cum_regret):
                        writer.writerow((trace.algo, trace.trial, t, f"{value:.17g}"))
            else:
                f.write(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
                f.write("\n")
    except OSError as e:
        _logger.error(f"Failed to write results to {path}. Reason:\n{e}")
        raise Error(f"Failed to write results to {path}")


def load_summary(path: Union[str, pathlib.Path]) -> Summary:
    """Read a summary written by `emit_results`.

    Raises:
        Error: Raised if the file cannot be read or parsed.
    """
    try:
        document = json.loads(pathlib.Path(path).read_text())
        return Summary.from_dict(document)
    except (OSError, ValueError, KeyError, TypeError) as e:
        _logger.error(f"Failed to load summary from {path}. Reason:\n{e}")
        raise Error(f"Failed to load summary from {path}")

