# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Smoothness-adaptive transfer policy.

The policy first estimates the Hölder exponent by comparing binned reward
estimates at a coarse and a fine level, using either a head of the
auxiliary log or uniformly random pulls on the target bandit. It then grows
the partition tree with a bound that needs neither the exponent nor the
transfer parameters, down to the shallowest depth an oracle policy could
choose for an exponent inside the bracket.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from utils.elimination import (
    ArmAggregate,
    AuxIndex,
    Bounds,
    least_tau,
    strict_ceiling_log2_ratio,
)
from utils.environment import AuxDataset, Environment
from utils.errors import DomainError, PairingError
from utils.geometry import MAX_INDEX_BITS, BinId, bin_box, bin_of, check_level, morton_codes
from utils.transfer import PartitionPolicy

_logger = logging.getLogger(__name__)

MAX_GRID_POINTS = 10**6
# At most 1/LOG_SHARE_DIVISOR of the auxiliary log goes to the smoothness estimation.
LOG_SHARE_DIVISOR = 10
LOG_BASES = {"e": math.e, "2": 2.0}
QUADRATURE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class AdaptiveParams:
    """Prior knowledge of the adaptive policy.

    Attributes:
        beta_lo: Lower bound on the Hölder exponent.
        beta_hi: Upper bound on the Hölder exponent.
        c_beta_hi: Upper bound on the Hölder constant.
        gamma_hi: Upper bound on the transfer exponent.
    """

    beta_lo: float = 0.5
    beta_hi: float = 1.0
    c_beta_hi: float = 2.0
    gamma_hi: float = 2.0

    def __post_init__(self) -> None:
        """Validate the bracket."""
        if not 0.0 < self.beta_lo < self.beta_hi <= 1.0:
            raise DomainError(
                f"Exponent bracket must satisfy 0 < {self.beta_lo} < {self.beta_hi} <= 1"
            )
        if self.c_beta_hi <= 0.0:
            raise DomainError(f"Hölder constant bound must be positive, not {self.c_beta_hi}")
        if self.gamma_hi < 0.0:
            raise DomainError(f"Transfer exponent bound must be non-negative, not {self.gamma_hi}")


@dataclass(frozen=True)
class EstimationPlan:
    """Levels and sample budget of the smoothness estimation.

    Attributes:
        n: max(n_P, n_Q).
        levels: Coarse level, fine level and grid level.
        budget: Sample budget T before capping by the available samples.
        use_source: Whether the estimation draws on the auxiliary log.
        samples: Samples the estimation consumes, s_P when `use_source` and s_Q otherwise.
    """

    n: int
    levels: Tuple[int, int, int]
    budget: float
    use_source: bool
    samples: int


@dataclass(frozen=True)
class SmoothnessEstimate:
    """Outcome of the smoothness estimation.

    Attributes:
        beta_hat: Clamped estimate of the Hölder exponent.
        s_q: Target steps consumed.
        s_p: Auxiliary samples consumed.
        raw_beta: Estimate before clamping.
        statistic: Largest coarse-fine discrepancy b.
        levels: Coarse level, fine level and grid level.
    """

    beta_hat: float
    s_q: int
    s_p: int
    raw_beta: float = math.nan
    statistic: float = math.nan
    levels: Tuple[int, int, int] = (0, 0, 0)


def _log_n(n: int) -> float:
    # log(n) v 1 keeps log2(log(n)) defined at tiny horizons.
    return max(math.log(n), 1.0) if n > 0 else 1.0


def plan_estimation(n_q: int, n_p: int, ap: AdaptiveParams, dim: int) -> EstimationPlan:
    """Choose the levels and budget of the smoothness estimation.

    The auxiliary log is used when it is larger than the horizon. The budget
    is capped by the horizon, or by a share of the log so that the rest of
    the log still reaches the partition tree.
    """
    n = max(n_q, n_p)
    use_source = n_p > n_q
    spread = dim + 2 * ap.beta_hi + (ap.gamma_hi if use_source else 0.0)
    lead = dim + ap.beta_hi + (ap.gamma_hi if use_source else 0.0)
    loglog = math.log2(_log_n(n)) / ap.beta_lo

    l1 = strict_ceiling_log2_ratio(Fraction(n), Fraction(spread) ** 2 / Fraction(ap.beta_lo))
    l2 = math.floor(l1 + loglog) + 1
    l3 = math.floor(ap.beta_hi / ap.beta_lo * l1 + loglog) + 1
    budget = n ** (ap.beta_lo / spread) * _log_n(n) ** (lead / ap.beta_lo)
    available = n_p // LOG_SHARE_DIVISOR if use_source else n_q
    samples = available if budget >= available else math.floor(budget)
    return EstimationPlan(n, (l1, l2, l3), budget, use_source, samples)


def default_depth(n_q: int, ap: AdaptiveParams, dim: int) -> int:
    """Get the depth cap of the adaptive partition tree.

    This is the target term of the oracle depth cap at the top of the
    exponent bracket, the least integer strictly greater than
    log2(n_Q) / (d + 2 beta_hi). It needs neither the transfer exponent nor
    the exploration coefficient and never exceeds the oracle depth cap of an
    exponent inside the bracket.
    """
    return strict_ceiling_log2_ratio(Fraction(n_q), dim + 2 * Fraction(ap.beta_hi))


def local_average(
    data: Sequence[Tuple[Sequence[float], float]], center: Sequence[float], window: float, b: BinId
) -> float:
    """Average the rewards of samples in bin `b` within `window` of `center`.

    Returns:
        float: The mean, or 0 when no sample qualifies.

    Raises:
        DomainError: Raised if `window` is not positive.
    """
    if window <= 0.0:
        raise DomainError(f"Window must be positive, not {window}")
    total = 0.0
    count = 0
    for x, y in data:
        if bin_of(b.level, x) != b:
            continue
        if max(abs(xi - ci) for xi, ci in zip(x, center)) <= window:
            total += y
            count += 1
    return total / count if count else 0.0


def smoothness_grid(level: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Get the grid {k 2^-level} of the cube, subsampled when too large."""
    side = (1 << level) + 1
    if side**dim > MAX_GRID_POINTS:
        _logger.warning(
            f"Grid of {side}^{dim} points exceeds {MAX_GRID_POINTS}, subsampling at random"
        )
        return np.ldexp(rng.integers(0, side, size=(MAX_GRID_POINTS, dim)).astype(float), -level)
    return np.ldexp(np.indices((side,) * dim).reshape(dim, -1).T.astype(float), -level)


def _binned_estimates(
    points: np.ndarray, rewards: np.ndarray, level: int, grid_codes: np.ndarray, grid: np.ndarray
) -> np.ndarray:
    """Evaluate the local estimator with window 2^-level at every grid point.

    Samples and grid points in the same closed bin are within one side length
    of each other, so the window covers the whole bin and the estimator is the
    bin mean.
    """
    if len(points) == 0:
        return np.zeros(len(grid))
    codes, inverse = np.unique(morton_codes(level, points), return_inverse=True)
    means = np.bincount(inverse, weights=rewards) / np.bincount(inverse)
    pos = np.minimum(np.searchsorted(codes, grid_codes), len(codes) - 1)
    return np.where(codes[pos] == grid_codes, means[pos], 0.0)


def smoothness_statistic(
    points: np.ndarray,
    arms: np.ndarray,
    rewards: np.ndarray,
    levels: Tuple[int, int, int],
    n_arms: int,
    rng: np.random.Generator,
) -> float:
    """Get the largest coarse-fine discrepancy b over arms and grid points."""
    points = np.asarray(points, dtype=float)
    arms = np.asarray(arms)
    rewards = np.asarray(rewards, dtype=float)
    dim = points.shape[1]
    coarse, fine, grid_level = levels
    for level in levels:
        check_level(level, dim)
    grid = smoothness_grid(grid_level, dim, rng)
    coarse_codes = morton_codes(coarse, grid)
    fine_codes = morton_codes(fine, grid)

    statistic = 0.0
    for k in range(1, n_arms + 1):
        mask = arms == k
        low = _binned_estimates(points[mask], rewards[mask], coarse, coarse_codes, grid)
        high = _binned_estimates(points[mask], rewards[mask], fine, fine_codes, grid)
        statistic = max(statistic, float(np.max(np.abs(low - high))))
    return statistic


def beta_from_statistic(
    statistic: float, coarse: int, n: int, ap: AdaptiveParams, log_base: str = "e"
) -> Tuple[float, float]:
    """Turn the discrepancy b into a raw and a clamped exponent estimate.

    Raises:
        DomainError: Raised if `log_base` is not "e" or "2".
    """
    if log_base not in LOG_BASES:
        raise DomainError(f"Log base must be one of {sorted(LOG_BASES)}, not {log_base}")
    if statistic <= 0.0:
        raw = math.inf
    else:
        raw = -math.log(statistic, LOG_BASES[log_base]) / max(coarse, 1)
        if n > 1:
            raw -= math.log2(_log_n(n)) / math.log2(n)
    return raw, min(max(raw, ap.beta_lo), ap.beta_hi)


def estimate_from_samples(
    points: np.ndarray,
    arms: np.ndarray,
    rewards: np.ndarray,
    ap: AdaptiveParams,
    n: int,
    levels: Tuple[int, int, int],
    rng: np.random.Generator,
    n_arms: int = 2,
    log_base: str = "e",
    s_q: int = 0,
    s_p: int = 0,
) -> SmoothnessEstimate:
    """Estimate the Hölder exponent from directly supplied samples.

    Args:
        points: Covariates, shape (m, d).
        arms: Pulled arms, shape (m,).
        rewards: Observed rewards, shape (m,).
        ap: Exponent bracket.
        n: max(n_P, n_Q), drives the bias correction.
        levels: Coarse level, fine level and grid level.
        rng: Generator subsampling oversized grids.
        n_arms: Arm count.
        log_base: Base of the logarithm of b, "e" or "2".
        s_q: Target steps the samples consumed.
        s_p: Auxiliary samples the samples consumed.
    """
    statistic = smoothness_statistic(points, arms, rewards, levels, n_arms, rng)
    raw, beta_hat = beta_from_statistic(statistic, levels[0], n, ap, log_base)
    _logger.debug(
        f"Smoothness statistic {statistic:.6g} at levels {levels} gives beta_hat={beta_hat:.4f}"
    )
    return SmoothnessEstimate(beta_hat, s_q, s_p, raw, statistic, levels)


def estimate_smoothness(
    n_q: int,
    n_p: int,
    ap: AdaptiveParams,
    env: Environment,
    aux: AuxDataset,
    rng: np.random.Generator,
    log_base: str = "e",
    levels: Optional[Tuple[int, int, int]] = None,
) -> SmoothnessEstimate:
    """Estimate the Hölder exponent from the auxiliary log or the target bandit.

    Args:
        n_q: Horizon of the target bandit.
        n_p: Size of the auxiliary log.
        ap: Exponent bracket.
        env: Target bandit, pulled uniformly at random when the log is not larger.
        aux: Auxiliary log.
        rng: Generator for covariates, arms, rewards and grid subsampling.
        log_base: Base of the logarithm of b.
        levels: Levels overriding the planned ones.
    """
    plan = plan_estimation(n_q, n_p, ap, env.dim)
    n_arms = len(env.arms)
    if plan.use_source:
        s_p = min(plan.samples, len(aux))
        head, _ = aux.split(s_p)
        points, arms, rewards, s_q = head.points, head.arms, head.rewards, 0
    else:
        s_q, s_p = plan.samples, 0
        contexts = [env.sample_target_context(rng) for _ in range(s_q)]
        pulled = rng.integers(1, n_arms + 1, size=s_q)
        rewards = np.array([env.draw_reward(int(k), x, rng) for k, x in zip(pulled, contexts)])
        points = np.array(contexts, dtype=float).reshape(s_q, env.dim)
        arms = pulled
    return estimate_from_samples(
        points, arms, rewards, ap, plan.n, levels or plan.levels, rng, n_arms, log_base, s_q, s_p
    )


def adaptive_confidence_bound(
    tau: int, agg: ArmAggregate, b: BinId, beta_hat: float, c_beta_hi: float, n: int
) -> float:
    """Evaluate the adaptive bound 2 sqrt(2 log(n) / (tau + n_aux)) v 2 C_beta_hi |B|^beta_hat."""
    clamp = 2.0 * c_beta_hi * b.side**beta_hat
    total = tau + agg.n_aux
    if total == 0:
        return math.inf
    return max(2.0 * math.sqrt(2.0 * math.log(n) / total), clamp)


def adaptive_pull_limit(
    agg: ArmAggregate, b: BinId, beta_hat: float, c_beta_hi: float, n: int
) -> int:
    """Get the least tau with the adaptive bound at its clamp."""
    clamp = 2.0 * c_beta_hi * b.side**beta_hat
    return least_tau(
        lambda tau: adaptive_confidence_bound(tau, agg, b, beta_hat, c_beta_hi, n), clamp
    )


class AdaptiveBounds:
    """Adaptive bound and pull limit of bin `b`."""

    def __init__(self, b: BinId, beta_hat: float, c_beta_hi: float, n: int) -> None:
        self.bin = b
        self.beta_hat = beta_hat
        self.c_beta_hi = c_beta_hi
        self.n = n

    def bound(self, tau: int, agg: ArmAggregate) -> float:
        """Evaluate the adaptive bound."""
        return adaptive_confidence_bound(tau, agg, self.bin, self.beta_hat, self.c_beta_hi, self.n)

    def limit(self, agg: ArmAggregate) -> int:
        """Get the adaptive pull limit."""
        return adaptive_pull_limit(agg, self.bin, self.beta_hat, self.c_beta_hi, self.n)


class AdaptivePolicy(PartitionPolicy):
    """Transfer policy that estimates the Hölder exponent first.

    When the auxiliary log is larger than the horizon, the estimation eats a
    head of the log, at most a tenth of it, and only the rest feeds the tree. Otherwise the first
    steps pull uniformly random arms, and the tree starts afterwards with the
    whole log.

    Args:
        params: Exponent bracket and constant bounds.
        n_q: Horizon of the target bandit.
        aux: Auxiliary log.
        rng: Generator for the uniform pulls and grid subsampling.
        n_arms: Arm count.
        depth_cap: Deepest level a leaf may reach, None for `default_depth`.
        log_base: Base of the logarithm of b.
        beta_hat: Exponent to use instead of estimating one.
    """

    def __init__(
        self,
        params: AdaptiveParams,
        n_q: int,
        aux: AuxDataset,
        rng: np.random.Generator,
        n_arms: int = 2,
        depth_cap: Optional[int] = None,
        log_base: str = "e",
        beta_hat: Optional[float] = None,
    ) -> None:
        if n_q < 1:
            raise DomainError(f"Horizon must be positive, not {n_q}")
        if log_base not in LOG_BASES:
            raise DomainError(f"Log base must be one of {sorted(LOG_BASES)}, not {log_base}")
        dim = aux.dim
        if depth_cap is None:
            depth_cap = default_depth(n_q, params, dim)
        max_level = min(depth_cap, MAX_INDEX_BITS // dim)
        super().__init__(dim, n_arms, max_level)
        self.params = params
        self.n_q = n_q
        self.n_p = len(aux)
        self.n = max(n_q, self.n_p)
        self.log_base = log_base
        self.plan = plan_estimation(n_q, self.n_p, params, dim)
        self.estimate: Optional[SmoothnessEstimate] = None
        self._rng = rng
        self._warmup: List[Tuple[Tuple[float, ...], int, float]] = []
        self._aux_data = aux

        if beta_hat is not None:
            self._finish(SmoothnessEstimate(beta_hat, 0, 0), aux)
        elif self.plan.use_source:
            s_p = self.plan.samples
            head, tail = aux.split(s_p)
            self._finish(
                estimate_from_samples(
                    head.points,
                    head.arms,
                    head.rewards,
                    params,
                    self.n,
                    self.plan.levels,
                    rng,
                    n_arms,
                    log_base,
                    s_p=s_p,
                ),
                tail,
            )
        else:
            self._s_q = self.plan.samples
            _logger.debug(f"Pulling uniform arms for the first {self._s_q} steps")
            if self._s_q == 0:
                self._finish_warmup()

    def _finish(self, estimate: SmoothnessEstimate, aux: AuxDataset) -> None:
        self.estimate = estimate
        _logger.debug(
            f"Adaptive policy uses beta_hat={estimate.beta_hat:.4f} "
            f"after s_Q={estimate.s_q}, s_P={estimate.s_p}"
        )
        assert self.max_level is not None
        self._start(AuxIndex(aux, self.max_level))

    def _finish_warmup(self) -> None:
        if self._warmup:
            points = np.array([x for x, _, _ in self._warmup], dtype=float)
        else:
            points = np.empty((0, self.dim))
        arms = np.array([k for _, k, _ in self._warmup], dtype=np.int64)
        rewards = np.array([y for _, _, y in self._warmup], dtype=float)
        estimate = estimate_from_samples(
            points,
            arms,
            rewards,
            self.params,
            self.n,
            self.plan.levels,
            self._rng,
            self.n_arms,
            self.log_base,
            s_q=self._s_q,
        )
        self._warmup = []
        self._finish(estimate, self._aux_data)

    def _bounds(self, b: BinId) -> Bounds:
        assert self.estimate is not None
        return AdaptiveBounds(b, self.estimate.beta_hat, self.params.c_beta_hi, self.n)

    @property
    def warming_up(self) -> bool:
        """Check if the policy still pulls uniform arms for the estimation."""
        return self.estimate is None

    def select(self, x: Sequence[float]) -> int:
        """Choose the arm to pull at covariate `x`.

        Raises:
            DomainError: Raised if `x` lies outside the cube.
            PairingError: Raised if the previous selection was not observed.
        """
        if not self.warming_up:
            return super().select(x)
        x = tuple(float(v) for v in x)
        if self._pending is not None:
            raise PairingError("The previous selection awaits its reward")
        arm = int(self._rng.integers(1, self.n_arms + 1))
        self._pending = (x, arm, bin_of(0, x))
        return arm

    def observe(self, x: Sequence[float], arm: int, reward: float) -> None:
        """Record the reward of the preceding selection.

        Raises:
            PairingError: Raised if `x` and `arm` do not match the preceding selection.
        """
        if not self.warming_up:
            super().observe(x, arm, reward)
            return
        x = tuple(float(v) for v in x)
        if self._pending is None or self._pending[:2] != (x, arm):
            raise PairingError(f"Arm {arm} at {x} does not answer the preceding selection")
        self._pending = None
        self._warmup.append((x, arm, reward))
        self.t += 1
        if len(self._warmup) >= self._s_q:
            self._finish_warmup()


def piecewise_constant_projection(
    f: Callable[[Tuple[float, ...]], float], b: BinId, window: float, x: Sequence[float]
) -> float:
    """Project `f` onto constants over the window around `x` inside bin `b`.

    Under the uniform measure the projection is the mean of `f` over the
    intersection of the window and the bin.

    Raises:
        DomainError: Raised if `window` is not positive or the region is empty.
    """
    if window <= 0.0:
        raise DomainError(f"Window must be positive, not {window}")
    box = bin_box(b)
    ranges = [
        (max(lo, xi - window), min(hi, xi + window))
        for lo, hi, xi in zip(box.lower, box.upper, x)
    ]
    if any(hi <= lo for lo, hi in ranges):
        raise DomainError(f"Window of {window} around {tuple(x)} misses bin {b}")
    volume = math.prod(hi - lo for lo, hi in ranges)
    opts = {"epsabs": QUADRATURE_TOLERANCE, "epsrel": QUADRATURE_TOLERANCE}
    total, _ = integrate.nquad(lambda *u: f(u), ranges, opts=opts)
    return total / volume


def projection_deviation(
    f: Callable[[Tuple[float, ...]], float], b: BinId, window: float, x: Sequence[float]
) -> float:
    """Get |projection(x) - f(x)| for the piecewise-constant projection."""
    return abs(piecewise_constant_projection(f, b, window, x) - f(tuple(x)))
