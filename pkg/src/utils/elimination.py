# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Successive arm elimination inside a single bin.

A bin runs a static bandit: active arms are pulled round-robin until each
reaches its pull limit, arms whose upper confidence value drops below the
best lower confidence value are eliminated on the way, and once every active
arm is at its limit the bin plays greedily.
"""

import enum
import logging
import math
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from utils.environment import AuxDataset
from utils.errors import DomainError, PairingError
from utils.geometry import BinId, bin_indices, check_level, morton_codes, morton_range

_logger = logging.getLogger(__name__)

C_STAR_TOLERANCE = 1e-12
# Decimal digits used to settle log comparisons that land on an integer.
EXACT_LOG_PRECISION = 80


@dataclass(frozen=True)
class BoundParams:
    """Inputs of the oracle confidence bound.

    Attributes:
        beta: Hölder exponent.
        c_beta: Hölder constant.
        gamma: Transfer exponent.
        kappa: Exploration coefficient of the auxiliary log.
        n_q: Horizon of the target bandit.
        n_p: Size of the auxiliary log.
        dim: Covariate dimension.
    """

    beta: float
    c_beta: float
    gamma: float
    kappa: float
    n_q: int
    n_p: int
    dim: int = 2

    def __post_init__(self) -> None:
        """Validate the parameters."""
        if not 0.0 < self.beta <= 1.0:
            raise DomainError(f"Hölder exponent must lie in (0, 1], not {self.beta}")
        if self.c_beta <= 0.0:
            raise DomainError(f"Hölder constant must be positive, not {self.c_beta}")
        if self.gamma < 0.0:
            raise DomainError(f"Transfer exponent must be non-negative, not {self.gamma}")
        if not 0.0 <= self.kappa <= 1.0:
            raise DomainError(f"Exploration coefficient must lie in [0, 1], not {self.kappa}")
        if self.n_q < 1:
            raise DomainError(f"Horizon must be positive, not {self.n_q}")
        if self.n_p < 0:
            raise DomainError(f"Auxiliary sample count must be non-negative, not {self.n_p}")
        if self.dim < 1:
            raise DomainError(f"Dimension must be positive, not {self.dim}")


@dataclass
class ArmAggregate:
    """Combined auxiliary and target statistics of one arm in one bin.

    Attributes:
        n_aux: Auxiliary samples of the arm inside the bin.
        tau: Target pulls of the arm inside the bin.
        mean: Running mean over all n_aux + tau rewards.
        aux_mean: Mean of the auxiliary rewards alone.
    """

    n_aux: int = 0
    tau: int = 0
    mean: float = 0.0
    aux_mean: float = 0.0

    def fold(self, reward: float) -> None:
        """Fold one target reward into the running mean."""
        self.tau += 1
        self.mean += (reward - self.mean) / (self.n_aux + self.tau)


def log_plus(value: float) -> float:
    """Get log(value) v 1, natural log."""
    if value <= math.e:
        return 1.0
    return math.log(value)


def confidence_bound(tau: int, agg: ArmAggregate, b: BinId, p: BoundParams) -> float:
    """Evaluate the oracle confidence bound U_k(tau, B).

    Args:
        tau: Target pulls to evaluate the bound at.
        agg: Arm statistics; only `n_aux` is read.
        b: Bin the arm is played in.
        p: Problem parameters.

    Returns:
        float: The bound, infinite when `tau` and `n_aux` are both zero.
    """
    side = b.side
    clamp = 2.0 * p.c_beta * side**p.beta
    if tau == 0:
        if agg.n_aux == 0:
            return math.inf
        scale = max(
            p.n_q * side ** (p.dim + 2 * p.beta),
            p.kappa * p.n_p * side ** (p.dim + 2 * p.beta + p.gamma),
        )
        width = 2.0 * math.sqrt(2.0 / agg.n_aux * log_plus(scale))
    else:
        width = 2.0 * math.sqrt(2.0 / (tau + agg.n_aux) * log_plus(p.n_q * side**p.dim / tau))
    return max(width, clamp)


def least_tau(bound: Callable[[int], float], clamp: float) -> int:
    """Find the least tau with bound(tau) <= clamp.

    The bound must be non-increasing for tau >= 1 and reach the clamp.
    """
    if bound(0) <= clamp:
        return 0
    hi = 1
    while bound(hi) > clamp:
        hi *= 2
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if bound(mid) <= clamp:
            hi = mid
        else:
            lo = mid
    return hi


def pull_limit(agg: ArmAggregate, b: BinId, p: BoundParams) -> int:
    """Get the pull limit tau*: the least tau with U(tau) <= 2 C_beta |B|^beta."""
    clamp = 2.0 * p.c_beta * b.side**p.beta
    return least_tau(lambda tau: confidence_bound(tau, agg, b, p), clamp)


def c_star(c_beta: float, c_gamma: float, q_lo: float, n_arms: int) -> float:
    """Solve x log+(1/x) = c_3 / (2 c_2 K) for the constant c*.

    Here c_2 = 2 C_beta^-2 v 1 and c_3 = c_gamma q_lo.

    Raises:
        DomainError: Raised if an input is not positive.
    """
    for name, value in (("c_beta", c_beta), ("c_gamma", c_gamma), ("q_lo", q_lo)):
        if value <= 0.0:
            raise DomainError(f"{name} must be positive, not {value}")
    if n_arms < 1:
        raise DomainError(f"Arm count must be positive, not {n_arms}")

    c2 = max(2.0 / c_beta**2, 1.0)
    target = c_gamma * q_lo / (2.0 * c2 * n_arms)
    knee = 1.0 / math.e
    if target >= knee:
        return target
    return optimize.bisect(
        lambda x: x * math.log(1.0 / x) - target,
        np.finfo(float).tiny,
        knee,
        xtol=C_STAR_TOLERANCE,
    )


def _pow2_at_most(exponent: Fraction, value: Fraction) -> bool:
    """Decide 2^exponent <= value exactly for exponent >= 0 and value > 0."""
    if exponent.denominator == 1:
        return Fraction(2) ** exponent.numerator <= value
    # 2^(p/q) is irrational here, so it never equals a rational value.
    with localcontext() as ctx:
        ctx.prec = EXACT_LOG_PRECISION
        lhs = Decimal(exponent.numerator) / Decimal(exponent.denominator) * Decimal(2).ln()
        rhs = Decimal(value.numerator).ln() - Decimal(value.denominator).ln()
        return lhs <= rhs


def strict_ceiling_log2_ratio(value: Fraction, denominator: Fraction) -> int:
    """Get the least integer strictly greater than log2(value) / denominator."""
    approx = math.log2(value) / float(denominator)
    nearest = round(approx)
    if abs(approx - nearest) > 1e-9:
        return math.floor(approx) + 1
    # j <= log2(value) / denominator iff 2^(j * denominator) <= value.
    if _pow2_at_most(nearest * denominator, value):
        return nearest + 1
    return nearest


def max_depth(
    n_q: int, n_p: int, kappa: float, gamma: float, beta: float, dim: int, c_star_value: float
) -> int:
    """Get the depth cap l* of the partition tree.

    l* is the least integer strictly greater than
    log2(n_Q) / (d + 2 beta) v log2(c* kappa n_P) / (d + 2 beta + gamma). The
    source term is dropped when c* kappa n_P < 1.

    Raises:
        DomainError: Raised if `n_q` is not positive.
    """
    if n_q < 1:
        raise DomainError(f"Horizon must be positive, not {n_q}")
    spread = dim + 2 * Fraction(beta)
    depth = strict_ceiling_log2_ratio(Fraction(n_q), spread)
    source = Fraction(c_star_value) * Fraction(kappa) * n_p
    if source >= 1:
        depth = max(depth, strict_ceiling_log2_ratio(source, spread + Fraction(gamma)))
    return depth


def aux_bin_stats(data: AuxDataset, b: BinId, k: int) -> Tuple[int, float]:
    """Count and average the auxiliary rewards of arm `k` inside bin `b`.

    The mean is 0 when no sample qualifies.
    """
    if len(data) == 0:
        return 0, 0.0
    inside = np.all(bin_indices(b.level, data.points) == np.asarray(b.index) - 1, axis=1)
    mask = inside & (data.arms == k)
    count = int(mask.sum())
    if count == 0:
        return 0, 0.0
    return count, float(data.rewards[mask].mean())


class AuxIndex:
    """Auxiliary log sorted by Morton code for fast per-bin statistics.

    Every bin at a level up to `level` owns a contiguous range of codes, so a
    query costs two binary searches plus the mean over the matching samples.

    Args:
        data: The auxiliary log.
        level: Finest level that will be queried.
    """

    def __init__(self, data: AuxDataset, level: int) -> None:
        check_level(level, data.dim)
        self.level = level
        self._codes: Dict[int, np.ndarray] = {}
        self._rewards: Dict[int, np.ndarray] = {}
        codes = morton_codes(level, data.points) if len(data) else np.empty(0, dtype=np.uint64)
        for k in np.unique(data.arms):
            mask = data.arms == k
            order = np.argsort(codes[mask], kind="stable")
            self._codes[int(k)] = codes[mask][order]
            self._rewards[int(k)] = data.rewards[mask][order]
        _logger.debug(f"Indexed {len(data)} auxiliary samples at level {level}")

    def stats(self, b: BinId, k: int) -> Tuple[int, float]:
        """Count and average the auxiliary rewards of arm `k` inside bin `b`."""
        if k not in self._codes:
            return 0, 0.0
        lo, hi = morton_range(b, self.level)
        codes = self._codes[k]
        start = int(np.searchsorted(codes, np.uint64(lo), side="left"))
        stop = int(np.searchsorted(codes, np.uint64(hi), side="left"))
        if stop == start:
            return 0, 0.0
        return stop - start, float(self._rewards[k][start:stop].mean())


class Bounds(Protocol):
    """Confidence bound of one bin."""

    def bound(self, tau: int, agg: ArmAggregate) -> float:
        """Evaluate the bound after `tau` target pulls."""
        ...

    def limit(self, agg: ArmAggregate) -> int:
        """Get the pull limit."""
        ...


class OracleBounds:
    """Oracle bound U and pull limit tau* of bin `b`."""

    def __init__(self, b: BinId, params: BoundParams) -> None:
        self.bin = b
        self.params = params

    def bound(self, tau: int, agg: ArmAggregate) -> float:
        """Evaluate U(tau, B)."""
        return confidence_bound(tau, agg, self.bin, self.params)

    def limit(self, agg: ArmAggregate) -> int:
        """Get tau*."""
        return pull_limit(agg, self.bin, self.params)


class Phase(str, enum.Enum):
    """Phase of a bin bandit."""

    EXPLORATION = "exploration"
    GREEDY = "greedy"


class BinBanditState:
    """Elimination state machine of one bin.

    Args:
        b: The bin.
        arms: Active arms in increasing order.
        aggregates: Statistics of every arm.
        bounds: Confidence bound of the bin.
    """

    def __init__(
        self,
        b: BinId,
        arms: Sequence[int],
        aggregates: Dict[int, ArmAggregate],
        bounds: Bounds,
    ) -> None:
        self.bin = b
        self.active: List[int] = list(arms)
        self.aggregates = aggregates
        self.limits = {k: bounds.limit(aggregates[k]) for k in self.active}
        self.cursor = 0
        self._bounds = bounds
        self._pending: Optional[int] = None
        self.floor = self._lower_floor()
        self.phase = Phase.GREEDY if self.exhausted else Phase.EXPLORATION

    @property
    def exhausted(self) -> bool:
        """Check if every active arm reached its pull limit."""
        return all(self.aggregates[k].tau >= self.limits[k] for k in self.active)

    @property
    def pending(self) -> Optional[int]:
        """Arm awaiting its reward, if any."""
        return self._pending

    def bound(self, k: int) -> float:
        """Evaluate the current confidence bound of arm `k`."""
        agg = self.aggregates[k]
        return self._bounds.bound(agg.tau, agg)

    def _lower_floor(self) -> float:
        return max(self.aggregates[k].mean - self.bound(k) for k in self.active)

    def greedy_arm(self) -> int:
        """Get the active arm with the highest mean, lowest index on ties."""
        return max(self.active, key=lambda k: self.aggregates[k].mean)

    def _next_exploration_arm(self) -> Optional[int]:
        while not self.exhausted:
            while self.cursor < len(self.active):
                k = self.active[self.cursor]
                agg = self.aggregates[k]
                if agg.tau >= self.limits[k]:
                    self.cursor += 1
                    continue
                if agg.mean + self.bound(k) < self.floor:
                    del self.active[self.cursor]
                    _logger.debug(f"Eliminated arm {k} in bin {self.bin}")
                    continue
                self.cursor += 1
                return k
            self.cursor = 0
        return None

    def select(self) -> int:
        """Choose the next arm to pull.

        Raises:
            PairingError: Raised if the previous selection was not observed.
        """
        if self._pending is not None:
            raise PairingError(f"Arm {self._pending} in bin {self.bin} awaits its reward")
        arm = None
        if self.phase is Phase.EXPLORATION:
            arm = self._next_exploration_arm()
            if arm is None:
                self.phase = Phase.GREEDY
                _logger.debug(f"Bin {self.bin} turned greedy with arms {self.active}")
        if arm is None:
            arm = self.greedy_arm()
        self._pending = arm
        return arm

    def observe(self, arm: int, reward: float) -> None:
        """Fold the reward of the selected arm and refresh the floor.

        Raises:
            PairingError: Raised if `arm` is not the pending selection.
        """
        if arm not in self.active or arm != self._pending:
            raise PairingError(f"Arm {arm} was not selected in bin {self.bin}")
        self._pending = None
        self.aggregates[arm].fold(reward)
        self.floor = self._lower_floor()
        if self.phase is Phase.EXPLORATION and self.exhausted:
            self.phase = Phase.GREEDY
            _logger.debug(f"Bin {self.bin} turned greedy with arms {self.active}")

    def prune_with_aux(self) -> List[int]:
        """Get the arms that survive elimination on auxiliary data alone.

        Uses the auxiliary means with the bound at tau = 0.
        """
        zero = {k: self._bounds.bound(0, self.aggregates[k]) for k in self.active}
        floor = max(self.aggregates[k].aux_mean - zero[k] for k in self.active)
        return [k for k in self.active if self.aggregates[k].aux_mean + zero[k] >= floor]


AuxSource = Union[AuxDataset, AuxIndex]


def elim_init(
    b: BinId, arms: Sequence[int], data: AuxSource, bounds: Union[Bounds, BoundParams]
) -> BinBanditState:
    """Seed a bin bandit from the auxiliary log.

    Args:
        b: The bin.
        arms: Active arms.
        data: Auxiliary log, raw or indexed.
        bounds: Confidence bound of the bin, or oracle parameters to build it from.

    Raises:
        DomainError: Raised if `arms` is empty.
    """
    if not arms:
        raise DomainError(f"Bin {b} needs at least one arm")
    if isinstance(bounds, BoundParams):
        bounds = OracleBounds(b, bounds)
    aggregates = {}
    for k in sorted(arms):
        if isinstance(data, AuxIndex):
            count, mean = data.stats(b, k)
        else:
            count, mean = aux_bin_stats(data, b, k)
        aggregates[k] = ArmAggregate(n_aux=count, mean=mean, aux_mean=mean)
    return BinBanditState(b, sorted(arms), aggregates, bounds)
