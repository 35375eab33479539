# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Synthetic covariate-shift bandit environments.

Arm 1 pays a flat 1/2 everywhere. Every other arm adds signed bumps of
height 1/2 centred at {1/4, 3/4}^d. Target covariates are uniform on the
cube; source covariates concentrate away from the cube centre with density
proportional to ||x - 1/2||_inf^gamma.
"""

import abc
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np
from scipy import integrate

from utils.errors import DomainError

_logger = logging.getLogger(__name__)

BUMP_RADIUS = 0.25
BUMP_SCALE = 4.0
PROBABILITY_TOLERANCE = 1e-9

Point = Tuple[float, ...]


def phi(beta: float, u: float) -> float:
    """Evaluate the bump profile (1 - u)^beta on [0, 1], zero above."""
    if u > 1.0:
        return 0.0
    return (1.0 - u) ** beta


def holder_constant(beta: float) -> float:
    """Hölder constant of a single bump 1/2 phi(4 ||x - c||_inf)."""
    return 0.5 * BUMP_SCALE**beta


def global_holder_constant(beta: float) -> float:
    """Hölder constant of a whole bump sum.

    Neighbouring bumps with opposite signs push the constant above the
    single-bump value: the sum is 2^beta-Hölder.
    """
    return 2.0**beta


def bump_centers(dim: int) -> Tuple[Point, ...]:
    """Get the bump centres {1/4, 3/4}^d."""
    return tuple(itertools.product((0.25, 0.75), repeat=dim))


@dataclass(frozen=True)
class RewardSpec:
    """Bump reward functions.

    Attributes:
        dim: Covariate dimension d.
        n_arms: Arm count K.
        beta: Hölder exponent in (0, 1].
        sigma: Standard deviation of the Gaussian reward noise.
        centers: Bump centres c_i.
        signs: Bump weights omega_i for every arm k >= 2, one row per arm.
    """

    dim: int
    n_arms: int
    beta: float
    sigma: float
    centers: Tuple[Point, ...]
    signs: Tuple[Tuple[float, ...], ...]

    def __post_init__(self) -> None:
        """Validate the construction."""
        if self.dim < 1:
            raise DomainError(f"Dimension must be positive, not {self.dim}")
        if self.n_arms < 1:
            raise DomainError(f"Arm count must be positive, not {self.n_arms}")
        if not 0.0 < self.beta <= 1.0:
            raise DomainError(f"Hölder exponent must lie in (0, 1], not {self.beta}")
        if self.sigma < 0.0:
            raise DomainError(f"Noise level must be non-negative, not {self.sigma}")
        if len(self.signs) != self.n_arms - 1:
            raise DomainError(f"Expected {self.n_arms - 1} sign rows, got {len(self.signs)}")
        for row in self.signs:
            if len(row) != len(self.centers):
                raise DomainError("Every sign row needs one weight per bump centre")
            if any(abs(w) > 1.0 for w in row):
                raise DomainError("Bump weights must satisfy |omega| <= 1")
        for c in self.centers:
            if len(c) != self.dim or any(ci < BUMP_RADIUS or ci > 1.0 - BUMP_RADIUS for ci in c):
                raise DomainError(f"Bump centred at {c} does not fit inside the cube")
        for a, b in itertools.combinations(self.centers, 2):
            if max(abs(ai - bi) for ai, bi in zip(a, b)) < 2 * BUMP_RADIUS:
                raise DomainError(f"Bumps centred at {a} and {b} overlap")

    @property
    def arms(self) -> range:
        """Arms 1..K."""
        return range(1, self.n_arms + 1)

    @property
    def c_beta(self) -> float:
        """Hölder constant handed to the policies."""
        return holder_constant(self.beta)


@dataclass(frozen=True)
class SourceSpec:
    """Source bandit that collected the auxiliary data.

    Attributes:
        gamma: Transfer exponent, non-negative.
        mu: Arm-pull probabilities, independent of the covariate.
        n_p: Number of auxiliary samples.
    """

    gamma: float
    mu: Tuple[float, ...]
    n_p: int

    def __post_init__(self) -> None:
        """Validate the source bandit."""
        if self.gamma < 0.0:
            raise DomainError(f"Transfer exponent must be non-negative, not {self.gamma}")
        if self.n_p < 0:
            raise DomainError(f"Auxiliary sample count must be non-negative, not {self.n_p}")
        check_probabilities(self.mu)


@dataclass(frozen=True)
class ProblemParams:
    """Regularity constants of a problem instance."""

    alpha: float
    c_alpha: float
    c_beta: float
    q_lo: float
    q_hi: float
    c_gamma: float
    kappa: float

    def __post_init__(self) -> None:
        """Validate the constants."""
        if self.alpha < 0.0:
            raise DomainError(f"Margin exponent must be non-negative, not {self.alpha}")
        if not 0.0 < self.q_lo <= self.q_hi:
            raise DomainError("Density bounds must satisfy 0 < q_lo <= q_hi")
        if not 0.0 < self.c_gamma <= 1.0:
            raise DomainError(f"Transfer constant must lie in (0, 1], not {self.c_gamma}")
        if not 0.0 <= self.kappa <= 1.0:
            raise DomainError(f"Exploration coefficient must lie in [0, 1], not {self.kappa}")


@dataclass(frozen=True)
class AuxSample:
    """One record of the auxiliary log."""

    x: Point
    arm: int
    reward: float


class AuxDataset:
    """Auxiliary log D^P stored column-wise.

    Args:
        points: Covariates, shape (n, d).
        arms: Pulled arms, shape (n,).
        rewards: Observed rewards, shape (n,).
    """

    def __init__(self, points: np.ndarray, arms: np.ndarray, rewards: np.ndarray) -> None:
        self.points = np.asarray(points, dtype=float)
        self.arms = np.asarray(arms, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=float)
        if self.points.ndim != 2:
            raise DomainError("Auxiliary covariates must form an (n, d) array")
        if not len(self.points) == len(self.arms) == len(self.rewards):
            raise DomainError("Auxiliary columns differ in length")

    @classmethod
    def empty(cls, dim: int) -> "AuxDataset":
        """Create a dataset with no samples."""
        return cls(np.empty((0, dim)), np.empty(0, dtype=np.int64), np.empty(0))

    @classmethod
    def from_samples(cls, samples: Sequence[AuxSample], dim: int) -> "AuxDataset":
        """Create a dataset from individual records."""
        if not samples:
            return cls.empty(dim)
        return cls(
            np.array([s.x for s in samples], dtype=float),
            np.array([s.arm for s in samples], dtype=np.int64),
            np.array([s.reward for s in samples], dtype=float),
        )

    @property
    def dim(self) -> int:
        """Covariate dimension."""
        return self.points.shape[1]

    def __len__(self) -> int:
        """Get the number of samples."""
        return len(self.arms)

    def __iter__(self) -> Iterator[AuxSample]:
        """Iterate over the records in collection order."""
        for x, arm, reward in zip(self.points, self.arms, self.rewards):
            yield AuxSample(tuple(float(v) for v in x), int(arm), float(reward))

    def split(self, size: int) -> Tuple["AuxDataset", "AuxDataset"]:
        """Split into the first `size` samples and the rest."""
        return (
            AuxDataset(self.points[:size], self.arms[:size], self.rewards[:size]),
            AuxDataset(self.points[size:], self.arms[size:], self.rewards[size:]),
        )


def check_probabilities(mu: Sequence[float]) -> None:
    """Check that `mu` is a probability vector.

    Raises:
        DomainError: Raised if an entry is negative or the entries do not sum to 1.
    """
    if len(mu) == 0:
        raise DomainError("Arm distribution must not be empty")
    if any(m < 0.0 for m in mu):
        raise DomainError(f"Arm probabilities must be non-negative, got {list(mu)}")
    if abs(math.fsum(mu) - 1.0) > PROBABILITY_TOLERANCE:
        raise DomainError(f"Arm probabilities must sum to 1, got {list(mu)}")


def exploration_coefficient(mu: Sequence[float]) -> float:
    """Get kappa = K min_k mu(k) of a state-independent arm distribution."""
    check_probabilities(mu)
    return len(mu) * min(mu)


def make_reward_spec(
    beta: float, sigma: float, rng: np.random.Generator, dim: int = 2, n_arms: int = 2
) -> RewardSpec:
    """Build bump rewards with signs drawn uniformly from {-1, +1}.

    Args:
        beta: Hölder exponent.
        sigma: Reward noise standard deviation.
        rng: Generator drawing the bump signs.
        dim: Covariate dimension.
        n_arms: Arm count.
    """
    centers = bump_centers(dim)
    draws = rng.choice((-1.0, 1.0), size=(n_arms - 1, len(centers)))
    signs = tuple(tuple(float(w) for w in row) for row in draws)
    _logger.debug(f"Drew bump signs {signs}")
    return RewardSpec(dim, n_arms, beta, sigma, centers, signs)


def _check_arm(spec: RewardSpec, k: int) -> None:
    if not 1 <= k <= spec.n_arms:
        raise DomainError(f"Arm {k} outside [1, {spec.n_arms}]")


def eval_reward(spec: RewardSpec, k: int, x: Sequence[float]) -> float:
    """Evaluate the mean reward f_k(x).

    Raises:
        DomainError: Raised if `k` is not an arm.
    """
    _check_arm(spec, k)
    if k == 1:
        return 0.5
    total = 0.0
    for w, c in zip(spec.signs[k - 2], spec.centers):
        u = BUMP_SCALE * max(abs(xi - ci) for xi, ci in zip(x, c))
        total += w * phi(spec.beta, u)
    return 0.5 + 0.5 * total


def mean_rewards(spec: RewardSpec, arms: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Vectorized `eval_reward` over paired arrays of arms and points."""
    arms = np.asarray(arms, dtype=np.int64)
    points = np.asarray(points, dtype=float)
    if arms.size and (arms.min() < 1 or arms.max() > spec.n_arms):
        raise DomainError(f"Arms outside [1, {spec.n_arms}]")
    signs = np.asarray(spec.signs, dtype=float).reshape(spec.n_arms - 1, len(spec.centers))
    bumped = arms >= 2
    values = np.full(len(arms), 0.5)
    for i, c in enumerate(spec.centers):
        u = BUMP_SCALE * np.max(np.abs(points - np.asarray(c)), axis=1)
        bump = np.where(u <= 1.0, np.clip(1.0 - u, 0.0, None) ** spec.beta, 0.0)
        weights = np.zeros(len(arms))
        weights[bumped] = signs[arms[bumped] - 2, i]
        values += 0.5 * weights * bump
    return values


def draw_reward(spec: RewardSpec, k: int, x: Sequence[float], rng: np.random.Generator) -> float:
    """Draw a Gaussian reward around f_k(x), unclipped."""
    mean = eval_reward(spec, k, x)
    if spec.sigma == 0.0:
        return mean
    return mean + spec.sigma * float(rng.standard_normal())


def oracle_gap(spec: RewardSpec, x: Sequence[float]) -> Tuple[float, float, int]:
    """Get the best mean, the second best mean and the best arm at `x`.

    The second best mean is the largest value strictly below the best, or the
    best itself when all arms tie. The best arm breaks ties by lowest index.
    """
    values = [eval_reward(spec, k, x) for k in spec.arms]
    f_first = max(values)
    best_arm = values.index(f_first) + 1
    lower = [v for v in values if v < f_first]
    f_second = max(lower) if lower else f_first
    return f_first, f_second, best_arm


def sample_target_context(rng: np.random.Generator, dim: int = 2) -> Point:
    """Draw a covariate uniformly from the cube."""
    return tuple(float(v) for v in rng.random(dim))


def sample_source_contexts(
    rng: np.random.Generator, gamma: float, size: int, dim: int = 2
) -> np.ndarray:
    """Draw source covariates with density proportional to ||x - 1/2||_inf^gamma.

    The radius r = ||x - 1/2||_inf has CDF (2r)^(gamma + d) on [0, 1/2] and is
    drawn by inversion; the point is then uniform on the l_inf sphere of that
    radius: one of the 2d faces is picked uniformly and the remaining
    coordinates are uniform on the face.

    Raises:
        DomainError: Raised if `gamma` is negative.
    """
    if gamma < 0.0:
        raise DomainError(f"Transfer exponent must be non-negative, not {gamma}")
    radius = 0.5 * rng.random(size) ** (1.0 / (gamma + dim))
    face = rng.integers(0, 2 * dim, size=size)
    offsets = rng.uniform(-1.0, 1.0, size=(size, dim)) * radius[:, None]
    rows = np.arange(size)
    offsets[rows, face // 2] = np.where(face % 2 == 0, -radius, radius)
    return np.clip(0.5 + offsets, 0.0, 1.0)


def sample_source_context(rng: np.random.Generator, gamma: float, dim: int = 2) -> Point:
    """Draw a single source covariate, see `sample_source_contexts`."""
    return tuple(float(v) for v in sample_source_contexts(rng, gamma, 1, dim)[0])


def source_density(x: Sequence[float], gamma: float) -> float:
    """Evaluate the normalized source density at `x`."""
    dim = len(x)
    r = max(abs(xi - 0.5) for xi in x)
    return (gamma + dim) * 2.0**gamma / dim * r**gamma


def source_ball_mass(x: Sequence[float], r: float, gamma: float) -> float:
    """Integrate the source density over the l_inf ball B(x, r) inside the cube."""
    ranges = [(max(0.0, xi - r), min(1.0, xi + r)) for xi in x]
    if any(lo >= hi for lo, hi in ranges):
        return 0.0
    # Breakpoints at the kink of the l_inf norm keep the quadrature accurate.
    opts = [{"points": [0.5]} if lo < 0.5 < hi else {} for lo, hi in ranges]
    mass, _ = integrate.nquad(lambda *u: source_density(u, gamma), ranges, opts=opts)
    return mass


def target_ball_mass(x: Sequence[float], r: float) -> float:
    """Get the uniform mass of the l_inf ball B(x, r) inside the cube."""
    return math.prod(max(0.0, min(1.0, xi + r) - max(0.0, xi - r)) for xi in x)


def generate_aux_dataset(
    spec: RewardSpec, src: SourceSpec, rng: np.random.Generator
) -> AuxDataset:
    """Collect `n_p` i.i.d. records from the source bandit.

    Covariates follow the source density, arms follow `mu` and rewards follow
    the target reward functions plus Gaussian noise.
    """
    if len(src.mu) != spec.n_arms:
        raise DomainError(f"Arm distribution has {len(src.mu)} entries for {spec.n_arms} arms")
    if src.n_p == 0:
        return AuxDataset.empty(spec.dim)
    points = sample_source_contexts(rng, src.gamma, src.n_p, spec.dim)
    arms = rng.choice(spec.n_arms, size=src.n_p, p=np.asarray(src.mu)) + 1
    rewards = mean_rewards(spec, arms, points)
    if spec.sigma > 0.0:
        rewards = rewards + spec.sigma * rng.standard_normal(src.n_p)
    _logger.debug(f"Generated {src.n_p} auxiliary samples with gamma={src.gamma}")
    return AuxDataset(points, arms, rewards)


def margin_mass(env: "Environment", delta: float, n: int, rng: np.random.Generator) -> float:
    """Estimate Q_X(0 < f_(1) - f_(2) <= delta) from `n` target covariates."""
    hits = 0
    for _ in range(n):
        f_first, f_second, _ = env.oracle_gap(env.sample_target_context(rng))
        if 0.0 < f_first - f_second <= delta:
            hits += 1
    return hits / n


class Environment(abc.ABC):
    """Contextual bandit the harness can simulate."""

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        """Covariate dimension."""

    @property
    @abc.abstractmethod
    def arms(self) -> range:
        """Arms 1..K."""

    @abc.abstractmethod
    def sample_target_context(self, rng: np.random.Generator) -> Point:
        """Draw a covariate of the target bandit."""

    @abc.abstractmethod
    def mean_reward(self, k: int, x: Sequence[float]) -> float:
        """Get the mean reward f_k(x)."""

    @abc.abstractmethod
    def draw_reward(self, k: int, x: Sequence[float], rng: np.random.Generator) -> float:
        """Draw a noisy reward of arm `k` at `x`."""

    @abc.abstractmethod
    def generate_aux_dataset(self, rng: np.random.Generator) -> AuxDataset:
        """Collect the auxiliary log of the source bandit."""

    def oracle_gap(self, x: Sequence[float]) -> Tuple[float, float, int]:
        """Get the best mean, the second best mean and the best arm at `x`."""
        values = [self.mean_reward(k, x) for k in self.arms]
        f_first = max(values)
        lower = [v for v in values if v < f_first]
        return f_first, max(lower) if lower else f_first, values.index(f_first) + 1


class BumpEnvironment(Environment):
    """Bump rewards with a uniform target and a polynomially shifted source.

    Args:
        reward: Reward functions and noise.
        source: Source bandit collecting the auxiliary log.
    """

    def __init__(self, reward: RewardSpec, source: SourceSpec) -> None:
        if len(source.mu) != reward.n_arms:
            raise DomainError(
                f"Arm distribution has {len(source.mu)} entries for {reward.n_arms} arms"
            )
        self.reward = reward
        self.source = source

    @property
    def dim(self) -> int:
        """Covariate dimension."""
        return self.reward.dim

    @property
    def arms(self) -> range:
        """Arms 1..K."""
        return self.reward.arms

    def sample_target_context(self, rng: np.random.Generator) -> Point:
        """Draw a uniform covariate."""
        return sample_target_context(rng, self.dim)

    def mean_reward(self, k: int, x: Sequence[float]) -> float:
        """Get the mean reward f_k(x)."""
        return eval_reward(self.reward, k, x)

    def draw_reward(self, k: int, x: Sequence[float], rng: np.random.Generator) -> float:
        """Draw a Gaussian reward around f_k(x)."""
        return draw_reward(self.reward, k, x, rng)

    def generate_aux_dataset(self, rng: np.random.Generator) -> AuxDataset:
        """Collect the auxiliary log of the source bandit."""
        return generate_aux_dataset(self.reward, self.source, rng)

    def oracle_gap(self, x: Sequence[float]) -> Tuple[float, float, int]:
        """Get the best mean, the second best mean and the best arm at `x`."""
        return oracle_gap(self.reward, x)
