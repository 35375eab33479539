#!/usr/bin/env python3
# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Test the synthetic bandit environments."""

import math
import unittest

import numpy as np
from scipy import stats

from utils.environment import (
    AuxDataset,
    AuxSample,
    BumpEnvironment,
    RewardSpec,
    SourceSpec,
    bump_centers,
    check_probabilities,
    draw_reward,
    eval_reward,
    exploration_coefficient,
    generate_aux_dataset,
    global_holder_constant,
    holder_constant,
    make_reward_spec,
    margin_mass,
    mean_rewards,
    oracle_gap,
    phi,
    sample_source_context,
    sample_source_contexts,
    sample_target_context,
    source_ball_mass,
    source_density,
    target_ball_mass,
)
from utils.errors import DomainError


def _spec(signs=(1.0, -1.0, 1.0, -1.0), beta: float = 0.8, sigma: float = 0.05) -> RewardSpec:
    return RewardSpec(2, 2, beta, sigma, bump_centers(2), (tuple(signs),))


def _radius_cdf(r: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(2.0 * r, 0.0, 1.0) ** (gamma + 2.0)


def _rejection_radii(rng: np.random.Generator, gamma: float, size: int) -> np.ndarray:
    """Draw source radii by thinning uniform points with acceptance (2r)^gamma."""
    points = rng.random((size, 2))
    radii = np.max(np.abs(points - 0.5), axis=1)
    keep = rng.random(size) <= (2.0 * radii) ** gamma
    return radii[keep]


class TestRewards(unittest.TestCase):
    """Test the bump reward functions."""

    def test_phi(self) -> None:
        """Test the bump profile."""
        self.assertEqual(phi(0.8, 1.2), 0.0)
        self.assertEqual(phi(0.8, 0.0), 1.0)
        self.assertAlmostEqual(phi(0.5, 0.75), 0.5)

    def test_eval_reward(self) -> None:
        """Test mean rewards on documented points."""
        spec = _spec()
        cases = [
            (1, (0.25, 0.25), 0.5),
            (2, (0.25, 0.25), 1.0),
            (2, (0.25, 0.75), 0.0),
            (2, (0.5, 0.5), 0.5),
            (2, (0.125, 0.25), 0.5 + 0.5 * 0.5**0.8),
        ]
        for k, x, expected in cases:
            with self.subTest(k=k, x=x):
                self.assertAlmostEqual(eval_reward(spec, k, x), expected)
        for k in (0, 3):
            with self.subTest(k=k), self.assertRaises(DomainError):
                eval_reward(spec, k, (0.5, 0.5))

    def test_mean_rewards_vectorized(self) -> None:
        """Test that the vectorized rewards agree with `eval_reward`."""
        rng = np.random.default_rng(3)
        spec = make_reward_spec(0.6, 0.05, rng, dim=2, n_arms=3)
        points = rng.random((300, 2))
        arms = rng.integers(1, 4, size=300)
        values = mean_rewards(spec, arms, points)
        for k, x, v in zip(arms, points, values):
            self.assertAlmostEqual(v, eval_reward(spec, int(k), tuple(x)), places=12)
        with self.assertRaises(DomainError):
            mean_rewards(spec, np.array([4]), np.array([[0.5, 0.5]]))

    def test_single_arm(self) -> None:
        """Test that a single-arm bandit pays a flat 1/2."""
        spec = RewardSpec(2, 1, 0.8, 0.0, bump_centers(2), ())
        points = np.random.default_rng(1).random((2, 2))
        self.assertEqual(list(mean_rewards(spec, np.array([1, 1]), points)), [0.5] * 2)

    def test_invalid_spec(self) -> None:
        """Test that malformed reward specs are rejected."""
        cases = [
            {"beta": 0.0},
            {"beta": 1.5},
            {"sigma": -0.1},
            {"signs": (2.0, 0.0, 0.0, 0.0)},
            {"signs": (1.0, 1.0)},
        ]
        for kwargs in cases:
            with self.subTest(**{k: str(v) for k, v in kwargs.items()}):
                with self.assertRaises(DomainError):
                    _spec(**kwargs)
        with self.assertRaises(DomainError):
            RewardSpec(2, 2, 0.8, 0.0, ((0.25, 0.25), (0.5, 0.5)), ((1.0, 1.0),))
        with self.assertRaises(DomainError):
            RewardSpec(1, 2, 0.8, 0.0, ((0.1,),), ((1.0,),))

    def test_make_reward_spec(self) -> None:
        """Test that bump signs are drawn from {-1, +1}."""
        rng = np.random.default_rng(11)
        spec = make_reward_spec(0.8, 0.05, rng, dim=3, n_arms=4)
        self.assertEqual(len(spec.centers), 8)
        self.assertEqual(len(spec.signs), 3)
        self.assertTrue(all(w in (-1.0, 1.0) for row in spec.signs for w in row))
        self.assertEqual(spec.c_beta, holder_constant(0.8))

    def test_holder_within_bump(self) -> None:
        """Test the single-bump Hölder constant on pairs inside one bump."""
        rng = np.random.default_rng(5)
        for beta in (0.3, 0.8, 1.0):
            spec = _spec(beta=beta)
            for c in spec.centers:
                for _ in range(300):
                    x = tuple(np.asarray(c) + rng.uniform(-0.25, 0.25, size=2))
                    y = tuple(np.asarray(c) + rng.uniform(-0.25, 0.25, size=2))
                    gap = abs(eval_reward(spec, 2, x) - eval_reward(spec, 2, y))
                    dist = max(abs(a - b) for a, b in zip(x, y))
                    with self.subTest(beta=beta, x=x, y=y):
                        self.assertLessEqual(gap, holder_constant(beta) * dist**beta + 1e-12)

    def test_holder_global(self) -> None:
        """Test the Hölder constant of the whole bump sum."""
        rng = np.random.default_rng(6)
        for beta in (0.5, 0.8):
            spec = _spec(beta=beta)
            x, y = rng.random((2000, 2)), rng.random((2000, 2))
            arms = np.full(2000, 2)
            gap = np.abs(mean_rewards(spec, arms, x) - mean_rewards(spec, arms, y))
            dist = np.max(np.abs(x - y), axis=1)
            self.assertTrue(np.all(gap <= global_holder_constant(beta) * dist**beta + 1e-12))
        # Opposite bump peaks attain the global constant.
        spec = _spec(beta=0.8)
        gap = eval_reward(spec, 2, (0.25, 0.25)) - eval_reward(spec, 2, (0.25, 0.75))
        self.assertAlmostEqual(gap, global_holder_constant(0.8) * 0.5**0.8)

    def test_draw_reward(self) -> None:
        """Test the Gaussian reward noise."""
        x = (0.3, 0.2)
        noiseless = _spec(sigma=0.0)
        rng = np.random.default_rng(0)
        self.assertEqual(draw_reward(noiseless, 2, x, rng), eval_reward(noiseless, 2, x))

        spec = _spec(sigma=0.05)
        draws = np.array([draw_reward(spec, 2, x, rng) for _ in range(100_000)])
        error = abs(draws.mean() - eval_reward(spec, 2, x))
        self.assertLessEqual(error, 3 * 0.05 / math.sqrt(1e5))
        self.assertAlmostEqual(draws.std(ddof=1), 0.05, delta=0.002)

    def test_oracle_gap(self) -> None:
        """Test the top-two gap and the best arm."""
        spec = _spec()
        self.assertEqual(oracle_gap(spec, (0.5, 0.5)), (0.5, 0.5, 1))
        f_first, f_second, best = oracle_gap(spec, (0.25, 0.25))
        self.assertEqual(best, 2)
        self.assertAlmostEqual(f_first - f_second, 0.5)
        self.assertEqual(oracle_gap(spec, (0.25, 0.75))[2], 1)

        dominated = _spec(signs=(-1.0,) * 4)
        rng = np.random.default_rng(9)
        for _ in range(1000):
            self.assertEqual(oracle_gap(dominated, sample_target_context(rng))[2], 1)

        env = BumpEnvironment(spec, SourceSpec(1.0, (0.5, 0.5), 0))
        for x in rng.random((50, 2)):
            self.assertEqual(env.oracle_gap(tuple(x)), oracle_gap(spec, tuple(x)))


class TestSamplers(unittest.TestCase):
    """Test the covariate samplers."""

    def setUp(self) -> None:
        self.rng = np.random.default_rng(2024)

    def test_target_context(self) -> None:
        """Test uniform moments and the KS distance of target covariates."""
        points = np.array([sample_target_context(self.rng) for _ in range(100_000)])
        for axis in range(2):
            with self.subTest(axis=axis):
                self.assertAlmostEqual(points[:, axis].mean(), 0.5, delta=0.005)
                self.assertAlmostEqual(points[:, axis].var(), 1 / 12, delta=0.002)
                self.assertLessEqual(stats.kstest(points[:, axis], "uniform").statistic, 0.01)

    def test_source_uniform_at_zero(self) -> None:
        """Test that a zero transfer exponent gives uniform covariates."""
        points = sample_source_contexts(self.rng, 0.0, 100_000)
        for axis in range(2):
            with self.subTest(axis=axis):
                self.assertLessEqual(stats.kstest(points[:, axis], "uniform").statistic, 0.01)

    def test_source_radius(self) -> None:
        """Test the radius law (2r)^(gamma + 2) against inversion and thinning."""
        for gamma in (0.0, 1.0, 2.0):
            points = sample_source_contexts(self.rng, gamma, 100_000)
            radii = np.max(np.abs(points - 0.5), axis=1)
            thinned = _rejection_radii(self.rng, gamma, 200_000)
            with self.subTest(gamma=gamma):
                self.assertTrue(np.all((points >= 0.0) & (points <= 1.0)))
                fit = stats.kstest(radii, _radius_cdf, args=(gamma,))
                self.assertLessEqual(fit.statistic, 0.01)
                self.assertLessEqual(stats.ks_2samp(radii, thinned).statistic, 0.015)

    def test_source_radius_median(self) -> None:
        """Test the median radius at gamma = 1."""
        points = sample_source_contexts(self.rng, 1.0, 100_000)
        median = float(np.median(np.max(np.abs(points - 0.5), axis=1)))
        self.assertAlmostEqual(median, 0.5 * 0.5 ** (1 / 3), delta=0.005)

    def test_source_bad_gamma(self) -> None:
        """Test that a negative transfer exponent is rejected."""
        with self.assertRaises(DomainError):
            sample_source_contexts(self.rng, -0.5, 10)
        with self.assertRaises(DomainError):
            sample_source_context(self.rng, -0.5)
        self.assertEqual(len(sample_source_context(self.rng, 1.0, dim=3)), 3)

    def test_ball_mass(self) -> None:
        """Test the transfer exponent condition on l_inf balls."""
        for gamma in (0.5, 1.0, 2.0):
            for r in (0.05, 0.2):
                with self.subTest(gamma=gamma, r=r):
                    # A ball around the centre has source mass (2r)^(gamma + 2).
                    self.assertAlmostEqual(
                        source_ball_mass((0.5, 0.5), r, gamma), (2 * r) ** (gamma + 2), places=6
                    )
                    for x in [(0.5, 0.5), (0.3, 0.6), (0.9, 0.1), (0.0, 1.0)]:
                        self.assertGreaterEqual(
                            source_ball_mass(x, r, gamma), r**gamma * target_ball_mass(x, r)
                        )
        self.assertEqual(source_density((0.5, 0.5), 1.0), 0.0)
        self.assertAlmostEqual(source_density((0.0, 0.7), 1.0), 1.5)
        self.assertAlmostEqual(source_density((0.25,), 2.0), 0.75)
        self.assertAlmostEqual(target_ball_mass((0.0, 0.5), 0.1), 0.1 * 0.2)
        self.assertAlmostEqual(source_ball_mass((0.5, 0.5), 0.5, 1.0), 1.0, places=6)

    def test_margin_mass(self) -> None:
        """Test the estimated margin mass against its closed form."""
        env = BumpEnvironment(_spec(beta=1.0, sigma=0.0), SourceSpec(1.0, (0.5, 0.5), 0))
        delta = 0.1
        expected = 1.0 - (1.0 - 2 * delta) ** 2
        self.assertAlmostEqual(margin_mass(env, delta, 10_000, self.rng), expected, delta=0.02)


class TestAuxiliaryData(unittest.TestCase):
    """Test the auxiliary log."""

    def setUp(self) -> None:
        self.rng = np.random.default_rng(17)

    def test_exploration_coefficient(self) -> None:
        """Test kappa on documented arm distributions."""
        cases = [((1 / 3,) * 3, 1.0), ((0.5, 0.5), 1.0), ((0.1, 0.9), 0.2), ((1.0, 0.0), 0.0)]
        for mu, expected in cases:
            with self.subTest(mu=mu):
                self.assertAlmostEqual(exploration_coefficient(mu), expected)
        for mu in [(), (0.5, 0.6), (-0.1, 1.1)]:
            with self.subTest(mu=mu), self.assertRaises(DomainError):
                check_probabilities(mu)

    def test_empty_log(self) -> None:
        """Test that no auxiliary samples give an empty log."""
        aux = generate_aux_dataset(_spec(), SourceSpec(1.0, (0.5, 0.5), 0), self.rng)
        self.assertEqual(len(aux), 0)
        self.assertEqual(aux.dim, 2)
        self.assertEqual(list(aux), [])

    def test_generate(self) -> None:
        """Test arm frequencies, covariates and noiseless rewards of the log."""
        spec = _spec(sigma=0.0)
        aux = generate_aux_dataset(spec, SourceSpec(1.0, (0.1, 0.9), 10_000), self.rng)
        self.assertEqual(len(aux), 10_000)
        self.assertAlmostEqual(float(np.mean(aux.arms == 1)), 0.1, delta=0.015)
        self.assertTrue(set(np.unique(aux.arms)) <= {1, 2})
        self.assertTrue(np.all((aux.points >= 0.0) & (aux.points <= 1.0)))
        for sample in list(aux)[:200]:
            expected = eval_reward(spec, sample.arm, sample.x)
            self.assertAlmostEqual(sample.reward, expected, places=12)
        with self.assertRaises(DomainError):
            generate_aux_dataset(spec, SourceSpec(1.0, (0.2, 0.3, 0.5), 5), self.rng)

    def test_from_samples_and_split(self) -> None:
        """Test building a log from records and splitting it."""
        samples = [
            AuxSample((0.1, 0.2), 1, 0.3),
            AuxSample((0.4, 0.5), 2, 0.6),
            AuxSample((0.7, 0.8), 1, 0.9),
        ]
        aux = AuxDataset.from_samples(samples, 2)
        self.assertEqual(list(aux), samples)
        head, tail = aux.split(1)
        self.assertEqual(list(head), samples[:1])
        self.assertEqual(list(tail), samples[1:])
        self.assertEqual(len(AuxDataset.from_samples([], 3)), 0)
        with self.assertRaises(DomainError):
            AuxDataset(np.zeros((2, 2)), np.zeros(3), np.zeros(2))

    def test_environment_wiring(self) -> None:
        """Test that the bump environment forwards to the reward model."""
        spec = _spec()
        env = BumpEnvironment(spec, SourceSpec(1.0, (0.5, 0.5), 100))
        self.assertEqual(env.dim, 2)
        self.assertEqual(list(env.arms), [1, 2])
        self.assertEqual(len(env.generate_aux_dataset(self.rng)), 100)
        self.assertEqual(env.mean_reward(2, (0.25, 0.25)), 1.0)
        with self.assertRaises(DomainError):
            BumpEnvironment(spec, SourceSpec(1.0, (1.0,), 10))


if __name__ == "__main__":  # pragma: nocover
    unittest.main()
