#!/usr/bin/env python3
"""
Test suite for the statistical estimators

Covers batch means, the empirical CCDF and its sup distance to a bound,
the joint pmf and TV distance, the exact balance-equation residual and
workload covariances.
"""

import math
import os
import sys
import unittest
from fractions import Fraction

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.bounds import AnalyticMM1, independence_ccdf
from src.metrics import (
    BalanceProbabilities,
    InsufficientSamplesError,
    TruncationError,
    balance_probabilities,
    balance_residual,
    balance_residual_estimate,
    batch_means,
    epsilon_theorem3,
    estimate_ccdf,
    joint_pmf,
    kolmogorov_distance,
    limiting_balance_probabilities,
    limiting_product_residual,
    product_geometric_pmf,
    stationarity_check,
    sup_distance,
    tv_distance,
    workload_covariance,
)
from src.model import Exponential, SystemConfig, random_stream
from src.simulator import sample_workloads, simulate_single_queue


def geometric_lengths(rng, rho, size):
    """M/M/1 stationary queue lengths, P(q) = (1 - rho) rho^q."""
    return rng.geometric(1.0 - rho, size) - 1


class TestBatchMeans(unittest.TestCase):
    """Test suite for batch_means and stationarity_check"""

    def test_constant_sequence(self):
        """Test a constant sequence has zero standard error"""
        estimate = batch_means(np.full(3000, 2.5))
        self.assertEqual(estimate.mean, 2.5)
        self.assertEqual(estimate.standard_error, 0.0)

    def test_iid_normal(self):
        """Test the half-width covers the true mean of iid draws"""
        draws = random_stream(1, 0).normal(1.0, 2.0, 100_000)
        estimate = batch_means(draws)
        self.assertLess(abs(estimate.mean - 1.0), 2 * estimate.halfwidth)
        self.assertAlmostEqual(estimate.standard_error, 2.0 / math.sqrt(100_000), delta=0.003)

    def test_empty_rejected(self):
        """Test empty input raises"""
        with self.assertRaises(InsufficientSamplesError):
            batch_means(np.array([]))

    def test_stationarity(self):
        """Test a flat series passes and a trending one fails"""
        rng = random_stream(2, 0)
        flat = rng.exponential(1.0, 8000)
        check = stationarity_check(flat, 10_000, 2000)
        self.assertTrue(check.passed)
        trending = flat + np.linspace(0.0, 5.0, 8000)
        self.assertFalse(stationarity_check(trending, 10_000, 2000).passed)
        self.assertIsNone(stationarity_check(flat[:10], 12, 2))


class TestCcdfEstimation(unittest.TestCase):
    """Test suite for estimate_ccdf and sup_distance"""

    def test_point_mass(self):
        """Test a constant sample has survival 1 below and 0 at or above it"""
        ccdf = estimate_ccdf(np.full(2000, 2.0), [1.0, 1.999, 2.0, 3.0])
        np.testing.assert_array_equal(ccdf.survival, [1.0, 1.0, 0.0, 0.0])

    def test_too_few_samples(self):
        """Test fewer than 1000 delays are refused"""
        with self.assertRaises(InsufficientSamplesError):
            estimate_ccdf(np.ones(999), [1.0])

    def test_exponential_tail(self):
        """Test P(T > 3) = e^-1 for exponential delays of mean 3"""
        draws = random_stream(3, 0).exponential(3.0, 1_000_000)
        ccdf = estimate_ccdf(draws, [3.0])
        self.assertAlmostEqual(ccdf.survival[0], math.exp(-1.0), delta=0.002)
        self.assertEqual(ccdf.sample_count, 1_000_000)

    def test_replications_merge(self):
        """Test per-replication arrays are pooled"""
        parts = [np.full(600, 1.0), np.full(600, 3.0)]
        ccdf = estimate_ccdf(parts, [2.0])
        self.assertEqual(ccdf.survival[0], 0.5)
        self.assertEqual(ccdf.sample_count, 1200)

    def test_max_of_independent_tasks(self):
        """Test the maximum of four independent task delays sits on the bound"""
        F = AnalyticMM1(2.0 / 3.0)
        rng = random_stream(4, 0)
        delays = rng.exponential(3.0, (200_000, 4)).max(axis=1)
        grid = np.linspace(0.5, 25.0, 200)
        ccdf = estimate_ccdf(delays, grid)
        self.assertTrue(np.all(np.diff(ccdf.survival) <= 0))
        self.assertTrue(np.all((ccdf.survival >= 0) & (ccdf.survival <= 1)))
        distance = sup_distance(ccdf, lambda t: independence_ccdf(F, 4, t), widths=4.0)
        self.assertTrue(distance.dominated)
        bound = independence_ccdf(F, 4, grid)
        self.assertTrue(np.all(np.abs(ccdf.survival - bound) <= 4.0 * ccdf.ci_halfwidth + 1e-3))
        self.assertLess(distance.gap, 0.01)

    def test_grid_validated(self):
        """Test unsorted or empty grids are rejected"""
        with self.assertRaises(ValueError):
            estimate_ccdf(np.ones(1000), [2.0, 1.0])
        with self.assertRaises(ValueError):
            estimate_ccdf(np.ones(1000), [])

    def test_band_coverage_mm1(self):
        """Test the 99% bands cover the M/M/1 sojourn tail across seeds"""
        grid = [1.5, 3.0, 6.0]
        truth = np.exp(-np.array(grid) / 3.0)
        covered = 0
        for seed in range(100):
            sojourn = simulate_single_queue(2.0 / 3.0, Exponential(1.0), 50_000, random_stream(seed, 0), 0.2)
            ccdf = estimate_ccdf(sojourn, grid)
            covered += int(np.sum(np.abs(ccdf.survival - truth) <= ccdf.ci_halfwidth))
        self.assertGreaterEqual(covered / 300, 0.95)

    def test_kolmogorov_distance(self):
        """Test the KS statistic is small for matching laws"""
        draws = random_stream(5, 0).exponential(1.0, 100_000)
        self.assertLess(kolmogorov_distance(draws, lambda t: -np.expm1(-t)), 0.01)
        self.assertGreater(kolmogorov_distance(draws, lambda t: -np.expm1(-t / 2.0)), 0.2)


class TestJointPmf(unittest.TestCase):
    """Test suite for joint_pmf and tv_distance"""

    def test_exact_product_has_zero_tv(self):
        """Test counts equal to their product of marginals give TV 0"""
        snapshots = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 250)
        joint = joint_pmf(snapshots, q_max=1)
        self.assertEqual(tv_distance(joint).distance, 0.0)
        self.assertEqual(joint.probability((1, 0)), 0.25)

    def test_independent_streams(self):
        """Test independent geometric coordinates have TV below 0.01"""
        rng = random_stream(6, 0)
        snapshots = np.column_stack([geometric_lengths(rng, 2.0 / 3.0, 1_000_000) for _ in range(2)])
        estimate = tv_distance(joint_pmf(snapshots))
        self.assertLess(estimate.distance, 0.01)
        self.assertLess(estimate.error_bound, 0.01)

    def test_identical_streams(self):
        """Test a duplicated coordinate has TV of at least 0.3"""
        column = geometric_lengths(random_stream(7, 0), 2.0 / 3.0, 1_000_000)
        estimate = tv_distance(joint_pmf(np.column_stack([column, column])))
        self.assertGreaterEqual(estimate.distance, 0.3)

    def test_truncation_refused(self):
        """Test an undersized box raises"""
        column = geometric_lengths(random_stream(8, 0), 2.0 / 3.0, 10_000)
        joint = joint_pmf(np.column_stack([column, column]), q_max=2)
        self.assertGreater(joint.truncated_mass, 0.01)
        with self.assertRaises(TruncationError):
            tv_distance(joint)

    def test_merge(self):
        """Test merging adds counts"""
        a = joint_pmf(np.array([[0, 1], [1, 1]]), q_max=1)
        b = joint_pmf(np.array([[0, 0], [3, 1]]), q_max=1)
        merged = a.merge(b)
        self.assertEqual(merged.total, 4)
        self.assertEqual(merged.truncated, 1)
        self.assertEqual(int(merged.counts.sum()), 3)


class TestBalanceResidual(unittest.TestCase):
    """Test suite for the two-queue balance equation"""

    def test_probabilities(self):
        """Test p0, p1, p2 for (4, 2) and k = n"""
        self.assertEqual(balance_probabilities(4, 2).as_tuple(), (Fraction(1, 6), Fraction(2, 3), Fraction(1, 6)))
        self.assertEqual(balance_probabilities(5, 5).as_tuple(), (0, 0, 1))
        with self.assertRaises(ValueError):
            balance_probabilities(4, 1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=2, max_value=12).flatmap(
        lambda n: st.tuples(st.just(n), st.integers(min_value=2, max_value=n))
    ))
    def test_probabilities_match_enumeration(self, nk):
        """Test p0, p1, p2 against counting subsets"""
        import itertools
        n, k = nk
        subsets = list(itertools.combinations(range(n), k))
        counts = [0, 0, 0]
        for s in subsets:
            counts[(0 in s) + (1 in s)] += 1
        expected = tuple(Fraction(c, len(subsets)) for c in counts)
        self.assertEqual(balance_probabilities(n, k).as_tuple(), expected)

    def test_large_system_limits(self):
        """Test the probabilities approach their k = pn limits"""
        actual = balance_probabilities(1000, 500).as_tuple()
        limits = limiting_balance_probabilities(Fraction(1, 2)).as_tuple()
        for a, b in zip(actual, limits):
            self.assertLess(abs(a - b), Fraction(1, 100))

    def test_product_residual_limit(self):
        """Test the product law leaves -p lambda (1 - rho)^4 = -1/243 at p = 1/2"""
        rho = Fraction(2, 3)
        residual = balance_residual(
            product_geometric_pmf(rho), 2, 1, Fraction(4, 3), 1,
            probabilities=limiting_balance_probabilities(Fraction(1, 2)),
        )
        self.assertEqual(residual, Fraction(-1, 243))
        self.assertEqual(limiting_product_residual(Fraction(1, 2), rho, 1), Fraction(-1, 243))

    def test_residual_vanishes_on_product_form(self):
        """Test an exact stationary product law balances state (1, 1)"""
        lam, mu = Fraction(2, 3), Fraction(1)
        rho = lam / mu
        p1 = Fraction(1, 2)
        # each queue sees an independent Poisson stream of rate lambda
        probabilities = BalanceProbabilities(p0=1 - p1, p1=p1, p2=Fraction(0))
        Lambda = 2 * lam / p1
        residual = balance_residual(product_geometric_pmf(rho), 4, 2, Lambda, mu, probabilities=probabilities)
        self.assertEqual(residual, 0)
        self.assertIsInstance(residual, Fraction)

        # birth-death chains with room for two customers each
        norm = 1 + rho + rho ** 2
        truncated = {(i, j): rho ** (i + j) / norm ** 2 for i in range(3) for j in range(3)}
        self.assertEqual(sum(truncated.values()), 1)
        self.assertEqual(balance_residual(truncated, 4, 2, Lambda, mu, probabilities=probabilities), 0)

    @settings(max_examples=40, deadline=None)
    @given(
        st.fractions(min_value=Fraction(1, 100), max_value=Fraction(99, 100)),
        st.fractions(min_value=Fraction(1, 100), max_value=1),
    )
    def test_residual_vanishes_for_any_stable_rate(self, rho, p1):
        """Test the product law balances whenever each queue sees rate lambda alone"""
        mu = Fraction(3, 2)
        lam = rho * mu
        probabilities = BalanceProbabilities(p0=1 - p1, p1=p1, p2=Fraction(0))
        residual = balance_residual(product_geometric_pmf(rho), 4, 2, 2 * lam / p1, mu, probabilities=probabilities)
        self.assertEqual(residual, 0)

    def test_probabilities_converge_monotonically(self):
        """Test each probability moves strictly closer to its limit as n doubles"""
        for p, smallest in ((Fraction(1, 2), 4), (Fraction(1, 4), 8)):
            limits = limiting_balance_probabilities(p).as_tuple()
            previous = None
            n = smallest
            while n <= 4096:
                actual = balance_probabilities(n, int(p * n)).as_tuple()
                distances = [abs(a - b) for a, b in zip(actual, limits)]
                if previous is not None:
                    for before, after in zip(previous, distances):
                        self.assertLess(after, before)
                previous = distances
                n *= 2
        self.assertEqual(previous[0], Fraction(3, 16 * 4095))

    def test_product_residual_finite_system(self):
        """Test the product law's exact residual in an (8, 4) system"""
        residual = balance_residual(product_geometric_pmf(Fraction(2, 3)), 8, 4, Fraction(4, 3), 1)
        self.assertEqual(residual, Fraction(-2, 567))

    def test_empty_mapping(self):
        """Test a pmf with no mass on the six states has zero residual"""
        self.assertEqual(balance_residual({}, 4, 2, Fraction(4, 3), 1), 0)

    def test_epsilon(self):
        """Test the separation constant at p = 1/2 and p = 1"""
        lam = Fraction(2, 3)
        self.assertEqual(epsilon_theorem3(Fraction(1, 2), lam, 1), Fraction(1, 1224))
        self.assertEqual(epsilon_theorem3(Fraction(1), lam, 1), Fraction(1, 414))
        self.assertLess(epsilon_theorem3(Fraction(1, 10 ** 6), lam, 1), Fraction(1, 10 ** 6))
        with self.assertRaises(ValueError):
            epsilon_theorem3(0, lam, 1)
        with self.assertRaises(ValueError):
            epsilon_theorem3(Fraction(1, 2), 1, 1)

    def test_residual_estimate(self):
        """Test the snapshot estimate of the product law's residual"""
        rho = 2.0 / 3.0
        rng = random_stream(9, 0)
        snapshots = np.column_stack([geometric_lengths(rng, rho, 1_000_000) for _ in range(2)])
        estimate = balance_residual_estimate(snapshots, 8, 4, 4.0 / 3.0, 1.0)
        self.assertLess(abs(estimate.mean - (-2.0 / 567.0)), 4 * estimate.standard_error + 1e-4)
        with self.assertRaises(ValueError):
            balance_residual_estimate(snapshots[:, :1], 8, 4, 4.0 / 3.0, 1.0)

    def test_pmf_estimate_input(self):
        """Test the residual accepts a JointPmfEstimate"""
        snapshots = np.array([[0, 0], [1, 1], [1, 2], [2, 1]] * 1000)
        joint = joint_pmf(snapshots, q_max=2)
        residual = balance_residual(joint, 4, 2, 4.0 / 3.0, 1.0)
        weights = {(0, 0): -(1 / 6) * (4 / 3), (1, 1): (5 / 6) * (4 / 3) + 2, (1, 2): -1.0, (2, 1): -1.0}
        self.assertAlmostEqual(residual, sum(weights.values()) / 4)


class TestWorkloadCovariance(unittest.TestCase):
    """Test suite for workload_covariance"""

    def test_independent_columns(self):
        """Test independent workloads give a covariance near zero"""
        data = random_stream(10, 0).exponential(1.0, (100_000, 3))
        estimates = workload_covariance(data)
        self.assertEqual([e.pair for e in estimates], [(0, 1), (0, 2), (1, 2)])
        for estimate in estimates:
            self.assertLess(abs(estimate.estimate), 2 * estimate.halfwidth)

    def test_correlated_columns(self):
        """Test a shared component shows up as positive covariance"""
        rng = random_stream(11, 0)
        shared = rng.exponential(1.0, 50_000)
        data = np.column_stack([shared + rng.exponential(1.0, 50_000), shared])
        (estimate,) = workload_covariance(data, pairs=[(0, 1)])
        self.assertFalse(estimate.contains_zero())
        self.assertAlmostEqual(estimate.estimate, 1.0, delta=0.05)

    def test_full_fork_workloads_positive(self):
        """Test k = n makes the workloads of two queues positively correlated"""
        config = SystemConfig(n=8, k=8)
        snapshots = sample_workloads(config, 2.0, 20_000, 2, random_stream(12, 0))
        (estimate,) = workload_covariance(snapshots, pairs=[(0, 1)])
        self.assertGreater(estimate.estimate, 0.0)
        self.assertFalse(estimate.contains_zero())

    def test_sparse_fork_workloads_unresolved(self):
        """Test k = 4 of n = 1024 leaves no covariance above the band"""
        config = SystemConfig(n=1024, k=4)
        snapshots = sample_workloads(config, 2.0, 10_000, 2, random_stream(13, 0))
        (estimate,) = workload_covariance(snapshots, pairs=[(0, 1)])
        self.assertLess(abs(estimate.estimate), 2 * estimate.halfwidth)

    def test_too_few_snapshots(self):
        """Test fewer than 10^4 snapshots are refused"""
        with self.assertRaises(InsufficientSamplesError):
            workload_covariance(np.zeros((9999, 2)))


if __name__ == '__main__':
    unittest.main()
