#!/usr/bin/env python3
"""
Test suite for the independence bound

Covers the task-delay CDFs, the bound curve 1 - F^k, its mean, harmonic
numbers, the tau grid and the closed-form M/G/1 means.
"""

import math
import os
import sys
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.bounds import (
    AnalyticMM1,
    Empirical,
    asymptotic_mean_mm1,
    bound_mean,
    busy_period_mean,
    ccdf_grid,
    harmonic,
    independence_ccdf,
    mg1_mean_sojourn,
    task_cdf_mm1,
)
from src.model import Deterministic, Exponential, UnstableSystemError, random_stream
from src.simulator import simulate_single_queue


class TestTaskDelayCdf(unittest.TestCase):
    """Test suite for the task-delay distributions"""

    def test_mm1_values(self):
        """Test F at 0 and at one mean sojourn time"""
        self.assertEqual(task_cdf_mm1(2.0 / 3.0, 1.0, 0.0), 0.0)
        self.assertAlmostEqual(task_cdf_mm1(2.0 / 3.0, 1.0, 3.0), 1.0 - math.exp(-1.0))

    def test_mm1_validation(self):
        """Test lambda >= mu and negative tau are rejected"""
        with self.assertRaises(ValueError):
            task_cdf_mm1(1.0, 1.0, 1.0)
        with self.assertRaises(ValueError):
            task_cdf_mm1(0.5, 1.0, -1.0)

    def test_mm1_quantile(self):
        """Test the quantile inverts the CDF"""
        F = AnalyticMM1(2.0 / 3.0)
        for q in (0.01, 0.5, 0.999):
            self.assertAlmostEqual(F.cdf(F.quantile(q)), q)

    def test_empirical_step_function(self):
        """Test the empirical CDF on a three-point sample"""
        F = Empirical(np.array([3.0, 1.0, 2.0]))
        self.assertEqual(F.survival(0.5), 1.0)
        self.assertAlmostEqual(F.survival(1.0), 2.0 / 3.0)
        self.assertEqual(F.survival(3.0), 0.0)
        with self.assertRaises(ValueError):
            Empirical(np.array([]))

    def test_empirical_matches_analytic(self):
        """Test an empirical F from simulated sojourn times against the M/M/1 law"""
        samples = simulate_single_queue(2.0 / 3.0, Exponential(1.0), 1_000_000, random_stream(1, 0))
        empirical = Empirical(samples)
        analytic = AnalyticMM1(2.0 / 3.0)
        grid = ccdf_grid(analytic, 4)
        difference = np.abs(empirical.cdf(grid) - analytic.cdf(grid))
        self.assertLess(difference.max(), 0.01)


class TestIndependenceBound(unittest.TestCase):
    """Test suite for independence_ccdf"""

    def test_single_task(self):
        """Test k = 1 gives the task survival function"""
        F = AnalyticMM1(2.0 / 3.0)
        for tau in (0.0, 1.0, 5.0):
            self.assertAlmostEqual(independence_ccdf(F, 1, tau), F.survival(tau))

    def test_four_tasks(self):
        """Test the closed form 1 - (1 - e^-1)^4 at tau = 3"""
        value = independence_ccdf(AnalyticMM1(2.0 / 3.0), 4, 3.0)
        self.assertAlmostEqual(value, 1.0 - (1.0 - math.exp(-1.0)) ** 4)

    def test_zero_beyond_support(self):
        """Test the bound vanishes once F reaches 1"""
        self.assertEqual(independence_ccdf(Empirical(np.array([1.0, 2.0, 3.0])), 3, 5.0), 0.0)

    def test_tail_precision(self):
        """Test the far tail keeps relative precision"""
        F = AnalyticMM1(2.0 / 3.0)
        tau = 150.0
        value = independence_ccdf(F, 8, tau)
        self.assertAlmostEqual(value / (8 * math.exp(-tau / 3.0)), 1.0, places=6)

    def test_k_validated(self):
        """Test k < 1 is rejected"""
        with self.assertRaises(ValueError):
            independence_ccdf(AnalyticMM1(0.5), 0, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(min_value=0.0, max_value=50.0),
        st.floats(min_value=0.0, max_value=50.0),
        st.integers(min_value=1, max_value=512),
    )
    def test_monotone_and_union_bounded(self, a, b, k):
        """Test the bound is nonincreasing in tau and below k (1 - F)"""
        F = AnalyticMM1(2.0 / 3.0)
        lo, hi = min(a, b), max(a, b)
        self.assertGreaterEqual(independence_ccdf(F, k, lo), independence_ccdf(F, k, hi))
        self.assertLessEqual(independence_ccdf(F, k, hi), k * F.survival(hi) + 1e-12)
        self.assertLessEqual(independence_ccdf(F, k, hi), independence_ccdf(F, k + 1, hi))


class TestBoundMean(unittest.TestCase):
    """Test suite for harmonic numbers and the bound's mean"""

    def test_harmonic_values(self):
        """Test H_1 and H_4"""
        self.assertEqual(harmonic(1), 1.0)
        self.assertAlmostEqual(harmonic(4), 25.0 / 12.0, places=15)
        with self.assertRaises(ValueError):
            harmonic(0)

    def test_harmonic_asymptotics(self):
        """Test H_m against the Euler-Maclaurin expansion at m = 10^6"""
        m = 10 ** 6
        gamma = 0.57721566490153286
        expansion = math.log(m) + gamma + 1.0 / (2 * m) - 1.0 / (12 * m ** 2)
        self.assertLess(abs(harmonic(m) - expansion), 1e-10)

    def test_asymptotic_mean(self):
        """Test H_k / (mu - lambda) at lambda = 2/3"""
        self.assertAlmostEqual(asymptotic_mean_mm1(1, 2.0 / 3.0, 1.0), 3.0)
        self.assertAlmostEqual(asymptotic_mean_mm1(4, 2.0 / 3.0, 1.0), 6.25)
        with self.assertRaises(ValueError):
            asymptotic_mean_mm1(4, 1.0, 1.0)

    def test_quadrature_matches_harmonic(self):
        """Test the integrated bound equals H_k / (mu - lambda) for exponential F"""
        F = AnalyticMM1(2.0 / 3.0)
        for k in (1, 4, 8, 16):
            expected = asymptotic_mean_mm1(k, 2.0 / 3.0, 1.0)
            self.assertAlmostEqual(bound_mean(F, k) / expected, 1.0, places=6)

    def test_empirical_mean(self):
        """Test the exact order-statistic sum for an empirical F"""
        F = Empirical(np.array([1.0, 2.0, 3.0]))
        self.assertAlmostEqual(bound_mean(F, 1), 2.0)
        self.assertAlmostEqual(bound_mean(F, 2), 22.0 / 9.0)


class TestGridAndMeans(unittest.TestCase):
    """Test suite for ccdf_grid and the M/G/1 closed forms"""

    def test_grid_shape(self):
        """Test the grid is increasing and ends where the bound reaches 1e-4"""
        F = AnalyticMM1(2.0 / 3.0)
        for k in (1, 4, 512):
            grid = ccdf_grid(F, k)
            self.assertEqual(len(grid), 200)
            self.assertTrue(np.all(np.diff(grid) > 0))
            self.assertAlmostEqual(grid[0], F.quantile(0.01))
            self.assertAlmostEqual(independence_ccdf(F, k, grid[-1]) / 1e-4, 1.0, places=5)

    def test_busy_period_mean(self):
        """Test lambda g2 / (2 (1 - rho)^2) for M/M/1 and M/D/1"""
        self.assertAlmostEqual(busy_period_mean(2.0 / 3.0, Exponential(1.0)), 6.0)
        self.assertAlmostEqual(busy_period_mean(0.5, Deterministic(1.0)), 1.0)
        with self.assertRaises(UnstableSystemError):
            busy_period_mean(1.0, Exponential(1.0))

    def test_mg1_mean_sojourn(self):
        """Test the Pollaczek-Khinchine mean for M/M/1 and M/D/1"""
        self.assertAlmostEqual(mg1_mean_sojourn(2.0 / 3.0, Exponential(1.0)), 3.0)
        self.assertAlmostEqual(mg1_mean_sojourn(0.5, Deterministic(1.0)), 1.5)


if __name__ == '__main__':
    unittest.main()
