import unittest

import numpy as np
from parameterized import parameterized

from pcefusion.errors import ContractError, DegenerateMaskError
from pcefusion.metrics import (
    HALF_NORMAL_MEAN,
    Z_95,
    MetricsReport,
    calibration_frame,
    calibration_table,
    mae,
    pce_tercile_mae,
    picp,
    r2,
    significance,
    spearman_rho,
    stars,
    summarize_runs,
)


def mid_ranks(x):
    """Ranks from 1, ties sharing the mean of the positions they occupy."""
    return np.array([np.sum(x < v) + (np.sum(x == v) + 1) / 2.0 for v in x])


def pearson(a, b):
    a, b = a - a.mean(), b - b.mean()
    return float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))


class TestRegressionMetrics(unittest.TestCase):
    """Tests MAE, R2 and Spearman's rho."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_mae(self):
        assert mae([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
        assert mae([0.0, 0.0], [1.0, -3.0]) == 2.0

    def test_mae_matches_loop(self):
        y, mu = self.rng.normal(size=200), self.rng.normal(size=200)
        expected = sum(abs(a - b) for a, b in zip(y, mu)) / len(y)
        self.assertAlmostEqual(mae(y, mu), expected, places=12)

    def test_r2(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        assert r2(y, y) == 1.0
        assert r2(y, np.full(4, y.mean())) == 0.0
        assert r2(y, y[::-1]) < 0.0
        with self.assertRaises(DegenerateMaskError):
            r2([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_r2_matches_loop(self):
        y, mu = self.rng.normal(size=200), self.rng.normal(size=200)
        mean = sum(y) / len(y)
        expected = 1.0 - sum((a - b) ** 2 for a, b in zip(y, mu)) / sum((a - mean) ** 2 for a in y)
        self.assertAlmostEqual(r2(y, mu), expected, places=12)

    def test_spearman(self):
        y = np.arange(10.0)
        assert spearman_rho(y, y) == 1.0
        assert spearman_rho(y, -y) == -1.0
        assert abs(spearman_rho(y, np.exp(y)) - 1.0) < 1e-12
        with self.assertRaises(DegenerateMaskError):
            spearman_rho(y, np.ones(10))

    @parameterized.expand([(0,), (1,), (2,)])
    def test_spearman_with_ties_matches_mid_ranks(self, seed):
        rng = np.random.default_rng(seed)
        y, mu = rng.integers(0, 12, size=200).astype(float), rng.integers(0, 8, size=200).astype(float)
        self.assertAlmostEqual(spearman_rho(y, mu), pearson(mid_ranks(y), mid_ranks(mu)), places=12)

    def test_spearman_is_rank_based(self):
        y, mu = self.rng.normal(size=50), self.rng.normal(size=50)
        self.assertAlmostEqual(spearman_rho(y, mu), spearman_rho(y, mu**3), places=12)

    def test_length_mismatch(self):
        with self.assertRaises(ContractError):
            mae([1.0, 2.0], [1.0])

    def test_report(self):
        y = np.array([10.0, 12.0, 15.0, 20.0])
        report = MetricsReport.compute(y, y + 1.0, np.ones(4))
        assert report.to_dict() == dict(mae=1.0, r2=report.r2, spearman_rho=1.0, picp_95=1.0, n=4)
        assert report.r2 < 1.0

    def test_tercile_mae(self):
        y = np.arange(9.0)
        mu = y + np.array([3, 3, 3, 2, 2, 2, 1, 1, 1])
        assert pce_tercile_mae(y, mu) == [("low", 3, 3.0), ("mid", 3, 2.0), ("high", 3, 1.0)]


class TestCoverage(unittest.TestCase):
    """Tests prediction-interval coverage and the calibration table."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_picp_bounds(self):
        y = self.rng.normal(size=100)
        assert picp(y, y, np.full(100, 1e-9)) == 1.0
        assert picp(y + 1.0, y, np.full(100, 1e-3)) == 0.0

    def test_picp_of_calibrated_predictions(self):
        sigma = self.rng.uniform(0.5, 3.0, size=100000)
        y = sigma * self.rng.standard_normal(100000)
        assert abs(picp(y, np.zeros_like(y), sigma) - 0.95) < 0.01

    def test_picp_grows_with_z(self):
        y, sigma = self.rng.normal(size=500), np.ones(500)
        coverages = [picp(y, np.zeros(500), sigma, z) for z in (0.5, 1.0, 1.96, 3.0)]
        assert coverages == sorted(coverages)
        with self.assertRaises(ContractError):
            picp(y, np.zeros(500), sigma, 0.0)

    def test_half_normal_mean(self):
        assert abs(HALF_NORMAL_MEAN - 0.7978845608) < 1e-10
        draws = np.random.default_rng(7).standard_normal(1000000)
        assert abs(np.mean(np.abs(draws)) - 0.7978845608) < 0.003

    def test_interval_quantile(self):
        assert abs(Z_95 - 1.959963984540054) < 1e-12
        # Exactly one of the two points sits inside the 95% interval.
        assert picp([1.95, 1.97], [0.0, 0.0], [1.0, 1.0]) == 0.5

    def test_bin_sizes(self):
        n = 23
        bins = calibration_table(np.zeros(n), np.ones(n), self.rng.uniform(0.5, 2.0, size=n), num_bins=5)
        assert [b.n for b in bins] == [5, 5, 5, 4, 4]
        means = [b.mean_sigma for b in bins]
        assert means == sorted(means)

    def test_constant_sigma(self):
        y = self.rng.normal(size=40)
        bins = calibration_table(y, np.zeros(40), np.full(40, 2.0), num_bins=4)
        assert all(b.mean_sigma == 2.0 and b.theory == HALF_NORMAL_MEAN * 2.0 for b in bins)
        frame = calibration_frame(bins)
        assert list(frame.columns) == ["bin", "n", "mean_sigma", "mean_abs_err", "se", "ci_low", "ci_high", "theory"]
        assert len(frame) == 4

    def test_scaling_sigma_scales_theory(self):
        y, sigma = self.rng.normal(size=60), self.rng.uniform(0.5, 2.0, size=60)
        a = calibration_table(y, np.zeros(60), sigma, num_bins=3)
        b = calibration_table(y, np.zeros(60), 2.0 * sigma, num_bins=3)
        for x, z in zip(a, b):
            assert np.isclose(z.theory, 2.0 * x.theory)
            assert z.mean_abs_err == x.mean_abs_err

    def test_single_element_bins(self):
        bins = calibration_table([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [1.0, 2.0, 3.0], num_bins=3)
        assert all(np.isnan(b.se) for b in bins)
        assert not any(b.theory_in_ci for b in bins)

    def test_calibrated_theory_inside_ci(self):
        sigma = self.rng.uniform(0.5, 3.0, size=50000)
        y = sigma * self.rng.standard_normal(50000)
        bins = calibration_table(y, np.zeros_like(y), sigma, num_bins=10)
        assert sum(b.theory_in_ci for b in bins) >= 8

    @parameterized.expand([(1,), (11,)])
    def test_bad_bin_count(self, num_bins):
        with self.assertRaises(ContractError):
            calibration_table(np.zeros(10), np.zeros(10), np.ones(10), num_bins=num_bins)

    def test_nonpositive_sigma(self):
        with self.assertRaises(ContractError):
            calibration_table(np.zeros(10), np.zeros(10), np.zeros(10), num_bins=2)


class TestSeedComparison(unittest.TestCase):
    """Tests summarizing runs over seeds."""

    def test_summarize(self):
        assert summarize_runs([1.0, 2.0, 3.0]) == (2.0, 1.0)
        assert summarize_runs([4.0]) == (4.0, 0.0)
        with self.assertRaises(ContractError):
            summarize_runs([])

    def test_significance(self):
        _, p_far = significance([1.0, 1.1, 0.9], [5.0, 5.2, 4.9])
        _, p_near = significance([1.0, 1.1, 0.9], [1.05, 0.95, 1.0])
        assert p_far < 0.05 < p_near
        with self.assertRaises(ContractError):
            significance([1.0], [2.0, 3.0])

    @parameterized.expand([(0.0001, "***"), (0.01, "*"), (0.2, "")])
    def test_stars(self, p, expected):
        assert stars(p) == expected
