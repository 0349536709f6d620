"""Regression metrics, prediction-interval coverage, quantile-bin calibration, and seed comparisons."""
from logging import getLogger
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from pcefusion.component import Component
from pcefusion.errors import ContractError, DegenerateMaskError

logger = getLogger(__name__)

# Mean of |Z| for a standard normal Z.
HALF_NORMAL_MEAN = float(np.sqrt(2.0 / np.pi))
# Two-sided 95% standard-normal quantile, for prediction intervals and bin confidence intervals.
Z_95 = float(stats.norm.ppf(0.975))
CI_Z = Z_95
DEFAULT_NUM_BINS = 10


def _pair(y, mu, min_len: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if len(y) != len(mu):
        raise ContractError(f"length mismatch: {len(y)} targets, {len(mu)} predictions")
    if len(y) < min_len:
        raise ContractError(f"need at least {min_len} samples, got {len(y)}")
    return y, mu


def mae(y, mu) -> float:
    y, mu = _pair(y, mu)
    return float(np.mean(np.abs(y - mu)))


def r2(y, mu) -> float:
    """The coefficient of determination ``1 - SS_res / SS_tot``.

    Raises:
        DegenerateMaskError: If the targets have zero variance.
    """
    y, mu = _pair(y, mu, 2)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateMaskError("r2 is undefined for constant targets")
    return 1.0 - float(np.sum((y - mu) ** 2)) / ss_tot


def spearman_rho(y, mu) -> float:
    """Pearson correlation of mid-ranks (ties share their average rank)."""
    y, mu = _pair(y, mu, 2)
    ry, rm = stats.rankdata(y, method="average"), stats.rankdata(mu, method="average")
    ry, rm = ry - ry.mean(), rm - rm.mean()
    denom = np.sqrt(np.sum(ry * ry) * np.sum(rm * rm))
    if denom == 0.0:
        raise DegenerateMaskError("spearman_rho is undefined for a constant vector")
    return float(np.sum(ry * rm) / denom)


def picp(y, mu, sigma, z: float = Z_95) -> float:
    """The fraction of samples with ``|y - mu| <= z * sigma``."""
    y, mu = _pair(y, mu)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if len(sigma) != len(y):
        raise ContractError(f"length mismatch: {len(y)} targets, {len(sigma)} sigmas")
    if z <= 0:
        raise ContractError(f"z must be positive, got {z}")
    return float(np.mean(np.abs(y - mu) <= z * sigma))


class MetricsReport(Component):
    """Metrics of one evaluation.

    Attributes:
        mae (float): Mean absolute error.
        r2 (float): Coefficient of determination.
        spearman_rho (float): Spearman rank correlation.
        picp_95 (float): Coverage of the 95% prediction intervals.
        n (int): The number of samples.
    """

    def __init__(self, mae: float, r2: float, spearman_rho: float, picp_95: float, n: int):
        self.mae: float = mae
        self.r2: float = r2
        self.spearman_rho: float = spearman_rho
        self.picp_95: float = picp_95
        self.n: int = n

    @classmethod
    def compute(cls, y, mu, sigma) -> "MetricsReport":
        return cls(mae(y, mu), r2(y, mu), spearman_rho(y, mu), picp(y, mu, sigma), len(np.asarray(y).reshape(-1)))

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(mae=self.mae, r2=self.r2, spearman_rho=self.spearman_rho, picp_95=self.picp_95, n=self.n)

    def to_string(self) -> str:
        """Convert this object into a string."""
        return (
            f"<MetricsReport, n: {self.n}, MAE: {self.mae:.4f}, R2: {self.r2:.4f}, "
            f"Spearman: {self.spearman_rho:.4f}, PICP95: {self.picp_95:.4f}>"
        )


class CalibrationBin(Component):
    """One quantile bin of the calibration table.

    ``se`` (and hence the confidence interval) is NaN for single-element bins.
    """

    def __init__(
        self,
        index: int,
        n: int,
        mean_sigma: float,
        mean_abs_err: float,
        se: float,
        ci_low: float,
        ci_high: float,
        theory: float,
    ):
        self.index = index
        self.n = n
        self.mean_sigma = mean_sigma
        self.mean_abs_err = mean_abs_err
        self.se = se
        self.ci_low = ci_low
        self.ci_high = ci_high
        self.theory = theory

    @property
    def theory_in_ci(self) -> bool:
        return bool(self.ci_low <= self.theory <= self.ci_high)

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(
            bin=self.index,
            n=self.n,
            mean_sigma=self.mean_sigma,
            mean_abs_err=self.mean_abs_err,
            se=self.se,
            ci_low=self.ci_low,
            ci_high=self.ci_high,
            theory=self.theory,
        )

    def to_string(self) -> str:
        """Convert this object into a string."""
        return (
            f"<CalibrationBin, bin: {self.index}, n: {self.n}, mean_sigma: {self.mean_sigma:.4f}, "
            f"mean_abs_err: {self.mean_abs_err:.4f}, theory: {self.theory:.4f}>"
        )


def calibration_table(y, mu, sigma, num_bins: int = DEFAULT_NUM_BINS) -> List[CalibrationBin]:
    """Split samples into ``num_bins`` equal-count bins by predicted sigma and compare errors with sigma.

    Each bin reports the mean sigma, the mean absolute error with a 95% confidence interval from its standard
    error, and the half-normal expectation ``sqrt(2/pi) * mean_sigma`` of the absolute error. The first
    ``n mod num_bins`` bins hold one extra sample.
    """
    y, mu = _pair(y, mu)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if len(sigma) != len(y):
        raise ContractError(f"length mismatch: {len(y)} targets, {len(sigma)} sigmas")
    if num_bins < 2 or num_bins > len(y):
        raise ContractError(f"need 2 <= num_bins <= n, got num_bins={num_bins}, n={len(y)}")
    if np.any(sigma <= 0):
        raise ContractError("sigma must be positive")

    order = np.argsort(sigma, kind="stable")
    abs_err, sigma = np.abs(y - mu)[order], sigma[order]
    size, extra = divmod(len(y), num_bins)
    bounds = np.cumsum([0] + [size + (b < extra) for b in range(num_bins)])

    bins = []
    for b in range(num_bins):
        e, s = abs_err[bounds[b] : bounds[b + 1]], sigma[bounds[b] : bounds[b + 1]]
        mean_e, mean_s = float(e.mean()), float(s.mean())
        se = float(e.std(ddof=1) / np.sqrt(len(e))) if len(e) > 1 else float("nan")
        ci_low, ci_high = mean_e - CI_Z * se, mean_e + CI_Z * se
        bins.append(CalibrationBin(b, len(e), mean_s, mean_e, se, ci_low, ci_high, HALF_NORMAL_MEAN * mean_s))
    return bins


def calibration_frame(bins: Sequence[CalibrationBin]) -> pd.DataFrame:
    """The calibration table as a data frame with columns bin, n, mean_sigma, mean_abs_err, se, ci_low, ci_high,
    theory."""
    return pd.DataFrame([b.to_dict() for b in bins])


def pce_tercile_mae(y, mu) -> List[Tuple[str, int, float]]:
    """MAE of the low, mid and high thirds of the samples ordered by true PCE."""
    y, mu = _pair(y, mu, 3)
    order = np.argsort(y, kind="stable")
    return [
        (name, len(part), mae(y[part], mu[part]))
        for name, part in zip(("low", "mid", "high"), np.array_split(order, 3))
    ]


def summarize_runs(values: Sequence[float]) -> Tuple[float, float]:
    """The mean and sample standard deviation over seeds (std 0 for a single run)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ContractError("no runs to summarize")
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def significance(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Welch's unequal-variance t-test of ``a`` against ``b``; returns (t, p)."""
    if len(a) < 2 or len(b) < 2:
        raise ContractError("a t-test needs at least two runs per side")
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.05:
        return "*"
    return ""
