"""Replication statistics: moments, MSE, and a plug-in Kolmogorov-Smirnov normality test."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

SERIES_TOL = 1e-12


@dataclass(frozen=True)
class MomentSummary:
    mean: float
    sd: float          # denominator n - 1
    mse: float
    mean_error: float
    skewness: float    # population normalization
    kurtosis: float    # raw (normal = 3)
    n: int

    @property
    def var(self) -> float:
        return self.sd**2

    def to_dict(self) -> dict:
        return asdict(self)


def moment_summary(samples, true_value: float = 0.0) -> MomentSummary:
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 samples")
    mean = float(x.mean())
    dev = x - mean
    m2 = float(np.mean(dev**2))
    err = x - true_value
    sd_pop = math.sqrt(m2)
    if sd_pop > 0:
        z = dev / sd_pop
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4))
    else:
        skew = kurt = math.nan
    return MomentSummary(mean=mean, sd=math.sqrt(m2 * n / (n - 1)), mse=float(np.mean(err**2)),
                         mean_error=float(np.mean(err)), skewness=skew, kurtosis=kurt, n=n)


def kolmogorov_sf(x: float) -> float:
    """``P(K > x)`` for the Kolmogorov distribution.

    Alternating series ``2 sum (-1)^(k-1) exp(-2 k^2 x^2)`` for ``x >= 1``;
    below that it converges slowly, so the complementary theta series
    ``1 - sqrt(2 pi)/x sum exp(-(2k-1)^2 pi^2 / (8 x^2))`` is used instead.
    Both are truncated once a term drops below 1e-12.
    """
    if x <= 0:
        return 1.0
    if x < 1.0:
        c = -math.pi**2 / (8.0 * x * x)
        total, k = 0.0, 1
        while True:
            term = math.exp(c * (2 * k - 1) ** 2)
            total += term
            if term < SERIES_TOL:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / x * total))
    total, k, sign = 0.0, 1, 1.0
    while True:
        term = math.exp(-2.0 * k * k * x * x)
        total += sign * term
        if term < SERIES_TOL:
            break
        k += 1
        sign = -sign
    return min(1.0, max(0.0, 2.0 * total))


def ks_statistic(x, cdf) -> float:
    """Two-sided one-sample ``D_n = sup |F_n - F|``."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_normality(samples, lilliefors: bool = False) -> tuple[float, float]:
    """KS test of normality with mean and sd estimated from the sample.

    The p-value is the asymptotic Kolmogorov tail at ``sqrt(n) D_n``, which
    is conservative with plug-in parameters.  ``lilliefors=True`` returns the
    Lilliefors-corrected p-value instead.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 5:
        raise ValueError("need at least 5 samples")
    sd = float(x.std(ddof=1))
    if not sd > 0:
        raise ValueError("zero sample variance")
    mean = float(x.mean())
    d = ks_statistic(x, lambda v: ndtr((v - mean) / sd))
    if lilliefors:
        from statsmodels.stats.diagnostic import lilliefors as _lf
        stat, pval = _lf(x, dist="norm", pvalmethod="table")
        return float(stat), float(pval)
    return d, kolmogorov_sf(math.sqrt(n) * d)
