"""Small oracles shared by the test modules."""

import math

import numpy as np


def within(estimate, target, stderr, k=4.0):
    return abs(estimate - target) <= k * stderr


def binned_chi2_pvalue(a, b, n_bins=20):
    """Two-sample chi-square on quantile bins of the pooled sample (integer data safe)."""
    from scipy import stats

    pooled = np.concatenate([a, b])
    edges = np.unique(np.quantile(pooled, np.linspace(0, 1, n_bins + 1)))
    edges[0], edges[-1] = -np.inf, np.inf
    ca, _ = np.histogram(a, edges)
    cb, _ = np.histogram(b, edges)
    keep = (ca + cb) > 0
    table = np.vstack([ca[keep], cb[keep]])
    return stats.chi2_contingency(table)[1]


def poisson_series_p0(j0, t):
    """Two-term small-time oracle for the return probability."""
    return math.exp(-t) * (1.0 + t * j0)


def weighted_two_sample_pvalue(values, weights, other, edges):
    """Chi-square test that a self-normalized weighted sample and a plain sample share one law.

    Both samples are binned on ``edges``; the weighted bin frequencies get
    their delta-method covariance, the plain ones the multinomial covariance.
    """
    from scipy import stats

    values, weights, other = np.asarray(values), np.asarray(weights, dtype=float), np.asarray(other)
    k = len(edges) - 1
    ia = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, k - 1)
    ib = np.clip(np.searchsorted(edges, other, side="right") - 1, 0, k - 1)
    ind = np.eye(k)[ia]
    wn = weights / weights.mean()
    p = (wn[:, None] * ind).mean(axis=0)
    resid = wn[:, None] * (ind - p)
    cov_a = resid.T @ resid / values.size**2
    q = np.bincount(ib, minlength=k) / other.size
    cov_b = (np.diag(q) - np.outer(q, q)) / other.size
    d = (p - q)[:-1]
    stat = float(d @ np.linalg.solve((cov_a + cov_b)[:-1, :-1], d))
    return stats.chi2.sf(stat, k - 1)
