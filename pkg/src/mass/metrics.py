"""Evaluation metrics: correlation distance, moments distance and novelty."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .trace import as_array, feature_index


class MomentTriple(NamedTuple):
    mu: float
    sigma: float
    skew: float


def pearson(x, y) -> float:
    """Pearson r, defined as 0 when either sequence is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"sequences must be 1-D and equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if den == 0:
        return 0.0
    return float(np.clip(np.dot(xc, yc) / den, -1.0, 1.0))


def _pearson_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise Pearson over the last axis."""
    xc = x - x.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    den = np.sqrt((xc * xc).sum(axis=-1) * (yc * yc).sum(axis=-1))
    num = (xc * yc).sum(axis=-1)
    r = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(r, -1.0, 1.0)


def corr_vector(trace) -> np.ndarray:
    """Across-user mean Pearson coefficient for each feature pair (upper triangle, row-major)."""
    arr = np.asarray(trace, dtype=float)
    if arr.ndim != 3:
        raise ValueError(f"trace must be (U, K, N), got {arr.shape}")
    if arr.shape[1] < 2:
        raise ValueError("need at least 2 steps per user")
    n = arr.shape[2]
    out = [
        _pearson_rows(arr[:, :, a], arr[:, :, b]).mean()
        for a in range(n)
        for b in range(a + 1, n)
    ]
    return np.asarray(out, dtype=float)


def corr_distance(r_data, r_gen) -> float:
    r_data = np.atleast_1d(np.asarray(r_data, dtype=float))
    r_gen = np.atleast_1d(np.asarray(r_gen, dtype=float))
    if r_data.shape != r_gen.shape:
        raise ValueError(f"dimension mismatch {r_data.shape} vs {r_gen.shape}")
    return float(np.sqrt(np.sum((r_data - r_gen) ** 2)))


def moments_of(values) -> MomentTriple:
    """Population mean, standard deviation and skewness of a flat sample.

    Skewness is 0 when the standard deviation is 0.
    """
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    mu = x.mean()
    c = x - mu
    sigma = math.sqrt(float(np.mean(c * c)))
    skew = float(np.mean(c**3)) / sigma**3 if sigma > 0 else 0.0
    return MomentTriple(float(mu), sigma, skew)


def moments(trace, feature="dl") -> MomentTriple:
    """Moments of one feature with all user steps lumped together."""
    arr = as_array(trace)
    return moments_of(arr[:, :, feature_index(feature)])


def moments_distance(data, gen) -> float:
    """Squared Euclidean distance between two moment triples (un-normalised)."""
    d = np.asarray(data, dtype=float) - np.asarray(gen, dtype=float)
    return float(np.dot(d, d))


def trace_moments_distance(data, gen) -> float:
    """Moments distance summed over download and upload."""
    return sum(moments_distance(moments(data, f), moments(gen, f)) for f in ("dl", "ul"))


def trace_corr_distance(data, gen) -> float:
    return corr_distance(corr_vector(data), corr_vector(gen))


def cross_correlation(x, y, k: int, method: str = "overlap") -> float:
    """Correlation between ``x[t]`` and ``y[t + k]``.

    ``method="overlap"`` (default) is the plain Pearson coefficient of the
    overlapping windows ``x[:L-k]`` and ``y[k:]``. ``method="ccf"`` centres on
    full-series means and divides by the full-series variances, as the usual
    sample cross-correlation function. Both return 0 for a constant input.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("sequences must be 1-D and equal length")
    n = len(x)
    if not 0 <= k < n:
        raise ValueError(f"lag {k} out of range for length {n}")
    if n - k < 2:
        raise ValueError("overlap shorter than 2 samples")
    if method == "overlap":
        return pearson(x[: n - k], y[k:])
    if method != "ccf":
        raise ValueError(f"unknown method {method!r}")
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if den == 0:
        return 0.0
    return float(np.dot(xc[: n - k], yc[k:]) / den)


def max_lag(steps: int) -> int:
    """Largest lag scanned by the novelty metric: floor(10 log10(K/2))."""
    return max(0, int(math.floor(10 * math.log10(steps / 2)))) if steps >= 2 else 0


def _cross_corr_matrix(series: np.ndarray, k: int, method: str) -> np.ndarray:
    """``out[i, j] = cross_correlation(series[i], series[j], k)`` for all pairs."""
    u, n = series.shape
    if method == "overlap":
        a = series[:, : n - k]
        b = series[:, k:]
        ac = a - a.mean(axis=1, keepdims=True)
        bc = b - b.mean(axis=1, keepdims=True)
        na = np.sqrt((ac * ac).sum(axis=1))
        nb = np.sqrt((bc * bc).sum(axis=1))
    elif method == "ccf":
        c = series - series.mean(axis=1, keepdims=True)
        ac, bc = c[:, : n - k], c[:, k:]
        na = nb = np.sqrt((c * c).sum(axis=1))
    else:
        raise ValueError(f"unknown method {method!r}")
    den = np.outer(na, nb)
    num = ac @ bc.T
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def novelty(trace, feature="dl", method: str = "overlap") -> float:
    """One minus the mean, over users, of the best lagged cross-correlation to any other user.

    Lags run from 0 to ``max_lag(K)`` inclusive.
    """
    arr = as_array(trace)
    u, n, _ = arr.shape
    if u < 2:
        raise ValueError("novelty needs at least 2 users")
    if n < 2:
        raise ValueError("novelty needs at least 2 steps")
    series = arr[:, :, feature_index(feature)]
    best = np.full(u, -np.inf)
    off_diag = ~np.eye(u, dtype=bool)
    for k in range(min(max_lag(n), n - 2) + 1):
        m = _cross_corr_matrix(series, k, method)
        m = np.where(off_diag, m, -np.inf)
        best = np.maximum(best, m.max(axis=1))
    return float(1.0 - best.mean())
