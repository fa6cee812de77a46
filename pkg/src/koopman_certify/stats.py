"""Small statistical helpers for Monte-Carlo summaries."""

import numpy as np
from scipy import stats


def wilson_interval(successes: int, n: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion (no continuity correction)."""
    if n < 1:
        raise ValueError("need at least one trial")
    ci = stats.binomtest(int(successes), int(n)).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x); NaN if it is undefined."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def spearman(a, b):
    """Spearman rank correlation over the pairs where both entries are finite."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 3:
        return float("nan")
    return float(stats.spearmanr(a[ok], b[ok]).statistic)


def first_crossing(times, values, threshold):
    """First time with value > threshold (non-finite values count as crossing)."""
    values = np.asarray(values, dtype=float)
    hit = np.flatnonzero(~np.isfinite(values) | (values > threshold))
    return None if hit.size == 0 else float(times[hit[0]])
