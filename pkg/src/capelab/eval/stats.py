"""DeLong, Wilcoxon signed-rank and Kruskal-Wallis tests."""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

EXACT_WILCOXON_MAX_N = 12


class DegenerateVarianceError(ValueError):
    pass


def _placements(scores: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DeLong structural components for one score vector.

    V10[i] = P(positive i beats a random negative), V01[j] likewise for negatives.
    """
    sp, sn = scores[pos], scores[~pos]
    n1, n0 = sp.size, sn.size
    all_rank = stats.rankdata(np.concatenate([sp, sn]))
    pos_rank = stats.rankdata(sp)
    neg_rank = stats.rankdata(sn)
    v10 = (all_rank[:n1] - pos_rank) / n0
    v01 = 1.0 - (all_rank[n1:] - neg_rank) / n1
    return v10, v01


def delong_test(scores_a, scores_b, labels, return_stats: bool = False):
    """Two-sided DeLong test for the difference of two paired AUROCs.

    Returns the p-value, or ``(p, z, auc_a, auc_b)`` with ``return_stats``.
    """
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if not a.size == b.size == y.size:
        raise ValueError("scores and labels must be paired")
    pos = y == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 < 2 or n0 < 2:
        raise ValueError("DeLong test needs at least two samples of each class")
    v10a, v01a = _placements(a, pos)
    v10b, v01b = _placements(b, pos)
    auc_a, auc_b = v10a.mean(), v10b.mean()
    s10 = np.cov(np.vstack([v10a, v10b]))
    s01 = np.cov(np.vstack([v01a, v01b]))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / n1 + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n0
    if not var > 1e-15:
        raise DegenerateVarianceError("DeLong variance is zero (identical placements)")
    z = (auc_a - auc_b) / math.sqrt(var)
    p = float(special.erfc(abs(z) / math.sqrt(2)))
    if return_stats:
        return p, float(z), float(auc_a), float(auc_b)
    return p


def wilcoxon_signed_rank(diffs, exact: bool | None = None) -> float:
    """Two-sided Wilcoxon signed-rank p-value.

    Zero differences are dropped. With ``n <= 12`` the null distribution is
    enumerated over all ``2**n`` sign assignments (midranks for tied
    magnitudes); above that a normal approximation with tie and continuity
    correction is used. ``exact`` forces either branch.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite differences")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    center = ranks.sum() / 2.0
    if exact is None:
        exact = n <= EXACT_WILCOXON_MAX_N
    if exact:
        if n > 20:
            raise ValueError("exact enumeration limited to n <= 20")
        signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
        w = signs @ ranks
        dev = abs(w_plus - center)
        return float(np.mean(np.abs(w - center) >= dev - 1e-9))
    _, t = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(t**3 - t) / 48.0
    dev = max(abs(w_plus - center) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    return float(min(1.0, special.erfc(z / math.sqrt(2))))


def kruskal_wallis(groups) -> tuple[float, float]:
    """Kruskal-Wallis H (tie-corrected) and its chi-square p-value."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    k = len(groups)
    if k < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("empty group")
    pooled = np.concatenate(groups)
    N = pooled.size
    ranks = stats.rankdata(pooled)
    _, t = np.unique(pooled, return_counts=True)
    tie = 1.0 - np.sum(t**3 - t) / (N**3 - N) if N > 1 else 0.0
    if tie <= 0:
        return 0.0, 1.0
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start : start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = (12.0 / (N * (N + 1)) * h - 3 * (N + 1)) / tie
    h = max(h, 0.0)
    return float(h), float(special.gammaincc((k - 1) / 2.0, h / 2.0))
