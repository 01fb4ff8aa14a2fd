"""Point metrics, confidence intervals, binned error and Table-3 style formatting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


@dataclass
class MetricResult:
    name: str
    value: float
    n: int
    values: list[float] = field(default_factory=list)
    lo: float = float("nan")
    hi: float = float("nan")
    se: float = float("nan")

    def row(self) -> dict:
        return {"metric": self.name, "value": self.value, "lo": self.lo, "hi": self.hi, "se": self.se, "n": self.n}


def _paired(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} targets")
    if pred.size == 0:
        raise ValueError("empty input")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("non-finite values")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks: P(s+ > s-) + P(tie) / 2."""
    scores, labels = _paired(scores, labels)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both classes")
    ranks = stats.rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def ci95(values, name: str = "metric") -> MetricResult:
    """Mean with a t-based 95% interval; SE is sd / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("ci95 needs at least two values")
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    half = float(stats.t.ppf(0.975, v.size - 1)) * se
    return MetricResult(name, mean, int(v.size), v.tolist(), mean - half, mean + half, se)


@dataclass
class BinTable:
    edges: np.ndarray
    counts: np.ndarray
    mae: np.ndarray  # NaN for empty bins
    normalized: np.ndarray  # NaN for empty bins

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    def rows(self) -> list[dict]:
        return [
            {
                "bin_lo": float(self.edges[i]),
                "bin_hi": float(self.edges[i + 1]),
                "count": int(self.counts[i]),
                "mae": float(self.mae[i]),
                "normalized_mae": float(self.normalized[i]),
                "empty": bool(self.empty[i]),
            }
            for i in range(len(self.counts))
        ]


def binned_mae(pred, truth, bin_width: float = 2.0) -> BinTable:
    """Per-age-bin MAE, scaled by the largest per-bin MAE.

    Bins of ``bin_width`` years start at ``min(truth)``; the last bin is
    closed on the right so ``max(truth)`` is covered.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    pred, truth = _paired(pred, truth)
    lo, hi = truth.min(), truth.max()
    n_bins = int(math.floor((hi - lo) / bin_width)) + 1
    edges = lo + bin_width * np.arange(n_bins + 1)
    idx = np.minimum(np.floor((truth - lo) / bin_width).astype(int), n_bins - 1)
    err = np.abs(pred - truth)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=err, minlength=n_bins)
    per_bin = np.full(n_bins, np.nan)
    nz = counts > 0
    per_bin[nz] = sums[nz] / counts[nz]
    peak = np.nanmax(per_bin)
    normalized = per_bin / peak if peak > 0 else np.where(nz, 0.0, np.nan)
    return BinTable(edges, counts, per_bin, normalized)


SE_LIMITS = {"mae": 1.0, "auc": 0.01}


def format_mean_se(mean: float, se: float, kind: str = "mae") -> str:
    """Compact ``mean(SE)`` notation.

    The mean keeps three decimals. The parenthesis holds the SE at four
    decimals with leading zeros collapsed to one, so 7.880 +/- 0.0028 is
    ``7.880(028)`` and 0.939 +/- 0.0006 is ``0.939(06)``. An SE at or above
    the per-metric limit (1.0 for MAE, 0.01 for AUC) prints as ``(*)``.
    """
    if kind not in SE_LIMITS:
        raise ValueError(f"unknown metric kind {kind!r}")
    if not math.isfinite(se) or se >= SE_LIMITS[kind]:
        return f"{mean:.3f}(*)"
    digits = int(round(se * 1e4))
    return f"{mean:.3f}(0{digits})"


CSV_FIELDS = ("metric", "value", "lo", "hi", "se", "n")


def metrics_csv(results: list[MetricResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow({k: _fmt(v) for k, v in r.row().items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
