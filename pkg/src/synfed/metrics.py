"""Segmentation and generation quality metrics plus the statistics stack.

Conventions are fixed here once and documented in every report:

* Dice on two empty masks is 1.0; one empty side gives 0.0. Reported values
  are x100 with one decimal.
* HD95 pools the bidirectional boundary distances and takes the nearest-rank
  95th percentile. A side with no foreground at all makes the metric
  undefined (returned as None); two empty sides give 0.0.
* Fold aggregation reports the arithmetic mean and the n-1 standard
  deviation, excluding undefined entries but counting them.
* The paired test is the one-sided Wilcoxon signed-rank test (alternative:
  first sample greater), exact by full sign enumeration for small samples and
  a tie- and continuity-corrected normal approximation beyond that, with
  Bonferroni correction across tests.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, SegMask, nearest_rank_percentile, nn_search

EXACT_WILCOXON_LIMIT = 25
HD95_PERCENTILE = 95.0


# ---------------------------------------------------------------------------
# Segmentation overlap metrics
# ---------------------------------------------------------------------------

def _binarize(mask: SegMask | np.ndarray, class_id: int) -> np.ndarray:
    labels = mask.labels if isinstance(mask, SegMask) else np.asarray(mask)
    return labels == class_id


def dice(a: SegMask | np.ndarray, b: SegMask | np.ndarray, class_id: int = 1) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|) for one class; both empty -> 1.0."""
    fa, fb = _binarize(a, class_id), _binarize(b, class_id)
    if fa.shape != fb.shape:
        raise DataError(f"mask shapes differ: {fa.shape} vs {fb.shape}")
    na, nb = int(fa.sum()), int(fb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((fa & fb).sum()) / (na + nb)


def boundary_pixels(fg: np.ndarray) -> np.ndarray:
    """(n, 2) row/col coordinates of foreground pixels that touch background
    through a 4-neighborhood or sit on the image edge."""
    padded = np.pad(fg, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(fg & ~interior)


def hd95(a: SegMask | np.ndarray, b: SegMask | np.ndarray, class_id: int = 1,
         spacing: tuple[float, float] = (1.0, 1.0)) -> float | None:
    """Nearest-rank 95th percentile of pooled bidirectional boundary
    distances in mm; None when exactly one side has no foreground."""
    fa, fb = _binarize(a, class_id), _binarize(b, class_id)
    if fa.shape != fb.shape:
        raise DataError(f"mask shapes differ: {fa.shape} vs {fb.shape}")
    if not fa.any() and not fb.any():
        return 0.0
    if not fa.any() or not fb.any():
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    pa = boundary_pixels(fa) * scale
    pb = boundary_pixels(fb) * scale
    d_ab, _ = nn_search(pa, pb)
    d_ba, _ = nn_search(pb, pa)
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    return nearest_rank_percentile(pooled, HD95_PERCENTILE)


# ---------------------------------------------------------------------------
# Fréchet distance between embedding sets
# ---------------------------------------------------------------------------

def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        m = np.asarray(vectors, dtype=np.float64)
    else:
        m = np.stack([np.asarray(getattr(v, "values", v), dtype=np.float64)
                      for v in vectors])
    if m.ndim != 2:
        raise ValueError("embedding set must be a 2D matrix or list of vectors")
    return m


def _psd_sqrt(sym: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(set_a, set_b) -> float:
    """||μ_A-μ_B||² + Tr(Σ_A+Σ_B-2(Σ_AΣ_B)^½) with sample (n-1) covariances.

    The matrix square root comes from the symmetric eigendecomposition of
    Σ_A^½ Σ_B Σ_A^½; tiny negative eigenvalues from round-off are clamped to
    zero, and a 1e-6 diagonal regularizer is added when either covariance is
    singular.
    """
    a, b = _as_matrix(set_a), _as_matrix(set_b)
    if a.shape[1] != b.shape[1]:
        raise DataError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise DataError("Fréchet distance needs at least 2 vectors per set")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))

    eps = 1e-6
    if np.linalg.eigvalsh(cov_a).min() < 1e-10 or np.linalg.eigvalsh(cov_b).min() < 1e-10:
        cov_a = cov_a + eps * np.eye(cov_a.shape[0])
        cov_b = cov_b + eps * np.eye(cov_b.shape[0])

    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    eigs = np.clip(np.linalg.eigvalsh(inner), 0.0, None)

    mean_term = float(((mu_a - mu_b) ** 2).sum())
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(eigs).sum())
    return max(mean_term + trace_term, 0.0)


# ---------------------------------------------------------------------------
# Fold aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldScores:
    """Per-fold values of one metric for one (model, test-site) pair."""

    values: tuple[float, ...]
    n_undefined: int = 0

    def __post_init__(self):
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("fold values must be finite")
        if self.n_undefined < 0:
            raise ValueError("n_undefined must be non-negative")

    @classmethod
    def from_values(cls, raw: Sequence[float | None]) -> "FoldScores":
        """Collect raw per-fold results, excluding and counting None entries."""
        kept = tuple(float(v) for v in raw if v is not None)
        return cls(values=kept, n_undefined=sum(1 for v in raw if v is None))


def aggregate_folds(scores: FoldScores) -> tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation of defined folds."""
    if len(scores.values) < 2:
        raise DataError("aggregation needs at least 2 defined fold values")
    return (float(statistics.mean(scores.values)),
            float(statistics.stdev(scores.values)))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test (one-sided) and Bonferroni correction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestOutcome:
    statistic: float          # W: sum of ranks of positive differences
    p_value: float
    n_effective: int          # pairs remaining after zero-difference removal
    method: str               # "exact" or "normal-approximation"

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p_value must lie in [0, 1]")
        if self.method not in ("exact", "normal-approximation"):
            raise ValueError(f"unknown method {self.method!r}")


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n of values ascending, ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_upper_tail(doubled_ranks: list[int], doubled_w: int) -> float:
    """P(W_null >= w) for random signs, via a DP over doubled rank sums."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    favorable = sum(counts[max(doubled_w, 0):])
    return favorable / (1 << len(doubled_ranks))


def wilcoxon_one_sided(x: Sequence[float], y: Sequence[float]) -> TestOutcome:
    """Paired one-sided Wilcoxon signed-rank test of 'x greater than y'.

    Zero differences are dropped (the classic procedure). Exact enumeration
    over sign assignments is used for n_effective <= 25; above that, a normal
    approximation with tie correction and a 0.5 continuity correction.
    """
    if len(x) != len(y):
        raise DataError("paired samples must have equal lengths")
    if len(x) < 5:
        raise DataError("paired test needs at least 5 pairs")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise DataError("all paired differences are zero")

    abs_d = np.abs(d)
    ranks = _average_ranks(abs_d)
    w = float(ranks[d > 0].sum())

    if n <= EXACT_WILCOXON_LIMIT:
        doubled = [round(2.0 * r) for r in ranks]
        p = _exact_upper_tail(doubled, round(2.0 * w))
        return TestOutcome(statistic=w, p_value=min(p, 1.0),
                           n_effective=n, method="exact")

    mean_w = n * (n + 1) / 4.0
    var_w = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(abs_d, return_counts=True)
    var_w -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var_w <= 0:
        raise DataError("degenerate variance: all differences tied")
    z = (w - mean_w - 0.5) / math.sqrt(var_w)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return TestOutcome(statistic=w, p_value=min(max(p, 0.0), 1.0),
                       n_effective=n, method="normal-approximation")


def bonferroni(p_values: Sequence[float], alpha: float) -> list[tuple[float, bool]]:
    """Per-test (corrected threshold, significant?) under Bonferroni."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    if len(p_values) == 0:
        raise ValueError("at least one test is required")
    threshold = alpha / len(p_values)
    return [(threshold, p < threshold) for p in p_values]


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

METRIC_REPORT_HEADER = ["setting", "test_site", "metric", "fold", "value"]


def write_metric_report(path: str | Path,
                        rows: Sequence[tuple[str, str, str, int, float | None]]) -> Path:
    """CSV rows (setting, test_site, metric, fold, value); None -> 'undefined'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_REPORT_HEADER)
        for setting, site, metric, fold, value in rows:
            writer.writerow([setting, site, metric, fold,
                             "undefined" if value is None else repr(float(value))])
    return path


def read_metric_report(path: str | Path) -> list[tuple[str, str, str, int, float | None]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRIC_REPORT_HEADER:
            raise DataError(f"unexpected metric report header: {header}")
        return [(s, site, metric, int(fold),
                 None if value == "undefined" else float(value))
                for s, site, metric, fold, value in reader]
