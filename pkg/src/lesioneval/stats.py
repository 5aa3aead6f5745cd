"""Cohort statistics: paired t-tests with Bonferroni correction, binned MAPE
curves, threshold-subset DSC curves and distribution summaries.

Quantiles use linear interpolation between order statistics (Hyndman-Fan
type 7, numpy's default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc

__all__ = [
    "PairedTestResult",
    "BinnedCurve",
    "Summary",
    "bonferroni",
    "t_sf_two_sided",
    "paired_t_test",
    "mape_curve",
    "threshold_subset_dsc",
    "summary",
    "THRESHOLD_STEPS",
    "UPPER_QUANTILE",
]

# threshold-curve step size per lesion measure
THRESHOLD_STEPS = {
    "suv_mean": 1.0,
    "suv_max": 2.0,
    "n_lesions": 1.0,
    "tmtv_ml": 25.0,
    "tlg_ml": 150.0,
    "dmax_cm": 3.0,
}
UPPER_QUANTILE = 0.85
DEFAULT_N_LOG_BINS = 8


def bonferroni(alpha: float, n_tests: int) -> float:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if n_tests < 1:
        raise ValueError(f"n_tests must be >= 1, got {n_tests}")
    return alpha / n_tests


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom.

    Uses the regularized incomplete beta identity
    ``P = I_{df / (df + t^2)}(df / 2, 1 / 2)``.
    """
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class PairedTestResult:
    t_stat: float
    p_value: float
    n: int
    alpha_corrected: float
    reject: bool
    degenerate: bool = False
    mean_diff: float = 0.0


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05, n_tests: int = 1) -> PairedTestResult:
    """Two-sided paired Student's t-test of mean(a - b) == 0.

    Zero-variance differences are degenerate: all-zero differences give
    t = 0, p = 1; a constant nonzero difference gives t = +/-inf, p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1D and equally long")
    n = a.size
    if n < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {n}")
    alpha_c = bonferroni(alpha, n_tests)
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            t, p = 0.0, 1.0
        else:
            t, p = math.copysign(math.inf, mean), 0.0
        return PairedTestResult(t, p, n, alpha_c, p < alpha_c, degenerate=True, mean_diff=mean)
    t = mean / (sd / math.sqrt(n))
    p = t_sf_two_sided(t, n - 1)
    return PairedTestResult(t, p, n, alpha_c, p < alpha_c, mean_diff=mean)


@dataclass(frozen=True)
class BinnedCurve:
    """Per-bin values.

    For MAPE curves ``bin_edges`` has one more entry than ``bin_values``. For
    threshold curves each edge is the threshold of the matching value.
    """

    bin_edges: tuple[float, ...]
    bin_values: tuple[float, ...]
    bin_counts: tuple[int, ...]

    def rows(self) -> list[dict]:
        paired = len(self.bin_edges) == len(self.bin_values)
        out = []
        for i, (value, count) in enumerate(zip(self.bin_values, self.bin_counts)):
            row = {"bin": i, "lo": self.bin_edges[i]}
            if not paired:
                row["hi"] = self.bin_edges[i + 1]
            row.update(value=value, count=count)
            out.append(row)
        return out


def _mape_edges(values: np.ndarray, brk: float, n_log_bins: int, step: float) -> np.ndarray:
    lo = float(values.min())
    hi = float(values.max())
    edges: list[float] = []
    if n_log_bins > 0 and lo < brk:
        edges.extend(np.geomspace(lo, brk, n_log_bins + 1).tolist())
        edges[-1] = brk
    else:
        edges.append(min(lo, brk))
        if edges[0] < brk:
            edges.append(brk)
    n_lin = max(0, math.ceil((hi - brk) / step - 1e-12))
    edges.extend(brk + k * step for k in range(1, n_lin + 1))
    if len(edges) == 1:
        edges.append(edges[0] + step)
    return np.asarray(edges)


def mape_curve(
    orig: Sequence[float],
    pred: Sequence[float],
    log_linear_break: float | None = None,
    n_log_bins: int = DEFAULT_N_LOG_BINS,
    linear_step: float = 1.0,
) -> BinnedCurve:
    """MAPE as a function of the reference value.

    Cases are bucketed by ``orig``: ``n_log_bins`` logarithmic bins from the
    smallest nonzero value up to the break, then linear bins of width
    ``linear_step`` above it. Bins are half-open ``[lo, hi)`` except the last,
    which is closed. The break defaults to the median of the nonzero
    references. Cases with ``orig == 0`` are excluded; empty bins get NaN.
    """
    orig = np.asarray(orig, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if orig.shape != pred.shape or orig.ndim != 1:
        raise ValueError("orig and pred must be 1D and equally long")
    if orig.size == 0:
        raise ValueError("mape_curve needs at least one case")
    if np.any(orig < 0):
        raise ValueError("mape_curve needs non-negative reference values")
    if linear_step <= 0:
        raise ValueError("linear_step must be positive")
    keep = orig != 0
    if not keep.any():
        raise ValueError("every case has a zero reference value")
    ref, est = orig[keep], pred[keep]
    brk = float(np.median(ref)) if log_linear_break is None else float(log_linear_break)
    if brk <= 0:
        raise ValueError("log/linear break must be positive")
    edges = _mape_edges(ref, brk, n_log_bins, linear_step)
    n_bins = len(edges) - 1
    which = np.clip(np.searchsorted(edges, ref, side="right") - 1, 0, n_bins - 1)
    err = 100.0 * np.abs((est - ref) / ref)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=err, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return BinnedCurve(tuple(edges.tolist()), tuple(values.tolist()), tuple(int(c) for c in counts))


def threshold_subset_dsc(
    measure_values: Sequence[float],
    dsc_values: Sequence[float],
    step: float,
    upper_quantile: float = UPPER_QUANTILE,
) -> BinnedCurve:
    """Median DSC over the cases whose measure is >= t, for a sweep of t.

    Thresholds run from the minimum to the ``upper_quantile`` quantile of the
    measure values, spaced by ``step``: ``t_k = min + k * step``.
    """
    b = np.asarray(measure_values, dtype=np.float64)
    s = np.asarray(dsc_values, dtype=np.float64)
    if b.shape != s.shape or b.ndim != 1:
        raise ValueError("measure_values and dsc_values must be 1D and equally long")
    if b.size == 0:
        raise ValueError("threshold_subset_dsc needs at least one case")
    if step <= 0:
        raise ValueError("step must be positive")
    lo = float(b.min())
    hi = float(np.quantile(b, upper_quantile))
    n_steps = int(math.floor((hi - lo) / step + 1e-9))
    # clamp so rounding in lo + k * step can never overshoot the cap and empty the subset
    thresholds = [min(lo + k * step, hi) for k in range(n_steps + 1)]
    values, counts = [], []
    for t in thresholds:
        member = b >= t
        counts.append(int(member.sum()))
        values.append(float(np.median(s[member])))
    return BinnedCurve(tuple(thresholds), tuple(values), tuple(counts))


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    sd: float
    median: float
    q25: float
    q75: float

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25


def summary(values: Sequence[float]) -> Summary:
    """Mean, sample SD (0 for a single value), median and quartiles."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("summary of an empty list")
    q25, median, q75 = np.quantile(v, [0.25, 0.5, 0.75])
    return Summary(
        n=int(v.size),
        mean=float(v.mean()),
        sd=float(v.std(ddof=1)) if v.size > 1 else 0.0,
        median=float(median),
        q25=float(q25),
        q75=float(q75),
    )
