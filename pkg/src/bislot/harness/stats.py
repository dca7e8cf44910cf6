"""Across-seed statistics: exact Wilcoxon signed-rank test and summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Rng


@dataclass
class WilcoxonResult:
    w: float          # min(W+, W-)
    w_plus: float
    w_minus: float
    p_value: float    # exact, two-sided
    n: int            # pairs after dropping zero differences


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_null(ranks) -> dict[int, int]:
    """Counts of 2*W+ over all 2^n sign patterns (doubled to keep midranks integral)."""
    counts = {0: 1}
    for r in (int(round(2 * r)) for r in ranks):
        nxt: dict[int, int] = {}
        for s, c in counts.items():
            nxt[s] = nxt.get(s, 0) + c
            nxt[s + r] = nxt.get(s + r, 0) + c
        counts = nxt
    return counts


def wilcoxon_signed_rank(x, y=None) -> WilcoxonResult:
    """Exact two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; if nothing remains the test is degenerate
    and reported as W = 0, p = 1.  Tied magnitudes receive midranks and the
    null distribution is enumerated over those midranks.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 0.0, 1.0, 0)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    counts = signed_rank_null(ranks)
    total = 2 ** n
    tail = sum(c for s, c in counts.items() if s <= int(round(2 * w)))
    p = min(1.0, 2.0 * tail / total)
    return WilcoxonResult(w, w_plus, w_minus, p, n)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def normal_ci(values, z: float = 1.96) -> tuple[float, float]:
    m, s = mean_std(values)
    half = z * s / np.sqrt(max(len(values), 1))
    return m - half, m + half


def bootstrap_ci(values, seed: int = 0, n_boot: int = 2000, level: float = 0.95):
    """Percentile bootstrap interval of the mean over seeds."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        m = float(v.mean()) if len(v) else float("nan")
        return m, m
    rng = Rng(seed, stream_id=31)
    idx = rng.integers(0, len(v), (n_boot, len(v)))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)
