"""Paired significance testing for per-case Dice scores.

Two-sided Wilcoxon signed-rank test. Up to n = 20 non-zero differences the
p-value comes from the exact conditional distribution (all 2^n sign
assignments of the observed midranks, computed by subset-sum counting);
beyond that a normal approximation with tie correction and continuity
correction is used. Zero differences are dropped; if every difference is
zero the samples are indistinguishable and p = 1.0 by convention.
"""

from __future__ import annotations

import math

import numpy as np

EXACT_LIMIT = 20


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their group mean."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks: np.ndarray, w_plus: float) -> float:
    # Work in doubled ranks so midranks (multiples of 0.5) become integers.
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    n_assignments = 2.0 ** len(ranks)
    w2 = int(round(2.0 * w_plus))
    p_low = counts[: w2 + 1].sum() / n_assignments
    p_high = counts[w2:].sum() / n_assignments
    return min(1.0, 2.0 * min(p_low, p_high))


def _normal_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # Tie correction: subtract sum(t^3 - t)/48 over tie groups.
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0 or w_plus == mean:
        return 1.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(max(0.0, z) / math.sqrt(2.0)))


def significance_test(dice_a, dice_b) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired per-case scores."""
    a = np.asarray(dice_a, dtype=np.float64)
    b = np.asarray(dice_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1D and equal length, got {a.shape} vs {b.shape}")
    if len(a) < 5:
        raise ValueError(f"need at least 5 pairs, got {len(a)}")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    if len(diffs) == 0:
        return 1.0
    ranks = _midranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    if len(diffs) <= EXACT_LIMIT:
        return _exact_p(ranks, w_plus)
    return _normal_p(ranks, w_plus)
