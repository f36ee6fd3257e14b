"""Winner-takes-all equivalence between short- and long-window matching.

Short-window queries are grouped into bins covered by one long-window query.
A bin is upgraded (every short query marked correct) when at least
``threshold`` of its short matches are correct and the long-window match
covering it is correct as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_binary_vector, check_fraction, check_int
from .vpr import recall_at_k, top1_correct

SWEEP_COLUMNS = ("threshold", "raw_recall1", "adjusted_recall1", "large_recall1", "bins_upgraded")


@dataclass(frozen=True)
class WtaResult:
    adjusted_correct_small: np.ndarray
    adjusted_recall1: float
    raw_recall1: float
    bins_upgraded: int
    n_bins: int
    dropped_small: int


def _apply(correct_small, bins, correct_large, threshold):
    """``bins`` lists, per long query, the short-query indices it covers."""
    adjusted = correct_small.copy()
    binned = []
    upgraded = 0
    for b, members in enumerate(bins):
        if members.size == 0:
            continue
        binned.append(members)
        if correct_large[b] and correct_small[members].mean() >= threshold:
            if not correct_small[members].all():
                upgraded += 1
            adjusted[members] = 1
    used = np.concatenate(binned) if binned else np.zeros(0, dtype=np.int64)
    if used.size == 0:
        raise ValueError("no complete bin: every short-window query was dropped")
    dropped = correct_small.size - used.size
    return WtaResult(adjusted, float(adjusted[used].mean()), float(correct_small[used].mean()),
                     upgraded, len(binned), int(dropped))


def wta_adjust(correct_small, correct_large, ratio: int, threshold: float) -> WtaResult:
    """Index-aligned bins: short query ``k`` belongs to long query ``k // ratio``.

    Only fully covered bins are scored; trailing short queries are counted in
    ``dropped_small``. ``bins_upgraded`` counts bins that actually changed.
    """
    ratio = check_int(ratio, "ratio", 1)
    threshold = check_fraction(threshold, "threshold")
    small = check_binary_vector(correct_small, "correct_small")
    large = check_binary_vector(correct_large, "correct_large")
    if small.size < ratio * large.size - ratio + 1:
        raise ValueError(
            f"{small.size} short queries cannot cover {large.size} long queries at ratio {ratio}")
    n_bins = min(large.size, small.size // ratio)
    bins = [np.arange(b * ratio, (b + 1) * ratio) for b in range(n_bins)]
    return _apply(small, bins, large, threshold)


def wta_adjust_by_time(correct_small, small_t_begin, correct_large, large_t_begin,
                       large_t_end, threshold: float) -> WtaResult:
    """Bins by containment: a short query joins the long query whose span holds its start.

    Meant for fixed-count frames whose durations vary.
    """
    threshold = check_fraction(threshold, "threshold")
    small = check_binary_vector(correct_small, "correct_small")
    large = check_binary_vector(correct_large, "correct_large")
    s_begin = np.asarray(small_t_begin, dtype=np.int64)
    l_begin = np.asarray(large_t_begin, dtype=np.int64)
    l_end = np.asarray(large_t_end, dtype=np.int64)
    if s_begin.shape != small.shape or l_begin.shape != large.shape or l_end.shape != large.shape:
        raise ValueError("timestamps must align with the correctness sequences")
    owner = np.searchsorted(l_begin, s_begin, side="right") - 1
    inside = (owner >= 0) & (s_begin < l_end[np.clip(owner, 0, None)])
    owner = np.where(inside, owner, -1)
    bins = [np.flatnonzero(owner == b) for b in range(large.size)]
    return _apply(small, bins, large, threshold)


def wta_sweep(d_small, gt_small, d_large, gt_large, ratio: int, thresholds):
    """Recall@1 before and after the WTA upgrade for each threshold.

    Returns a list of row dicts keyed by :data:`SWEEP_COLUMNS`.
    """
    ratio = check_int(ratio, "ratio", 1)
    correct_small = top1_correct(d_small, gt_small)
    correct_large = top1_correct(d_large, gt_large)
    if correct_small.size < ratio * correct_large.size - ratio + 1:
        raise ValueError("short-window query count is inconsistent with the ratio")
    large_recall = recall_at_k(d_large, gt_large, 1)
    rows = []
    for threshold in thresholds:
        res = wta_adjust(correct_small, correct_large, ratio, threshold)
        rows.append({
            "threshold": float(threshold),
            "raw_recall1": res.raw_recall1,
            "adjusted_recall1": res.adjusted_recall1,
            "large_recall1": large_recall,
            "bins_upgraded": res.bins_upgraded,
            "dropped_small": res.dropped_small,
        })
    return rows


def integer_ratio(large, small):
    """``large / small`` as an int; non-integer ratios are rejected."""
    large, small = check_int(large, "large", 1), check_int(small, "small", 1)
    if large % small:
        raise ValueError(f"ratio {large}/{small} is not an integer")
    return large // small
