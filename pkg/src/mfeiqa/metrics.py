"""SRCC / PLCC between predicted and subjective quality scores."""
from __future__ import annotations

import numpy as np


def _pairs(pred, obj):
    p = np.asarray(pred, dtype=np.float64).ravel()
    o = np.asarray(obj, dtype=np.float64).ravel()
    if p.shape != o.shape:
        raise ValueError(f"length mismatch: {p.size} vs {o.size}")
    if p.size < 2:
        raise ValueError("need at least two score pairs")
    if not (np.isfinite(p).all() and np.isfinite(o).all()):
        raise ValueError("scores must be finite")
    return p, o


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    ranks = np.empty(x.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def plcc(pred, obj) -> float:
    p, o = _pairs(pred, obj)
    pc, oc = p - p.mean(), o - o.mean()
    den = np.sqrt((pc * pc).sum() * (oc * oc).sum())
    if den == 0:
        raise ValueError("correlation undefined for a constant score vector")
    return float(np.clip((pc * oc).sum() / den, -1.0, 1.0))


def srcc(pred, obj) -> float:
    """Pearson correlation of average ranks (equals the 1 - 6 sum d^2 / (B(B^2-1)) form without ties)."""
    p, o = _pairs(pred, obj)
    return plcc(average_ranks(p), average_ranks(o))


def srcc_closed_form(pred, obj) -> float:
    """Rank-difference formula; exact only for tie-free data."""
    p, o = _pairs(pred, obj)
    d = average_ranks(p) - average_ranks(o)
    b = p.size
    return float(1.0 - 6.0 * (d * d).sum() / (b * (b * b - 1)))
