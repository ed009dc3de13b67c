"""Explanation-to-explanation similarity: SSIM, cosine, Spearman, Euclidean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "SimilarityResult",
    "SimilarityError",
    "ssim",
    "cosine_similarity",
    "spearman_rank",
    "euclidean_distance",
]


class SimilarityError(ValueError):
    pass


@dataclass
class SimilarityResult:
    metric: str
    value: float
    params: dict = field(default_factory=dict)
    degenerate: bool = False     # set when a defined convention replaced an undefined value


def _as2d(a, name: str) -> np.ndarray:
    arr = np.asarray(getattr(a, "array", a), dtype=np.float64)
    if arr.ndim != 2:
        raise SimilarityError(f"{name} must be a 2-D map, got shape {arr.shape}")
    return arr


def _as1d(a, name: str) -> np.ndarray:
    arr = np.asarray(getattr(a, "array", a), dtype=np.float64)
    return arr.reshape(-1)


def ssim(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> SimilarityResult:
    """Mean local structural similarity over sliding uniform windows.

    Both maps are first min-max normalized with their joint range, so the
    dynamic range is 1. Maps smaller than the window fall back to a single
    global window.
    """
    x = _as2d(a, "a")
    y = _as2d(b, "b")
    if x.shape != y.shape:
        raise SimilarityError(f"shape mismatch: {x.shape} vs {y.shape}")
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi > lo:
        x = (x - lo) / (hi - lo)
        y = (y - lo) / (hi - lo)
    else:
        x = np.zeros_like(x)
        y = np.zeros_like(y)

    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    if x.shape[0] < window or x.shape[1] < window:
        wx = x[None, None]
        wy = y[None, None]
    else:
        wx = sliding_window_view(x, (window, window))
        wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    vx = wx.var(axis=(-1, -2))
    vy = wy.var(axis=(-1, -2))
    cov = (wx * wy).mean(axis=(-1, -2)) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return SimilarityResult("ssim", float(score.mean()), {"window": window, "k1": k1, "k2": k2})


def cosine_similarity(a, b) -> SimilarityResult:
    """a.b / (|a||b|); zero-norm inputs yield 0 by convention (flagged)."""
    x = _as1d(a, "a")
    y = _as1d(b, "b")
    if x.shape != y.shape:
        raise SimilarityError(f"length mismatch: {x.size} vs {y.size}")
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        return SimilarityResult("cosine", 0.0, degenerate=True)
    return SimilarityResult("cosine", float(x @ y / (nx * ny)))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    # ties receive the mean of the rank span they occupy
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rank(a, b) -> SimilarityResult:
    """Pearson correlation of average-ranked values.

    Constant inputs have zero rank variance; the correlation is undefined and
    reported as 0 with the degenerate flag set.
    """
    x = _as1d(a, "a")
    y = _as1d(b, "b")
    if x.shape != y.shape:
        raise SimilarityError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise SimilarityError("need at least two values")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = float(np.sqrt((dx * dx).sum() * (dy * dy).sum()))
    if denom == 0.0:
        return SimilarityResult("spearman", 0.0, degenerate=True)
    return SimilarityResult("spearman", float((dx * dy).sum() / denom))


def euclidean_distance(a, b) -> SimilarityResult:
    x = _as1d(a, "a")
    y = _as1d(b, "b")
    if x.shape != y.shape:
        raise SimilarityError(f"length mismatch: {x.size} vs {y.size}")
    return SimilarityResult("euclidean", float(np.linalg.norm(x - y)))
