"""Rank-based feature quantization for histogram split finding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BinMapper:
    """Per-feature upper bin boundaries.

    Feature ``f`` has ``len(thresholds[f]) + 1`` regular bins; a value ``x``
    falls in bin ``#{thr < x}``, so "bin <= b" is the same as
    ``x <= thresholds[f][b]``. Masked values go to the extra bin
    ``n_bins[f]``.
    """

    thresholds: tuple

    @property
    def n_features(self) -> int:
        return len(self.thresholds)

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(t) + 1 for t in self.thresholds], dtype=np.int64)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns")
        out = np.empty(X.shape, dtype=np.uint16)
        for f, thr in enumerate(self.thresholds):
            col = X[:, f]
            b = np.searchsorted(thr, col, side="left")
            out[:, f] = np.where(np.isnan(col), len(thr) + 1, b)
        return out


def _feature_thresholds(col: np.ndarray, max_bin: int) -> np.ndarray:
    col = col[~np.isnan(col)]
    if col.size == 0:
        return np.zeros(0)
    uniq, counts = np.unique(col, return_counts=True)
    if uniq.size <= max_bin:
        cut = np.arange(uniq.size - 1)
    else:
        # equal-frequency cut after the distinct value holding rank k*n/max_bin
        ccount = np.cumsum(counts)
        targets = np.arange(1, max_bin) * (col.size / max_bin)
        cut = np.unique(np.searchsorted(ccount, targets - 1e-9, side="left"))
        cut = cut[cut < uniq.size - 1]
    lo, hi = uniq[cut], uniq[cut + 1]
    mid = lo + (hi - lo) / 2.0
    return np.where((mid >= lo) & (mid < hi), mid, lo)


def fit_bins(X: np.ndarray, max_bin: int = 255) -> BinMapper:
    if max_bin < 2:
        raise ValueError("max_bin must be at least 2")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-D feature matrix")
    return BinMapper(tuple(_feature_thresholds(X[:, f], max_bin) for f in range(X.shape[1])))


def build_histograms(X: np.ndarray, max_bin: int = 255) -> tuple:
    """Quantize ``X``; returns ``(mapper, binned)``."""
    mapper = fit_bins(X, max_bin)
    return mapper, mapper.transform(X)
