"""Gradient-based one-side sampling."""
from __future__ import annotations

import math

import numpy as np


def _count(rate: float, n: int) -> int:
    return math.ceil(rate * n - 1e-9)


def goss_sample(gradients: np.ndarray, top_rate: float, other_rate: float, rng) -> tuple:
    """Keep the largest-|gradient| rows and a re-weighted random share of the rest.

    The top ``ceil(top_rate * n)`` rows by absolute gradient (ties: lower index
    first) keep weight 1; ``ceil(other_rate * n)`` rows drawn uniformly from the
    remainder get weight ``(1 - top_rate) / other_rate``. When the two counts
    cover every row, all rows are kept with weight 1.

    Returns ``(indices, weights)`` with indices ascending.
    """
    if not (top_rate > 0 and other_rate > 0 and top_rate + other_rate <= 1 + 1e-12):
        raise ValueError("GOSS needs 0 < top_rate, 0 < other_rate, top_rate + other_rate <= 1")
    g = np.asarray(gradients, dtype=float)
    n = g.size
    n_top, n_other = _count(top_rate, n), _count(other_rate, n)
    if n_top + n_other >= n:
        return np.arange(n), np.ones(n)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    order = np.argsort(-np.abs(g), kind="stable")
    top = order[:n_top]
    other = rng.choice(np.sort(order[n_top:]), size=n_other, replace=False)
    idx = np.concatenate([top, other])
    w = np.concatenate([np.ones(n_top), np.full(n_other, (1.0 - top_rate) / other_rate)])
    perm = np.argsort(idx, kind="stable")
    return idx[perm], w[perm]
