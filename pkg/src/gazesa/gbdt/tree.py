"""Leaf-wise regression tree on binned features with second-order split gains."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit


class ModelFormatError(ValueError):
    """A tree violates structural invariants (bad children, zero cover, ...)."""


@dataclass
class Tree:
    """Array-of-nodes tree. Node 0 is the root; leaves have ``feature == -1``.

    ``value`` holds raw leaf outputs (before the learning rate). ``cover`` is the
    number of training rows routed through each node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    # bin-space thresholds; only present on freshly grown trees
    split_bin: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] < 0:
                best = max(best, d)
            else:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def validate(self) -> None:
        n = self.n_nodes
        if n == 0:
            raise ModelFormatError("tree has no nodes")
        arrays = (self.threshold, self.default_left, self.left, self.right, self.value, self.cover)
        if any(a.size != n for a in arrays):
            raise ModelFormatError("node arrays differ in length")
        if not np.all(np.isfinite(self.cover)) or np.any(self.cover <= 0):
            raise ModelFormatError("node with zero or non-finite cover")
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        while stack:
            node = stack.pop()
            if seen[node]:
                raise ModelFormatError("node reachable twice")
            seen[node] = True
            if self.feature[node] >= 0:
                lo, hi = int(self.left[node]), int(self.right[node])
                if not (0 < lo < n and 0 < hi < n):
                    raise ModelFormatError(f"node {node} has invalid children")
                if not np.isclose(self.cover[node], self.cover[lo] + self.cover[hi], rtol=1e-9, atol=0):
                    raise ModelFormatError(f"cover of node {node} is not the sum of its children")
                stack += [lo, hi]
            elif not np.isfinite(self.value[node]):
                raise ModelFormatError(f"leaf {node} has non-finite value")
        if not seen.all():
            raise ModelFormatError("unreachable nodes")

    def apply_binned(self, binned: np.ndarray, n_bins: np.ndarray) -> np.ndarray:
        """Leaf index per row, routing on bins (training rows)."""
        node = np.zeros(binned.shape[0], dtype=np.int64)
        active = np.arange(binned.shape[0])
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            internal = f >= 0
            active, nd, f = active[internal], nd[internal], f[internal]
            if not active.size:
                break
            b = binned[active, f].astype(np.int64)
            miss = b == n_bins[f]
            go_left = np.where(miss, self.default_left[nd], b <= self.split_bin[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index per row, routing on raw values; NaN follows the default direction."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            internal = f >= 0
            active, nd, f = active[internal], nd[internal], f[internal]
            if not active.size:
                break
            x = X[active, f]
            go_left = np.where(np.isnan(x), self.default_left[nd], x <= self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class _Leaf:
    node: int
    rows: np.ndarray
    hist: np.ndarray  # (3, total_bins): gradient, hessian, count
    gain: float = -np.inf
    feature: int = -1
    bin: int = -1
    default_left: bool = True


class _Layout:
    """Flat histogram layout: feature ``f`` owns ``n_bins[f] + 1`` slots (last = masked)."""

    def __init__(self, n_bins: np.ndarray):
        self.n_bins = np.asarray(n_bins, dtype=np.int64)
        slots = self.n_bins + 1
        self.offsets = np.concatenate(([0], np.cumsum(slots)[:-1])).astype(np.int64)
        self.total = int(slots.sum())


def _histogram(flat_bins: np.ndarray, rows: np.ndarray, g: np.ndarray, h: np.ndarray, total: int) -> np.ndarray:
    idx = flat_bins[rows].ravel()
    p = flat_bins.shape[1]
    out = np.empty((3, total))
    out[0] = np.bincount(idx, weights=np.repeat(g[rows], p), minlength=total)
    out[1] = np.bincount(idx, weights=np.repeat(h[rows], p), minlength=total)
    out[2] = np.bincount(idx, minlength=total)
    return out


@njit(cache=True)
def _split_search(hist: np.ndarray, offsets: np.ndarray, n_bins: np.ndarray, lam: float, min_data: int):
    # scan order (feature, bin, direction) with strict ">" keeps the first maximum;
    # direction 0 sends masked rows left
    best_gain, best_f, best_b, best_d = -np.inf, -1, -1, 0
    for f in range(n_bins.size):
        o, nb = offsets[f], n_bins[f]
        mg, mh, mc = hist[0, o + nb], hist[1, o + nb], hist[2, o + nb]
        G, H, C = 0.0, 0.0, 0.0
        for b in range(nb):
            G += hist[0, o + b]
            H += hist[1, o + b]
            C += hist[2, o + b]
        G, H, C = G + mg, H + mh, C + mc
        parent = G * G / (H + lam)
        gl, hl, cl = 0.0, 0.0, 0.0
        for b in range(nb - 1):
            gl += hist[0, o + b]
            hl += hist[1, o + b]
            cl += hist[2, o + b]
            for d in range(2):
                if d == 0:
                    g_l, h_l, c_l = gl + mg, hl + mh, cl + mc
                else:
                    g_l, h_l, c_l = gl, hl, cl
                g_r, h_r, c_r = G - g_l, H - h_l, C - c_l
                if c_l < min_data or c_r < min_data or h_l + lam <= 0 or h_r + lam <= 0:
                    continue
                gain = 0.5 * (g_l * g_l / (h_l + lam) + g_r * g_r / (h_r + lam) - parent)
                if gain > best_gain:
                    best_gain, best_f, best_b, best_d = gain, f, b, d
    return best_gain, best_f, best_b, best_d


def _best_split(leaf: _Leaf, layout: _Layout, lam: float, min_data: int) -> None:
    gain, f, b, d = _split_search(leaf.hist, layout.offsets, layout.n_bins, float(lam), int(min_data))
    if np.isfinite(gain) and gain > 0:
        leaf.gain, leaf.feature, leaf.bin, leaf.default_left = float(gain), int(f), int(b), d == 0
    else:
        leaf.gain = -np.inf


def grow_tree(binned: np.ndarray, n_bins: np.ndarray, thresholds: tuple, gradients: np.ndarray,
              hessians: np.ndarray, num_leaves: int, lambda_l2: float, min_data_in_leaf: int) -> Tree:
    """Best-first growth: split the frontier leaf with the largest gain until the budget is spent.

    Gradients and hessians are per-row (already GOSS-weighted). Leaf values are
    ``-G / (H + lambda)``; covers are row counts of ``binned``.
    """
    n, p = binned.shape
    layout = _Layout(n_bins)
    flat_bins = binned.astype(np.int64) + layout.offsets[None, :]
    g = np.asarray(gradients, dtype=float)
    h = np.asarray(hessians, dtype=float)

    feature, split_bin, threshold, default_left = [-1], [-1], [np.nan], [True]
    left, right, value, cover = [-1], [-1], [0.0], [float(n)]

    def leaf_value(rows):
        return -float(g[rows].sum()) / (float(h[rows].sum()) + lambda_l2)

    root = _Leaf(0, np.arange(n), _histogram(flat_bins, np.arange(n), g, h, layout.total))
    value[0] = leaf_value(root.rows)
    frontier = []
    if num_leaves >= 2 and n >= 2 * min_data_in_leaf:
        _best_split(root, layout, lambda_l2, min_data_in_leaf)
        frontier.append(root)
    n_leaves = 1
    while n_leaves < num_leaves:
        cands = [lf for lf in frontier if lf.gain > 0]
        if not cands:
            break
        leaf = max(cands, key=lambda lf: (lf.gain, -lf.node))
        frontier.remove(leaf)
        f, b = leaf.feature, leaf.bin
        bins = binned[leaf.rows, f].astype(np.int64)
        go_left = np.where(bins == n_bins[f], leaf.default_left, bins <= b)
        rows_l, rows_r = leaf.rows[go_left], leaf.rows[~go_left]
        if rows_l.size <= rows_r.size:
            hist_l = _histogram(flat_bins, rows_l, g, h, layout.total)
            hist_r = leaf.hist - hist_l
        else:
            hist_r = _histogram(flat_bins, rows_r, g, h, layout.total)
            hist_l = leaf.hist - hist_r

        k = leaf.node
        feature[k], split_bin[k], default_left[k] = f, b, leaf.default_left
        threshold[k] = float(thresholds[f][b])
        children = []
        for rows, hist in ((rows_l, hist_l), (rows_r, hist_r)):
            node = len(feature)
            feature.append(-1)
            split_bin.append(-1)
            threshold.append(np.nan)
            default_left.append(True)
            left.append(-1)
            right.append(-1)
            value.append(leaf_value(rows))
            cover.append(float(rows.size))
            children.append(node)
            child = _Leaf(node, rows, hist)
            if rows.size >= 2 * min_data_in_leaf:
                _best_split(child, layout, lambda_l2, min_data_in_leaf)
            frontier.append(child)
        left[k], right[k] = children
        value[k] = 0.0
        n_leaves += 1

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=float),
        default_left=np.array(default_left, dtype=bool),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=float),
        cover=np.array(cover, dtype=float),
        split_bin=np.array(split_bin, dtype=np.int64),
    )
