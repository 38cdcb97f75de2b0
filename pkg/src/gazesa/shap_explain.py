"""Exact Shapley attributions for tree ensembles, plus the summaries built on them."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit
from scipy import stats

from .features import NOMINAL_FEATURES
from .gbdt import ModelFormatError, TreeEnsemble

MAX_BRUTE_FORCE_FEATURES = 20
DEFAULT_BINS = 18


@dataclass(frozen=True)
class Explanation:
    """Attributions for a batch of instances: ``base_value + values.sum(1) == predictions``.

    ``base_value`` is a scalar for one model, or one value per row when
    explanations from several fold models are stacked.
    """

    base_value: object
    values: np.ndarray       # (n, P)
    data: np.ndarray         # (n, P), NaN = masked
    feature_names: tuple
    predictions: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.values.shape[0]

    def local_accuracy_error(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.max(np.abs(self.base_value + self.values.sum(axis=1) - self.predictions)))

    def select(self, rows) -> "Explanation":
        rows = np.asarray(rows)
        base = self.base_value[rows] if np.ndim(self.base_value) else self.base_value
        return Explanation(base, self.values[rows], self.data[rows], self.feature_names,
                           self.predictions[rows])

    @staticmethod
    def concat(parts: Sequence["Explanation"], order: Optional[np.ndarray] = None) -> "Explanation":
        """Stack explanations, optionally reordering the stacked rows by ``order``."""
        values = np.concatenate([p.values for p in parts])
        data = np.concatenate([p.data for p in parts])
        preds = np.concatenate([p.predictions for p in parts])
        base = np.concatenate([np.broadcast_to(p.base_value, len(p)) for p in parts]).astype(float)
        if order is not None:
            values, data, preds, base = values[order], data[order], preds[order], base[order]
        return Explanation(base, values, data, parts[0].feature_names, preds)


def _as_matrix(ensemble: TreeEnsemble, instance) -> np.ndarray:
    if isinstance(instance, Mapping):
        return ensemble.row_vector(instance)[None, :]
    X = np.asarray(instance, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != ensemble.n_features:
        raise ValueError(f"instance must have {ensemble.n_features} features")
    return X


# --- polynomial-time algorithm ---

@dataclass
class _Paths:
    """Every root-to-leaf path with repeated features merged.

    Path entry ``k`` (one unique feature of one leaf) carries the product of cover
    ratios ``z`` of its edges and the edge range used to decide whether an
    instance follows all of them.
    """

    leaf_value: np.ndarray
    path_start: np.ndarray
    path_len: np.ndarray
    feature: np.ndarray
    z: np.ndarray
    edge_start: np.ndarray
    edge_stop: np.ndarray
    edge_threshold: np.ndarray
    edge_default_left: np.ndarray
    edge_goes_left: np.ndarray
    expected: float


def _collect_paths(ensemble: TreeEnsemble) -> _Paths:
    leaf_value, path_start, path_len = [], [], []
    feature, z, e_start, e_stop = [], [], [], []
    e_thr, e_dl, e_left = [], [], []
    expected = 0.0
    for tree in ensemble.trees:
        tree.validate()
        stack = [(0, [])]
        while stack:
            node, edges = stack.pop()
            if tree.feature[node] >= 0:
                f, c = int(tree.feature[node]), tree.cover[node]
                for child, goes_left in ((tree.left[node], True), (tree.right[node], False)):
                    edge = (f, tree.threshold[node], bool(tree.default_left[node]), goes_left,
                            tree.cover[child] / c)
                    stack.append((int(child), edges + [edge]))
                continue
            merged: dict = {}
            for edge in edges:
                merged.setdefault(edge[0], []).append(edge)
            leaf_value.append(tree.value[node])
            path_start.append(len(feature))
            path_len.append(len(merged))
            ratio = 1.0
            for f in sorted(merged):
                feature.append(f)
                zf = 1.0
                e_start.append(len(e_thr))
                for _, thr, dl, gl, r in merged[f]:
                    e_thr.append(thr)
                    e_dl.append(dl)
                    e_left.append(gl)
                    zf *= r
                e_stop.append(len(e_thr))
                z.append(zf)
                ratio *= zf
            expected += tree.value[node] * ratio
    return _Paths(
        leaf_value=np.array(leaf_value, dtype=float),
        path_start=np.array(path_start, dtype=np.int64),
        path_len=np.array(path_len, dtype=np.int64),
        feature=np.array(feature, dtype=np.int64),
        z=np.array(z, dtype=float),
        edge_start=np.array(e_start, dtype=np.int64),
        edge_stop=np.array(e_stop, dtype=np.int64),
        edge_threshold=np.array(e_thr, dtype=float),
        edge_default_left=np.array(e_dl, dtype=np.bool_),
        edge_goes_left=np.array(e_left, dtype=np.bool_),
        expected=expected,
    )


@njit(cache=True)
def _shapley_weights(max_m):
    # w[m, s] = s! (m - s - 1)! / m!
    w = np.zeros((max_m + 1, max_m + 1))
    for m in range(1, max_m + 1):
        for s in range(m):
            w[m, s] = math.exp(math.lgamma(s + 1) + math.lgamma(m - s) - math.lgamma(m + 1))
    return w


@njit(cache=True)
def _tree_shap_kernel(X, leaf_value, path_start, path_len, feature, z, edge_start, edge_stop,
                      edge_threshold, edge_default_left, edge_goes_left, weights):
    n, p = X.shape
    out = np.zeros((n, p))
    max_m = weights.shape[0] - 1
    o = np.empty(max_m)
    poly = np.empty(max_m + 1)
    quot = np.empty(max_m + 1)
    for i in range(n):
        for leaf in range(leaf_value.size):
            m = path_len[leaf]
            if m == 0:
                continue
            s0 = path_start[leaf]
            for k in range(m):
                ok = 1.0
                for e in range(edge_start[s0 + k], edge_stop[s0 + k]):
                    v = X[i, feature[s0 + k]]
                    if v != v:
                        left = edge_default_left[e]
                    else:
                        left = v <= edge_threshold[e]
                    if left != edge_goes_left[e]:
                        ok = 0.0
                        break
                o[k] = ok
            # poly(t) = prod_k (z_k + o_k t)
            poly[0] = 1.0
            for d in range(1, m + 1):
                poly[d] = 0.0
            for k in range(m):
                zk, ok = z[s0 + k], o[k]
                for d in range(k + 1, 0, -1):
                    poly[d] = poly[d] * zk + poly[d - 1] * ok
                poly[0] *= zk
            for k in range(m):
                zk, ok = z[s0 + k], o[k]
                if ok == 1.0:
                    # synthetic division by (z_k + t), from the top coefficient down
                    quot[m - 1] = poly[m]
                    for d in range(m - 1, 0, -1):
                        quot[d - 1] = poly[d] - zk * quot[d]
                else:
                    for d in range(m):
                        quot[d] = poly[d] / zk
                acc = 0.0
                for s in range(m):
                    acc += quot[s] * weights[m, s]
                out[i, feature[s0 + k]] += leaf_value[leaf] * (ok - zk) * acc
    return out


def _paths_for(ensemble: TreeEnsemble) -> _Paths:
    cached = getattr(ensemble, "_shap_paths", None)
    if cached is None:
        cached = _collect_paths(ensemble)
        ensemble._shap_paths = cached
    return cached


def shap_values(ensemble: TreeEnsemble, instance) -> Explanation:
    """Path-dependent tree Shapley values for one instance (mapping or vector) or a matrix."""
    X = np.ascontiguousarray(_as_matrix(ensemble, instance))
    paths = _paths_for(ensemble)
    base = ensemble.base_score + ensemble.learning_rate * paths.expected
    if paths.leaf_value.size == 0:
        values = np.zeros(X.shape)
    else:
        max_m = max(int(paths.path_len.max()), 1)
        raw = _tree_shap_kernel(X, paths.leaf_value, paths.path_start, paths.path_len, paths.feature,
                                paths.z, paths.edge_start, paths.edge_stop, paths.edge_threshold,
                                paths.edge_default_left, paths.edge_goes_left, _shapley_weights(max_m))
        values = ensemble.learning_rate * raw
    return Explanation(base, values, X.copy(), ensemble.feature_names, ensemble.predict(X))


# --- subset-enumeration oracle ---

def _subset_values(tree, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """f_x(S) for every bitmask S: features in S follow x, the rest split by cover."""
    total = np.zeros(masks.size)
    stack = [(0, np.ones(masks.size))]
    while stack:
        node, w = stack.pop()
        f = tree.feature[node]
        if f < 0:
            total += w * tree.value[node]
            continue
        lo, hi = tree.left[node], tree.right[node]
        v = x[f]
        goes_left = bool(tree.default_left[node]) if np.isnan(v) else bool(v <= tree.threshold[node])
        known = ((masks >> f) & 1).astype(bool)
        c = tree.cover[node]
        w_lo = np.where(known, w * goes_left, w * (tree.cover[lo] / c))
        w_hi = np.where(known, w * (not goes_left), w * (tree.cover[hi] / c))
        stack.append((int(lo), w_lo))
        stack.append((int(hi), w_hi))
    return total


def brute_force_shap(ensemble: TreeEnsemble, instance) -> Explanation:
    """Shapley values by enumerating every feature subset (exponential; P <= 20)."""
    p = ensemble.n_features
    if p > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(
            f"brute force needs 2^{p} subsets; refuse above {MAX_BRUTE_FORCE_FEATURES} features "
            "(use shap_values instead, or explain a feature subset)"
        )
    for tree in ensemble.trees:
        tree.validate()
    X = _as_matrix(ensemble, instance)
    masks = np.arange(2 ** p, dtype=np.int64)
    size = np.array([bin(int(m)).count("1") for m in masks])
    fact = [math.factorial(k) for k in range(p + 1)]
    weight = np.array([fact[s] * fact[p - s - 1] / fact[p] if s < p else 0.0 for s in size])
    values = np.zeros(X.shape)
    base = ensemble.base_score
    for i, x in enumerate(X):
        F = np.full(masks.size, ensemble.base_score)
        for tree in ensemble.trees:
            F = F + ensemble.learning_rate * _subset_values(tree, x, masks)
        base = float(F[0])
        for f in range(p):
            without = masks[(masks >> f) & 1 == 0]
            values[i, f] = np.sum(weight[without] * (F[without | (1 << f)] - F[without]))
    return Explanation(base, values, X.copy(), ensemble.feature_names, ensemble.predict(X))


# --- global importance ---

@dataclass(frozen=True)
class ImportanceTable:
    feature_names: tuple
    impact: np.ndarray     # sum of |phi| per feature
    rank: np.ndarray       # 1 = most important
    values: np.ndarray     # (n, P) scatter of phi
    data: np.ndarray       # (n, P) matching feature values

    def order(self) -> np.ndarray:
        return np.argsort(self.rank)

    def ranked_names(self) -> list:
        return [self.feature_names[i] for i in self.order()]


def global_importance(explanations: Explanation) -> ImportanceTable:
    impact = np.abs(explanations.values).sum(axis=0)
    order = np.lexsort((np.arange(impact.size), -impact))
    rank = np.empty(impact.size, dtype=np.int64)
    rank[order] = np.arange(1, impact.size + 1)
    return ImportanceTable(explanations.feature_names, impact, rank, explanations.values, explanations.data)


# --- main effects ---

@dataclass(frozen=True)
class EffectBin:
    label: str
    lo: float
    hi: float
    count: int
    summary: tuple  # min, q1, median, q3, max of phi (NaN when empty)


@dataclass(frozen=True)
class MainEffect:
    feature: str
    method: str
    bins: tuple
    r: float
    p_value: float
    n: int
    flags: tuple = field(default=())

    @property
    def counts(self) -> list:
        return [b.count for b in self.bins]


def _five(v: np.ndarray) -> tuple:
    if v.size == 0:
        return (math.nan,) * 5
    return tuple(float(q) for q in np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0]))


def correlation(x: np.ndarray, y: np.ndarray, method: str = "pearson") -> tuple:
    """``(r, p, degenerate)``; a degenerate pair reports ``r = 0, p = 1``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if method == "spearman":
        x, y = stats.rankdata(x), stats.rankdata(y)
    elif method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")
    n = x.size
    if n < 3:
        return 0.0, 1.0, True
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    scale = max(np.max(np.abs(x)), np.max(np.abs(y)), 1e-300)
    if sxx <= (1e-12 * scale) ** 2 * n or syy <= (1e-12 * scale) ** 2 * n:
        return 0.0, 1.0, True
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) >= 1.0:
        return r, 0.0, False
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2)), False


def _equal_frequency_bins(v: np.ndarray, k: int) -> np.ndarray:
    # rank-based bins that never split a run of tied values
    uniq, inverse = np.unique(v, return_inverse=True)
    if uniq.size <= k:
        return inverse
    order = np.argsort(v, kind="stable")
    sv = v[order]
    first = np.searchsorted(sv, sv, side="left")
    b_sorted = (first * k) // v.size
    out = np.empty(v.size, dtype=np.int64)
    out[order] = b_sorted
    _, dense = np.unique(out, return_inverse=True)
    return dense


def main_effect(feature: str, x: np.ndarray, phi: np.ndarray, nominal: bool = False,
                n_bins: int = DEFAULT_BINS) -> MainEffect:
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    ok = ~np.isnan(x)
    method = "spearman" if nominal else "pearson"
    bins = []
    if not ok.any():
        masked = EffectBin("masked", math.nan, math.nan, int(x.size), _five(phi))
        return MainEffect(feature, method, (masked,), 0.0, 1.0, int(x.size), ("all_masked",))
    xv, pv = x[ok], phi[ok]
    if nominal:
        levels, idx = np.unique(xv, return_inverse=True)
    else:
        idx = _equal_frequency_bins(xv, min(n_bins, np.unique(xv).size))
        levels = np.unique(idx)
    for b in range(len(levels)):
        sel = idx == b
        lo, hi = float(xv[sel].min()), float(xv[sel].max())
        label = f"{lo:g}" if nominal else f"[{lo:g}, {hi:g}]"
        bins.append(EffectBin(label, lo, hi, int(sel.sum()), _five(pv[sel])))
    if (~ok).any():
        bins.append(EffectBin("masked", math.nan, math.nan, int((~ok).sum()), _five(phi[~ok])))
    r, p, degenerate = correlation(xv, pv, method)
    flags = ("degenerate_correlation",) if degenerate else ()
    return MainEffect(feature, method, tuple(bins), r, p, int(x.size), flags)


def main_effects(explanations: Explanation, nominal: Sequence[str] = NOMINAL_FEATURES,
                 n_bins: Optional[Mapping[str, int]] = None) -> list:
    n_bins = n_bins or {}
    return [
        main_effect(name, explanations.data[:, j], explanations.values[:, j], name in nominal,
                    n_bins.get(name, DEFAULT_BINS))
        for j, name in enumerate(explanations.feature_names)
    ]


# --- per-instance report ---

@dataclass(frozen=True)
class InstanceReport:
    base_value: float
    prediction: float
    rows: tuple  # (feature, value, phi) sorted by |phi| descending, zeros dropped

    @property
    def residual(self) -> float:
        return self.prediction - self.base_value - sum(r[2] for r in self.rows)

    def to_text(self) -> str:
        lines = [f"base value  {self.base_value:.6f}"]
        for name, value, phi in self.rows:
            shown = "masked" if math.isnan(value) else f"{value:.6g}"
            lines.append(f"{phi:+.6f}  {name} = {shown}")
        lines.append(f"prediction  {self.prediction:.6f}")
        lines.append(f"sum check   {self.residual:.3e}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "value", "shap"])
            w.writerow(["(base)", "", repr(float(self.base_value))])
            for name, value, phi in self.rows:
                w.writerow([name, "" if math.isnan(value) else repr(float(value)), repr(float(phi))])
            w.writerow(["(prediction)", "", repr(float(self.prediction))])


def explain_instance(ensemble: TreeEnsemble, instance) -> InstanceReport:
    e = shap_values(ensemble, instance)
    phi, x = e.values[0], e.data[0]
    order = np.lexsort((np.arange(phi.size), -np.abs(phi)))
    rows = tuple((e.feature_names[j], float(x[j]), float(phi[j])) for j in order if phi[j] != 0.0)
    return InstanceReport(e.base_value, float(e.predictions[0]), rows)


# --- files ---

def write_shap_csv(path, explanations: Explanation, row_ids: Optional[Sequence] = None) -> None:
    ids = row_ids if row_ids is not None else [(i,) for i in range(len(explanations))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["participant_id", "trial_id"] if ids and len(ids[0]) == 2 else ["row"]
        w.writerow(head + ["feature", "value", "shap"])
        for i, rid in enumerate(ids):
            for j, name in enumerate(explanations.feature_names):
                v = explanations.data[i, j]
                w.writerow(list(rid) + [name, "" if np.isnan(v) else repr(float(v)),
                                        repr(float(explanations.values[i, j]))])


def write_importance_csv(path, table: ImportanceTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "impact", "rank"])
        for j in table.order():
            w.writerow([table.feature_names[j], repr(float(table.impact[j])), int(table.rank[j])])


def write_main_effects_csv(path, effects: Sequence[MainEffect]) -> None:
    def num(v):
        return "" if math.isnan(v) else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "bin", "lo", "hi", "count", "min", "q1", "median", "q3", "max",
                    "method", "r", "p", "flags"])
        for eff in effects:
            for b in eff.bins:
                w.writerow([eff.feature, b.label, num(b.lo), num(b.hi), b.count] + [num(s) for s in b.summary]
                           + [eff.method, repr(float(eff.r)), repr(float(eff.p_value)), ";".join(eff.flags)])


def write_importance_svg(path, table: ImportanceTable, top: int = 16) -> None:
    """Horizontal bar chart of global impact."""
    order = table.order()[:top]
    width, bar_h, left = 640, 22, 190
    height = 30 + bar_h * len(order)
    peak = float(table.impact[order].max()) if len(order) and table.impact[order].max() > 0 else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{left}" y="16">sum |SHAP|</text>']
    for row, j in enumerate(order):
        y = 24 + row * bar_h
        w = (width - left - 80) * float(table.impact[j]) / peak
        parts.append(f'<text x="{left - 6}" y="{y + 14}" text-anchor="end">{table.feature_names[j]}</text>')
        parts.append(f'<rect x="{left}" y="{y + 3}" width="{w:.2f}" height="{bar_h - 6}" fill="#3b75af"/>')
        parts.append(f'<text x="{left + w + 4:.2f}" y="{y + 14}">{float(table.impact[j]):.4g}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
