"""Additive tree ensemble trained by second-order boosting with GOSS."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .binning import fit_bins
from .goss import goss_sample
from .tree import ModelFormatError, Tree, grow_tree

MODEL_FORMAT = "gazesa-gbdt"
MODEL_VERSION = 1


class RegistryError(KeyError):
    """A feature row does not match the model's feature registry."""


@dataclass(frozen=True)
class TrainConfig:
    num_leaves: int = 100
    learning_rate: float = 0.05
    num_boost_round: int = 5000
    early_stopping_rounds: int = 100
    top_rate: float = 0.2
    other_rate: float = 0.1
    max_bin: int = 255
    lambda_l2: float = 1.0
    min_data_in_leaf: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.num_boost_round < 1 or self.early_stopping_rounds < 1:
            raise ValueError("round counts must be positive")
        if not (self.top_rate > 0 and self.other_rate > 0 and self.top_rate + self.other_rate <= 1 + 1e-12):
            raise ValueError("need 0 < top_rate, 0 < other_rate, top_rate + other_rate <= 1")
        if self.max_bin < 2:
            raise ValueError("max_bin must be >= 2")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if self.min_data_in_leaf < 1:
            raise ValueError("min_data_in_leaf must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = float(v) if known[k] == "float" else int(v)
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


@dataclass
class TrainState:
    base_score: float
    val_l2: list = field(default_factory=list)
    val_l1: list = field(default_factory=list)
    train_l2: list = field(default_factory=list)
    best_round: int = 0
    rounds_run: int = 0
    early_stopping: bool = True
    # raw leaf outputs per round for each training row (only with record_history)
    history: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "best_round": self.best_round,
            "rounds_run": self.rounds_run,
            "early_stopping": self.early_stopping,
            "val_l2": self.val_l2,
            "val_l1": self.val_l1,
            "train_l2": self.train_l2,
        }


class TreeEnsemble:
    """``prediction(x) = base_score + learning_rate * sum_j value_j(x)``."""

    def __init__(self, base_score: float, learning_rate: float, trees: Sequence[Tree],
                 feature_names: Sequence[str], config: Optional[dict] = None):
        self.base_score = float(base_score)
        self.learning_rate = float(learning_rate)
        self.trees = list(trees)
        self.feature_names = tuple(feature_names)
        self.config = dict(config or {})
        for t in self.trees:
            if t.feature.size and t.feature.max() >= len(self.feature_names):
                raise ModelFormatError("tree splits on a feature outside the registry")
        self._compile()

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _compile(self) -> None:
        # all trees concatenated into global node arrays for vectorised routing
        sizes = [t.n_nodes for t in self.trees]
        self._roots = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64) if sizes else np.zeros(0, np.int64)
        if not self.trees:
            return
        off = self._roots
        self._feat = np.concatenate([t.feature for t in self.trees])
        self._thr = np.concatenate([t.threshold for t in self.trees])
        self._dl = np.concatenate([t.default_left for t in self.trees])
        self._left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, off)])
        self._right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, off)])
        self._val = np.concatenate([t.value for t in self.trees])

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        """(n_rows, n_trees) raw leaf outputs."""
        X = self._check(X)
        if not self.trees:
            return np.zeros((X.shape[0], 0))
        return _route(X, self._roots, self._feat, self._thr, self._dl, self._left, self._right, self._val)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        X = self._check(X)
        if not self.trees:
            return np.full(X.shape[0], self.base_score)
        return _route_sum(X, self._roots, self._feat, self._thr, self._dl, self._left, self._right,
                          self._val, self.base_score, self.learning_rate)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise RegistryError(f"expected {self.n_features} feature columns")
        return X

    def row_vector(self, row: Mapping[str, Optional[float]]) -> np.ndarray:
        """Order a name->value mapping by the registry; ``None`` means masked."""
        unknown = [k for k in row if k not in self.feature_names]
        if unknown:
            raise RegistryError(f"feature {unknown[0]!r} is not in the model registry")
        missing = [k for k in self.feature_names if k not in row]
        if missing:
            raise RegistryError(f"row lacks feature {missing[0]!r}")
        return np.array([np.nan if row[k] is None else float(row[k]) for k in self.feature_names])

    def predict_row(self, row) -> float:
        x = self.row_vector(row) if isinstance(row, Mapping) else np.asarray(row, dtype=float)
        return float(self.predict(x[None, :])[0])

    def truncate(self, n_trees: int) -> "TreeEnsemble":
        return TreeEnsemble(self.base_score, self.learning_rate, self.trees[:n_trees], self.feature_names, self.config)

    # --- serialisation ---

    def to_dict(self) -> dict:
        def nums(a):
            return [None if not math.isfinite(v) else float(v) for v in a]

        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config,
            "features": list(self.feature_names),
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": nums(t.threshold),
                    "default_left": t.default_left.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                    "cover": t.cover.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TreeEnsemble":
        if data.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"not a {MODEL_FORMAT} model file")
        if data.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {data.get('version')!r}")
        try:
            trees = []
            for raw in data["trees"]:
                t = Tree(
                    feature=np.array(raw["feature"], dtype=np.int64),
                    threshold=np.array([np.nan if v is None else v for v in raw["threshold"]], dtype=float),
                    default_left=np.array(raw["default_left"], dtype=bool),
                    left=np.array(raw["left"], dtype=np.int64),
                    right=np.array(raw["right"], dtype=np.int64),
                    value=np.array(raw["value"], dtype=float),
                    cover=np.array(raw["cover"], dtype=float),
                )
                t.validate()
                trees.append(t)
            return cls(data["base_score"], data["learning_rate"], trees, data["features"], data.get("config"))
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not JSON ({exc})") from None
        return cls.from_dict(data)


def fit(X: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig(),
        X_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None,
        feature_names: Optional[Sequence[str]] = None, record_history: bool = False) -> tuple:
    """Boost trees on ``(X, y)``; early-stop on the validation rows.

    Each round draws a GOSS sample from the current L2 gradients, grows one
    leaf-wise tree on it, and then re-counts node covers on the full training
    set. Training stops once neither validation l2 nor l1 has improved for
    ``early_stopping_rounds`` rounds; the ensemble is cut back to the round
    with the best validation l2. Returns ``(ensemble, state)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, p) with a matching label vector")
    if not np.all(np.isfinite(y)):
        raise ValueError("training labels must be finite")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(X.shape[1]))
    use_val = X_val is not None and y_val is not None and len(y_val) > 0
    if use_val:
        X_val = np.asarray(X_val, dtype=float)
        y_val = np.asarray(y_val, dtype=float)

    mapper = fit_bins(X, config.max_bin)
    binned = mapper.transform(X)
    n_bins = mapper.n_bins
    base = float(np.mean(y))
    eta = config.learning_rate
    state = TrainState(base_score=base, early_stopping=use_val, history=[] if record_history else None)

    pred = np.full(y.size, base)
    pred_val = np.full(len(y_val), base) if use_val else None
    trees = []
    best = {"l2": (np.inf, 0), "l1": (np.inf, 0)}
    for rnd in range(1, config.num_boost_round + 1):
        grad = pred - y
        rng = np.random.default_rng([config.seed, rnd])
        idx, w = goss_sample(grad, config.top_rate, config.other_rate, rng)
        tree = grow_tree(binned[idx], n_bins, mapper.thresholds, grad[idx] * w, w,
                         config.num_leaves, config.lambda_l2, config.min_data_in_leaf)
        leaf = tree.apply_binned(binned, n_bins)
        tree.cover = np.bincount(leaf, minlength=tree.n_nodes).astype(float)
        _fill_internal_covers(tree)
        out = tree.value[leaf]
        pred = pred + eta * out
        trees.append(tree)
        if record_history:
            state.history.append(out)
        state.train_l2.append(float(np.mean((pred - y) ** 2)))
        state.rounds_run = rnd
        if not use_val:
            continue
        pred_val = pred_val + eta * tree.predict(X_val)
        err = pred_val - y_val
        l2, l1 = float(np.mean(err ** 2)), float(np.mean(np.abs(err)))
        state.val_l2.append(l2)
        state.val_l1.append(l1)
        for key, v in (("l2", l2), ("l1", l1)):
            if v < best[key][0]:
                best[key] = (v, rnd)
        if rnd - max(best["l2"][1], best["l1"][1]) >= config.early_stopping_rounds:
            break

    state.best_round = best["l2"][1] if use_val else state.rounds_run
    for t in trees:
        t.split_bin = None
    ens = TreeEnsemble(base, eta, trees[: state.best_round], names, config.to_dict())
    if record_history:
        state.history = state.history[: state.best_round]
    return ens, state


@njit(cache=True)
def _leaf_of(x, node, feat, thr, dl, left, right):
    while feat[node] >= 0:
        v = x[feat[node]]
        if v != v:
            go_left = dl[node]
        else:
            go_left = v <= thr[node]
        node = left[node] if go_left else right[node]
    return node


@njit(cache=True)
def _route(X, roots, feat, thr, dl, left, right, val):
    out = np.empty((X.shape[0], roots.size))
    for i in range(X.shape[0]):
        for j in range(roots.size):
            out[i, j] = val[_leaf_of(X[i], roots[j], feat, thr, dl, left, right)]
    return out


@njit(cache=True)
def _route_sum(X, roots, feat, thr, dl, left, right, val, base, eta):
    # summation in tree order, identical to leaf_values(X).sum(axis=1) up to the final scaling
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        acc = 0.0
        for j in range(roots.size):
            acc += val[_leaf_of(X[i], roots[j], feat, thr, dl, left, right)]
        out[i] = base + eta * acc
    return out


def _fill_internal_covers(tree: Tree) -> None:
    # children are always appended after their parent
    for node in range(tree.n_nodes - 1, -1, -1):
        if tree.feature[node] >= 0:
            tree.cover[node] = tree.cover[tree.left[node]] + tree.cover[tree.right[node]]


def validation_split(n: int, seed: int, fraction: float = 0.1) -> tuple:
    """Shuffle row positions with ``seed`` and hold out the last ``fraction``.

    Returns ``(train_positions, validation_positions)``.
    """
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction))
    if n_val == 0:
        return np.sort(perm), np.zeros(0, dtype=np.int64)
    return np.sort(perm[:-n_val]), np.sort(perm[-n_val:])


def predict(ensemble: TreeEnsemble, row) -> float:
    return ensemble.predict_row(row)
