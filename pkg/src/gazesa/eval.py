"""Cross-validation, metrics, importance-ordered feature selection and baselines."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .features import Dataset
from .gbdt import TrainConfig, fit, validation_split
from .shap_explain import Explanation, global_importance, shap_values

MODEL_KINDS = ("gbdt", "linear", "tree")
BASELINE_TREE_DEPTH = 5
RIDGE_FALLBACK = 1e-8


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    corr: float
    corr_valid: bool
    n: int

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "corr": self.corr, "corr_valid": self.corr_valid, "n": self.n}


def metrics(y, y_hat) -> Metrics:
    """Root-mean-square error, mean absolute error and Pearson correlation."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("metrics need at least one prediction")
    err = y_hat - y
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    dy, dp = y - y.mean(), y_hat - y_hat.mean()
    syy, spp = float(dy @ dy), float(dp @ dp)
    if syy == 0.0 or spp == 0.0:
        return Metrics(rmse, mae, 0.0, False, int(y.size))
    corr = float(np.clip((dy @ dp) / math.sqrt(syy * spp), -1.0, 1.0))
    return Metrics(rmse, mae, corr, True, int(y.size))


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    folds: tuple  # arrays of row positions, each sorted

    @classmethod
    def make(cls, n: int, n_folds: int = 10, seed: int = 0, groups: Optional[np.ndarray] = None) -> "FoldPlan":
        """Seeded partition into near-equal folds; with ``groups`` whole groups stay together."""
        if n_folds < 2:
            raise ValueError("need at least 2 folds")
        rng = np.random.default_rng(seed)
        if groups is None:
            if n < n_folds:
                raise ValueError(f"{n} rows cannot fill {n_folds} folds")
            perm = rng.permutation(n)
            return cls(seed, tuple(np.sort(part) for part in np.array_split(perm, n_folds)))
        groups = np.asarray(groups)
        labels = np.unique(groups)
        if labels.size < n_folds:
            raise ValueError(f"{labels.size} groups cannot fill {n_folds} folds")
        order = labels[rng.permutation(labels.size)]
        folds = []
        for part in np.array_split(order, n_folds):
            folds.append(np.flatnonzero(np.isin(groups, part)))
        return cls(seed, tuple(folds))

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    @property
    def n_rows(self) -> int:
        return int(sum(len(f) for f in self.folds))

    def split(self, i: int) -> tuple:
        test = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, test


# --- models ---

class LinearModel:
    """Ordinary least squares on mean-imputed columns."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        with np.errstate(invalid="ignore"):
            means = np.nanmean(np.where(np.isnan(X).all(axis=0), 0.0, X), axis=0)
        self.means = np.nan_to_num(means)
        A = self._design(X)
        self.ridge = np.linalg.matrix_rank(A) < A.shape[1]
        if self.ridge:
            reg = RIDGE_FALLBACK * np.eye(A.shape[1])
            reg[0, 0] = 0.0
            self.coef = np.linalg.solve(A.T @ A + reg, A.T @ y)
        else:
            self.coef = np.linalg.lstsq(A, y, rcond=None)[0]

    def _design(self, X: np.ndarray) -> np.ndarray:
        Xi = np.where(np.isnan(X), self.means[None, :], X)
        return np.column_stack([np.ones(X.shape[0]), Xi])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._design(np.asarray(X, dtype=float)) @ self.coef


def train_model(kind: str, X: np.ndarray, y: np.ndarray, config: TrainConfig, seed, feature_names=None):
    """Fit one model on a training fold. Returns ``(model, flags)``."""
    if kind == "gbdt":
        tr, va = validation_split(len(y), seed)
        ens, state = fit(X[tr], y[tr], config, X[va], y[va], feature_names)
        flags = [] if state.early_stopping else ["early_stopping_disabled"]
        return ens, flags
    if kind == "linear":
        model = LinearModel(X, y)
        return model, ["ridge_fallback"] if model.ridge else []
    if kind == "tree":
        model = DecisionTreeRegressor(max_depth=BASELINE_TREE_DEPTH, random_state=0)
        return model.fit(X, y), []
    raise ValueError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")


# --- cross-validation ---

@dataclass
class EvalReport:
    model: str
    features: tuple
    seed: int
    pooled: Metrics
    per_fold: list
    predictions: np.ndarray  # held-out prediction per dataset row
    flags: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    explanation: Optional[Explanation] = None

    def fold_summary(self, name: str) -> tuple:
        """Mean and standard error of a per-fold metric."""
        v = np.array([getattr(m, name) for m in self.per_fold], dtype=float)
        se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return float(v.mean()), se

    def to_dict(self) -> dict:
        out = {
            "model": self.model,
            "features": list(self.features),
            "seed": self.seed,
            "n_folds": len(self.per_fold),
            "pooled": self.pooled.to_dict(),
            "per_fold": [m.to_dict() for m in self.per_fold],
            "fold_mean": {},
            "fold_se": {},
            "flags": sorted(set(self.flags)),
            "config": self.config,
        }
        for name in ("rmse", "mae", "corr"):
            out["fold_mean"][name], out["fold_se"][name] = self.fold_summary(name)
        return out


def _run_fold(task) -> tuple:
    kind, X, y, config, seed, fold, train, test, names, explain = task
    model, flags = train_model(kind, X[train], y[train], config, [seed, fold], names)
    pred = np.asarray(model.predict(X[test]), dtype=float)
    m = metrics(y[test], pred)
    if not m.corr_valid:
        flags = flags + [f"fold{fold}_corr_degenerate"]
    expl = shap_values(model, X[test]) if explain else None
    return pred, m, flags, expl


def _map(tasks, n_jobs: int) -> list:
    if n_jobs <= 1 or len(tasks) <= 1:
        return [_run_fold(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_fold, tasks))


def cross_validate(dataset: Dataset, config: TrainConfig = TrainConfig(), model: str = "gbdt",
                   n_folds: int = 10, seed: int = 0, group_by_participant: bool = False,
                   n_jobs: int = 1, explain: bool = False, plan: Optional[FoldPlan] = None) -> EvalReport:
    """K-fold evaluation; pooled metrics come from the concatenated held-out predictions.

    With ``explain`` the gbdt fold models also explain their held-out rows, so every
    row gets SHAP values from a model that never saw it.
    """
    if model not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model!r}; choose from {', '.join(MODEL_KINDS)}")
    if np.isnan(dataset.sa).any():
        raise ValueError(f"{int(np.isnan(dataset.sa).sum())} rows have no sa label")
    if dataset.n_rows < 20:
        raise ValueError(f"cross-validation needs at least 20 rows, got {dataset.n_rows}")
    if explain and model != "gbdt":
        raise ValueError("SHAP explanations are only available for the gbdt model")
    X, y = dataset.X, np.asarray(dataset.sa, dtype=float)
    if plan is None:
        groups = dataset.participant_id if group_by_participant else None
        plan = FoldPlan.make(dataset.n_rows, n_folds, seed, groups)
    if plan.n_rows != dataset.n_rows:
        raise ValueError("fold plan does not match the dataset")
    tasks = []
    for i in range(plan.n_folds):
        train, test = plan.split(i)
        tasks.append((model, X, y, config, seed, i, train, test, dataset.feature_names, explain))
    results = _map(tasks, n_jobs)

    predictions = np.empty(dataset.n_rows)
    flags, per_fold, parts = [], [], []
    for (pred, m, f, expl), fold in zip(results, plan.folds):
        predictions[fold] = pred
        per_fold.append(m)
        flags += f
        if expl is not None:
            parts.append(expl)
    pooled = metrics(y, predictions)
    if not pooled.corr_valid:
        flags.append("pooled_corr_degenerate")
    explanation = None
    if explain:
        stacked_rows = np.concatenate(plan.folds)
        order = np.empty_like(stacked_rows)
        order[stacked_rows] = np.arange(stacked_rows.size)
        explanation = Explanation.concat(parts, order)
    cfg = config.to_dict() if model == "gbdt" else {"max_depth": BASELINE_TREE_DEPTH} if model == "tree" else {}
    return EvalReport(model, tuple(dataset.feature_names), seed, pooled, per_fold, predictions,
                      flags, cfg, explanation)


def baselines(dataset: Dataset, n_folds: int = 10, seed: int = 0, group_by_participant: bool = False,
              n_jobs: int = 1) -> list:
    """Linear regression and a single depth-limited tree under the same fold plan."""
    groups = dataset.participant_id if group_by_participant else None
    plan = FoldPlan.make(dataset.n_rows, n_folds, seed, groups)
    return [cross_validate(dataset, model=kind, seed=seed, n_jobs=n_jobs, plan=plan)
            for kind in ("linear", "tree")]


# --- feature selection ---

@dataclass
class SelectionCurve:
    order: tuple          # features in descending importance
    impact: np.ndarray    # global impact aligned with ``order``
    reports: list         # EvalReport for k = 1..P
    best_k: int

    @property
    def best_features(self) -> tuple:
        return self.order[: self.best_k]

    def rows(self) -> list:
        out = []
        for k, rep in enumerate(self.reports, start=1):
            row = {"k": k, "feature_added": self.order[k - 1], "impact": float(self.impact[k - 1])}
            for name in ("rmse", "mae", "corr"):
                row[name] = getattr(rep.pooled, name)
            for name in ("rmse", "mae", "corr"):
                row[f"{name}_fold_mean"], row[f"{name}_se"] = rep.fold_summary(name)
            out.append(row)
        return out


def one_se_rule(rmse: Sequence[float], se: Sequence[float]) -> int:
    """Smallest k (1-based) whose RMSE is within one standard error of the minimum."""
    rmse = np.asarray(rmse, dtype=float)
    best = int(np.argmin(rmse))
    limit = rmse[best] + float(se[best])
    return int(np.flatnonzero(rmse <= limit)[0]) + 1


def importance_order(dataset: Dataset, config: TrainConfig = TrainConfig(), n_folds: int = 10, seed: int = 0,
                     group_by_participant: bool = False, n_jobs: int = 1) -> tuple:
    """Held-out SHAP importance on the full feature set: ``(report, ImportanceTable)``."""
    report = cross_validate(dataset, config, "gbdt", n_folds, seed, group_by_participant, n_jobs, explain=True)
    return report, global_importance(report.explanation)


def select_features(dataset: Dataset, config: TrainConfig = TrainConfig(), n_folds: int = 10, seed: int = 0,
                    group_by_participant: bool = False, n_jobs: int = 1, max_k: Optional[int] = None) -> SelectionCurve:
    """Evaluate each prefix of the frozen importance ranking and pick k by the one-SE rule."""
    _, table = importance_order(dataset, config, n_folds, seed, group_by_participant, n_jobs)
    order = tuple(table.ranked_names())
    impact = table.impact[table.order()]
    groups = dataset.participant_id if group_by_participant else None
    plan = FoldPlan.make(dataset.n_rows, n_folds, seed, groups)
    reports = []
    for k in range(1, (max_k or len(order)) + 1):
        reports.append(cross_validate(dataset.select(order[:k]), config, "gbdt", seed=seed, n_jobs=n_jobs, plan=plan))
    rmse = [r.pooled.rmse for r in reports]
    se = [r.fold_summary("rmse")[1] for r in reports]
    return SelectionCurve(order, impact, reports, one_se_rule(rmse, se))
