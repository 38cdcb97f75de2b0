import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazesa.eval import (
    FoldPlan,
    LinearModel,
    baselines,
    cross_validate,
    metrics,
    one_se_rule,
    select_features,
)
from gazesa.features import EYE_FEATURES, Dataset
from gazesa.gbdt import TrainConfig

FAST = TrainConfig(num_boost_round=300, early_stopping_rounds=20, learning_rate=0.2, min_data_in_leaf=5)


def make_dataset(X, y, participants=None):
    n, p = X.shape
    pid = participants if participants is not None else np.zeros(n, dtype=int)
    return Dataset(pid, np.arange(n), X, y, EYE_FEATURES[:p])


def test_metrics_perfect():
    m = metrics([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert (m.rmse, m.mae, m.corr, m.corr_valid) == (0.0, 0.0, 1.0, True)


def test_metrics_swapped_pair():
    m = metrics([0.0, 1.0], [1.0, 0.0])
    assert (m.rmse, m.mae, m.corr) == (1.0, 1.0, -1.0)


def test_metrics_hand_fixture():
    y = np.array([0.2, 0.4, 0.9, 0.5])
    p = np.array([0.3, 0.3, 0.7, 0.6])
    # errors 0.1, -0.1, -0.2, 0.1 -> squares .01 .01 .04 .01
    m = metrics(y, p)
    assert abs(m.rmse - np.sqrt(0.0175)) <= 1e-12
    assert abs(m.mae - 0.125) <= 1e-12
    # centered y: -.3 -.1 .4 0 ; centered p: -.175 -.175 .225 .125
    num = 0.0525 + 0.0175 + 0.09 + 0.0
    den = np.sqrt(0.26 * (0.175**2 * 2 + 0.225**2 + 0.125**2))
    assert abs(m.corr - num / den) <= 1e-12


def test_metrics_constant_prediction_and_errors():
    m = metrics([0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
    assert not m.corr_valid and m.corr == 0.0
    assert m.rmse == pytest.approx(np.sqrt(2 / 3), abs=1e-15)
    with pytest.raises(ValueError):
        metrics([1.0, 2.0], [1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=40))
def test_rmse_at_least_mae(pairs):
    y, p = np.array(pairs).T
    m = metrics(y, p)
    assert m.rmse >= m.mae - 1e-12 and m.rmse >= 0 and -1 <= m.corr <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 300), st.integers(2, 10), st.integers(0, 99))
def test_fold_plan_partition(n, k, seed):
    plan = FoldPlan.make(n, k, seed)
    allrows = np.sort(np.concatenate(plan.folds))
    assert np.array_equal(allrows, np.arange(n))
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    again = FoldPlan.make(n, k, seed)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))


def test_grouped_fold_plan_keeps_participants_together():
    groups = np.repeat(np.arange(20), 5)
    plan = FoldPlan.make(100, 10, 3, groups)
    for fold in plan.folds:
        for g in np.unique(groups[fold]):
            assert np.sum(groups[fold] == g) == 5
    assert np.array_equal(np.sort(np.concatenate(plan.folds)), np.arange(100))


def _identity_task(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 3))
    return make_dataset(X, X[:, 0].copy())


def test_identity_task_small_error():
    rep = cross_validate(_identity_task(), FAST, seed=1)
    assert rep.pooled.rmse <= 0.02
    again = metrics(_identity_task().sa, rep.predictions)
    assert again == rep.pooled
    assert rep.pooled.rmse >= rep.pooled.mae


def test_shuffled_labels_near_zero_corr():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 4))
    y = rng.permutation(X[:, 0] * 0.1 + 0.5)
    rep = cross_validate(make_dataset(X, y), FAST, seed=3)
    assert abs(rep.pooled.corr) <= 0.15


def test_determinism_and_worker_count():
    ds = _identity_task(120)
    a = cross_validate(ds, FAST, seed=5)
    b = cross_validate(ds, FAST, seed=5, n_jobs=2)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert np.array_equal(a.predictions, b.predictions)


def test_constant_label_fold_flags_but_continues():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    rep = cross_validate(make_dataset(X, np.full(40, 0.3)), FAST, seed=0)
    assert "pooled_corr_degenerate" in rep.flags
    assert rep.pooled.rmse == pytest.approx(0.0, abs=1e-12)


def test_too_few_rows():
    with pytest.raises(ValueError, match="20 rows"):
        cross_validate(_identity_task(10), FAST)


def test_held_out_explanations_local_accuracy():
    rep = cross_validate(_identity_task(150), FAST, seed=2, explain=True)
    e = rep.explanation
    assert len(e) == 150
    assert e.local_accuracy_error() <= 1e-9
    assert np.allclose(e.predictions, rep.predictions, rtol=0, atol=1e-12)


def test_linear_beats_tree_on_linear_target():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    lin, tree = baselines(make_dataset(X, X @ [0.3, -0.2, 0.1]), seed=1)
    assert lin.pooled.rmse < tree.pooled.rmse
    assert lin.model == "linear" and tree.model == "tree"


def test_tree_beats_linear_on_step_target():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 3))
    X[rng.random(X.shape) < 0.05] = np.nan
    y = np.where(np.nan_to_num(X[:, 0]) > 0.3, 1.0, 0.0)
    lin, tree = baselines(make_dataset(X, y), seed=1)
    assert tree.pooled.rmse < lin.pooled.rmse


def test_linear_ridge_fallback_flagged():
    rng = np.random.default_rng(6)
    x = rng.normal(size=50)
    X = np.column_stack([x, 2 * x])
    m = LinearModel(X, x)
    assert m.ridge
    assert np.allclose(m.predict(X), x, atol=1e-6)


def test_one_se_rule():
    assert one_se_rule([0.30, 0.20, 0.19, 0.21], [0.05, 0.02, 0.02, 0.02]) == 2
    assert one_se_rule([0.1, 0.2], [0.0, 0.0]) == 1


def test_selection_curve_with_one_informative_feature():
    rng = np.random.default_rng(7)
    X = rng.uniform(size=(240, 5))
    ds = make_dataset(X, 0.2 + 0.6 * X[:, 2])
    curve = select_features(ds, FAST, n_folds=5, seed=1)
    assert curve.order[0] == EYE_FEATURES[2]
    assert curve.best_k == 1
    ks = [r["k"] for r in curve.rows()]
    assert ks == list(range(1, 6))
    # re-evaluating the chosen subset reproduces the curve entry
    rep = cross_validate(ds.select(curve.best_features), FAST, n_folds=5, seed=1)
    assert rep.pooled == curve.reports[0].pooled
