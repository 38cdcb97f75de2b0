"""Random small tree ensembles for oracle comparisons."""
import numpy as np

from gazesa.gbdt import Tree, TreeEnsemble


def random_tree(rng, p, max_depth):
    feature, threshold, dl, left, right, value, cover = [], [], [], [], [], [], []

    def new(depth):
        k = len(feature)
        for lst, v in ((feature, -1), (threshold, np.nan), (dl, True), (left, -1), (right, -1),
                       (value, 0.0), (cover, 0.0)):
            lst.append(v)
        if depth < max_depth and (depth == 0 or rng.random() < 0.7):
            feature[k] = int(rng.integers(p))
            threshold[k] = float(rng.normal())
            dl[k] = bool(rng.random() < 0.5)
            left[k] = new(depth + 1)
            right[k] = new(depth + 1)
            cover[k] = cover[left[k]] + cover[right[k]]
        else:
            value[k] = float(rng.normal())
            cover[k] = float(rng.integers(1, 50))
        return k

    new(0)
    return Tree(np.array(feature), np.array(threshold), np.array(dl), np.array(left), np.array(right),
                np.array(value), np.array(cover))


def random_ensemble(rng, p=None, max_trees=5, max_depth=4):
    p = p or int(rng.integers(1, 13))
    trees = [random_tree(rng, p, int(rng.integers(1, max_depth + 1))) for _ in range(int(rng.integers(1, max_trees + 1)))]
    return TreeEnsemble(float(rng.normal()), float(rng.uniform(0.05, 1.0)), trees, [f"x{i}" for i in range(p)])


def random_instances(rng, p, n=3, nan_rate=0.2):
    X = rng.normal(size=(n, p))
    X[rng.random((n, p)) < nan_rate] = np.nan
    return X
