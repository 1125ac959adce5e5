import numpy as np
import pytest

from dynlsm.data_model import FEATURE_INDEX, YearTask
from dynlsm.errors import DataError
from dynlsm.forest import ForestConfig, ForestModel, fit_arrays, predict_proba, train_forest

from conftest import make_samples, random_raw_features, slope_task


def reference_cart(X, y, max_depth, min_leaf):
    """Exhaustive-search CART written with plain Python counting."""

    def gini(labels):
        n = len(labels)
        p = sum(labels) / n
        return 1.0 - p * p - (1 - p) * (1 - p)

    def grow(rows, depth):
        labels = [int(y[r]) for r in rows]
        n1 = sum(labels)
        leaf = {"leaf": int(n1 >= len(labels) - n1)}
        if depth >= max_depth or len(rows) < 2 * min_leaf or n1 in (0, len(rows)):
            return leaf
        best = None
        for f in range(X.shape[1]):
            vals = sorted(set(X[r, f] for r in rows))
            for a, b in zip(vals, vals[1:]):
                t = (a + b) / 2.0
                L = [r for r in rows if X[r, f] <= t]
                R = [r for r in rows if X[r, f] > t]
                if len(L) < min_leaf or len(R) < min_leaf:
                    continue
                score = (len(L) * gini([y[r] for r in L]) + len(R) * gini([y[r] for r in R])) / len(rows)
                if best is None or score < best[0]:
                    best = (score, f, t, L, R)
        if best is None:
            return leaf
        _, f, t, L, R = best
        return {"f": f, "t": t, "l": grow(L, depth + 1), "r": grow(R, depth + 1)}

    return grow(list(range(len(y))), 0)


def reference_predict(tree, x):
    while "leaf" not in tree:
        tree = tree["l"] if x[tree["f"]] <= tree["t"] else tree["r"]
    return tree["leaf"]


def test_separable_training_accuracy(rng):
    task = slope_task(rng)
    model = train_forest(task, ForestConfig(n_trees=25, seed=1))
    acc = np.mean((model.predict_proba(task.X()) >= 0.5) == task.y())
    assert acc >= 0.99


def test_single_tree_matches_reference_cart(rng):
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] * X[:, 1] + 0.3 * rng.normal(size=60) > 0).astype(int)
    model = fit_arrays(X, y, ForestConfig(n_trees=1, bootstrap=False, max_features=4, max_depth=5, min_leaf=2))
    ref = reference_cart(X, y, 5, 2)
    Xt = rng.normal(size=(400, 4))
    ours = model.predict_proba(Xt)
    theirs = np.array([reference_predict(ref, x) for x in Xt])
    np.testing.assert_array_equal(ours, theirs)


def test_deterministic_serialization(rng):
    task = slope_task(rng, n=80)
    a = train_forest(task, ForestConfig(n_trees=10, seed=7)).to_json()
    b = train_forest(task, ForestConfig(n_trees=10, seed=7)).to_json()
    assert a == b
    c = train_forest(task, ForestConfig(n_trees=10, seed=8)).to_json()
    assert a != c


def test_parallel_training_is_bit_identical(rng):
    task = slope_task(rng, n=80)
    a = train_forest(task, ForestConfig(n_trees=12, seed=3, n_jobs=1)).to_json()
    b = train_forest(task, ForestConfig(n_trees=12, seed=3, n_jobs=4)).to_json()
    assert a == b


def test_sample_order_does_not_matter(rng):
    task = slope_task(rng, n=80)
    perm = rng.permutation(80)
    shuffled = YearTask(task.year, [task.samples[i] for i in perm])
    cfg = ForestConfig(n_trees=10, seed=11)
    assert train_forest(task, cfg).to_json() == train_forest(shuffled, cfg).to_json()


def test_json_round_trip(rng):
    task = slope_task(rng, n=60)
    model = train_forest(task, ForestConfig(n_trees=5, seed=2))
    back = ForestModel.from_json(model.to_json())
    assert back.to_json() == model.to_json()
    np.testing.assert_array_equal(back.predict_proba(task.X()), model.predict_proba(task.X()))


def test_vote_fraction_definition(rng):
    task = slope_task(rng, n=60)
    model = train_forest(task, ForestConfig(n_trees=10, seed=4))
    X = task.X()
    per_tree = np.array([t.predict(X) for t in model.trees])
    np.testing.assert_array_equal(model.predict_proba(X), per_tree.mean(axis=0))
    assert set(np.unique(model.predict_proba(X) * 10)).issubset(set(range(11)))


def test_sixty_of_hundred_votes():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    pos = fit_arrays(np.array([[0.0], [0.1], [1.0], [1.1]]), np.array([1, 1, 0, 0]), ForestConfig(n_trees=1, bootstrap=False, min_leaf=1))
    neg = fit_arrays(np.array([[0.0], [0.1], [1.0], [1.1]]), np.array([0, 0, 1, 1]), ForestConfig(n_trees=1, bootstrap=False, min_leaf=1))
    model = ForestModel(pos.trees * 60 + neg.trees * 40, pos.config, 1)
    assert model.predict_proba(X)[0] == 0.6
    all_yes = ForestModel(pos.trees * 7, pos.config, 1)
    assert all_yes.predict_proba(X)[0] == 1.0


def test_duplicate_tree_leaves_probability_unchanged(rng):
    task = slope_task(rng, n=60)
    model = train_forest(task, ForestConfig(n_trees=1, seed=5))
    doubled = ForestModel(model.trees * 2, model.config)
    np.testing.assert_array_equal(model.predict_proba(task.X()), doubled.predict_proba(task.X()))


def test_training_point_gets_its_label(rng):
    task = slope_task(rng, n=120)
    model = train_forest(task, ForestConfig(n_trees=30, seed=6))
    p = model.predict_proba(task.X())
    y = task.y()
    assert np.all(np.where(y == 1, p, 1 - p) >= 0.5)
    assert predict_proba(model, task.samples[0].features) == p[0]


def test_single_class_task_rejected(rng):
    X = random_raw_features(rng, 10)
    task = YearTask(2000, make_samples(X, [1] * 10))
    with pytest.raises(DataError):
        train_forest(task)
