"""Random forest classifier for sample-rich years.

Trees are grown by the ``build_tree`` kernel (Gini impurity, greedy splits
over a random feature subset per node). The forest probability is the
fraction of trees whose leaf votes for class 1.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from dynlsm import _kernels
from dynlsm.data_model import N_FEATURES, YearTask
from dynlsm.errors import DataError

SCHEMA = "dynlsm.forest/1"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    max_features: int | None = None  # None -> ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1

    def features_per_split(self, n_features: int) -> int:
        if self.max_features is None:
            return int(math.ceil(math.sqrt(n_features)))
        return max(1, min(int(self.max_features), n_features))


@dataclass(frozen=True)
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    count0: np.ndarray
    count1: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def leaf_class(self) -> np.ndarray:
        # a tied leaf votes landslide
        return (self.count1 >= self.count0).astype(np.int64)

    def predict(self, X) -> np.ndarray:
        votes = _kernels.forest_votes(
            self.feature, self.threshold, self.left, self.right, self.leaf_class, np.array([0]), _as2d(X)
        )
        return votes

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "count0": self.count0.tolist(),
            "count1": self.count1.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["count0"], dtype=np.int64),
            np.asarray(d["count1"], dtype=np.int64),
        )


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[DecisionTree, ...]
    config: ForestConfig
    n_features: int = N_FEATURES
    _packed: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if not self.trees:
            raise ValueError("a forest needs at least one tree")
        object.__setattr__(self, "_packed", _pack(self.trees))

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def votes(self, X) -> np.ndarray:
        feature, threshold, left, right, leaf, roots = self._packed
        return _kernels.forest_votes(feature, threshold, left, right, leaf, roots, _as2d(X))

    def predict_proba(self, X) -> np.ndarray:
        """Fraction of trees voting landslide, per row of ``X``."""
        return self.votes(X) / float(self.n_trees)

    __call__ = predict_proba

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "kind": "forest",
            "n_features": self.n_features,
            "config": {k: v for k, v in asdict(self.config).items() if k != "n_jobs"},
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("schema") != SCHEMA:
            raise DataError(f"unsupported forest schema {d.get('schema')!r}")
        return cls(
            tuple(DecisionTree.from_dict(t) for t in d["trees"]),
            ForestConfig(**d["config"]),
            int(d["n_features"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        return cls.from_dict(json.loads(text))


def _as2d(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def _pack(trees):
    offsets = np.cumsum([0] + [t.n_nodes for t in trees])
    feature = np.concatenate([t.feature for t in trees])
    threshold = np.concatenate([t.threshold for t in trees])
    left = np.concatenate([np.where(t.left >= 0, t.left + off, -1) for t, off in zip(trees, offsets)])
    right = np.concatenate([np.where(t.right >= 0, t.right + off, -1) for t, off in zip(trees, offsets)])
    leaf = np.concatenate([t.leaf_class for t in trees])
    return feature, threshold, left, right, leaf, offsets[:-1].astype(np.int64)


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order independent of how the samples were listed."""
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def fit_arrays(X, y, config: ForestConfig = ForestConfig()) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise DataError("forest inputs must be imputed (finite) before training")
    n_pos = int(y.sum())
    if n_pos < 2 or y.size - n_pos < 2:
        raise DataError("forest training needs at least 2 samples of each class")
    order = canonical_order(X, y)
    X, y = np.ascontiguousarray(X[order]), np.ascontiguousarray(y[order])
    n, d = X.shape
    mtry = config.features_per_split(d)
    max_depth = config.max_depth if config.max_depth is not None else 2 * n + 1
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)

    def grow(ss):
        rng = np.random.default_rng(ss)
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        keys = rng.random((2 * n, d))
        arrays = _kernels.build_tree(X[rows], y[rows], keys, mtry, max_depth, config.min_leaf)
        return DecisionTree(*arrays)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            trees = list(pool.map(grow, seeds))
    else:
        trees = [grow(ss) for ss in seeds]
    return ForestModel(tuple(trees), config, d)


def train_forest(task: YearTask, config: ForestConfig = ForestConfig()) -> ForestModel:
    """Fit a forest on every sample of ``task``."""
    if task.no_data:
        raise DataError(f"year {task.year}: no samples")
    return fit_arrays(task.X(), task.y(), config)


def predict_proba(model: ForestModel, x) -> float | np.ndarray:
    """Landslide probability of one feature vector (or a matrix of them)."""
    arr = np.asarray(getattr(x, "model_input", lambda: x)(), dtype=np.float64)
    p = model.predict_proba(arr)
    return float(p[0]) if arr.ndim == 1 else p
