"""Stage 1: random forest over static feature vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from ._trees import Tree, gini_split_scores, grow_tree


class ModelError(DataError):
    pass


@dataclass(frozen=True)
class ForestParams:
    tree_count: int = 100
    max_depth: int | None = 12
    # None -> ceil(sqrt(n)); 0 or >= n -> all features
    max_features: int | None = None
    bootstrap: bool = True
    threshold: float = 0.5

    def validate(self) -> None:
        if self.tree_count < 1:
            raise ModelError("tree_count must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ModelError("max_depth must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ModelError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[Tree, ...]
    n_features: int
    feature_subsample: int
    threshold: float
    seed: int

    @property
    def tree_count(self) -> int:
        return len(self.trees)

    def to_json(self) -> dict:
        return {
            "n_features": self.n_features,
            "feature_subsample": self.feature_subsample,
            "threshold": self.threshold,
            "seed": self.seed,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ForestModel":
        return cls(
            tuple(Tree.from_json(t) for t in obj["trees"]),
            int(obj["n_features"]),
            int(obj["feature_subsample"]),
            float(obj["threshold"]),
            int(obj["seed"]),
        )


@dataclass(frozen=True)
class Stage1Output:
    score: float
    label: int


def _check_binary(y: np.ndarray) -> None:
    vals = set(np.unique(y).tolist())
    if not vals <= {0, 1}:
        raise ModelError(f"labels must be 0/1, got {sorted(vals)}")
    if len(vals) < 2:
        raise ModelError("training data contains a single class")


def tree_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per tree so results do not depend on build order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int | None = None,
             max_features: int | None = None, rng: np.random.Generator | None = None) -> Tree:
    """Classification tree; leaves hold the fraction of positive samples."""
    yf = y.astype(np.float64)
    return grow_tree(
        X, yf,
        max_depth=max_depth,
        score_fn=gini_split_scores,
        leaf_value=lambda idx: float(yf[idx].mean()),
        should_split=lambda idx, yi: 0.0 < yi.mean() < 1.0,
        max_features=max_features,
        rng=rng,
    )


def train_forest(X, y, params: ForestParams = ForestParams(), seed: int = 0) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ModelError(f"X shape {X.shape} does not match {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise ModelError("need at least 2 samples")
    _check_binary(y)
    params.validate()
    n_samples, n = X.shape
    if params.max_features is None:
        mtry = math.ceil(math.sqrt(n))
    elif params.max_features <= 0:
        mtry = n
    else:
        mtry = min(params.max_features, n)

    trees = []
    for t in range(params.tree_count):
        rng = tree_rng(seed, t)
        if params.bootstrap:
            idx = rng.integers(0, n_samples, n_samples)
            Xb, yb = X[idx], y[idx]
        else:
            Xb, yb = X, y
        trees.append(fit_tree(Xb, yb, params.max_depth, None if mtry >= n else mtry, rng))
    return ForestModel(tuple(trees), n, mtry, params.threshold, seed)


def forest_scores(model: ForestModel, X) -> np.ndarray:
    """Vote fraction for every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ModelError(f"expected {model.n_features} static features, got {X.shape[1]}")
    votes = np.zeros(X.shape[0], dtype=np.int64)
    for tree in model.trees:
        votes += tree.predict(X) >= 0.5
    return votes / model.tree_count


def predict_stage1(model: ForestModel, x) -> Stage1Output:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64).ravel()
    if x.shape[0] != model.n_features:
        raise ModelError(f"expected {model.n_features} static features, got {x.shape[0]}")
    votes = sum(tree.value[tree.apply_one(x)] >= 0.5 for tree in model.trees)
    score = votes / model.tree_count
    return Stage1Output(score, int(score >= model.threshold))
