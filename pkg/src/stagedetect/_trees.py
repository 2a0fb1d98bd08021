"""Array-backed binary trees shared by the forest and the boosted meta-learner.

A tree is stored as parallel node arrays; ``feature == -1`` marks a leaf.
Samples go left when ``x[feature] <= threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

LEAF = -1
# split scores closer than this are treated as ties (lower feature, lower threshold wins)
TIE_TOL = 1e-9


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            active = feat != LEAF
            if not active.any():
                return node
            r, n, f = rows[active], node[active], feat[active]
            go_left = X[r, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def apply_one(self, x) -> int:
        node = 0
        feature, threshold = self.feature, self.threshold
        while feature[node] != LEAF:
            if x[feature[node]] <= threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return int(node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Tree":
        return cls(
            np.asarray(obj["feature"], dtype=np.int64),
            np.asarray(obj["threshold"], dtype=np.float64),
            np.asarray(obj["left"], dtype=np.int64),
            np.asarray(obj["right"], dtype=np.int64),
            np.asarray(obj["value"], dtype=np.float64),
        )


def _candidate_positions(xs: np.ndarray) -> np.ndarray:
    # split after position i when the next sorted value differs
    return np.nonzero(xs[1:] > xs[:-1])[0]


def _midpoint(lo: float, hi: float) -> float:
    mid = 0.5 * (lo + hi)
    # adjacent floats: the midpoint may round up onto ``hi``
    return lo if mid >= hi else mid


def gini_split_scores(xs: np.ndarray, ys: np.ndarray):
    """Weighted child Gini (times node size) for every candidate split of sorted data.

    Returns ``(positions, scores)``; lower is better.
    """
    pos = _candidate_positions(xs)
    if pos.size == 0:
        return pos, np.empty(0)
    n = xs.shape[0]
    cum = np.cumsum(ys)
    total = cum[-1]
    nl = pos + 1.0
    pl = cum[pos]
    nr = n - nl
    pr = total - pl
    left = nl - (pl * pl + (nl - pl) ** 2) / nl
    right = nr - (pr * pr + (nr - pr) ** 2) / nr
    return pos, left + right


def sse_split_scores(xs: np.ndarray, rs: np.ndarray):
    """Residual sum of squares of both children, up to a constant; lower is better."""
    pos = _candidate_positions(xs)
    if pos.size == 0:
        return pos, np.empty(0)
    n = xs.shape[0]
    cum = np.cumsum(rs)
    total = cum[-1]
    nl = pos + 1.0
    sl = cum[pos]
    sr = total - sl
    return pos, -(sl * sl / nl + sr * sr / (n - nl))


def best_split(X: np.ndarray, t: np.ndarray, features, score_fn):
    """Best ``(feature, threshold, score)`` over ``features``, or ``None`` if no split exists.

    Features are scanned in ascending index order and thresholds ascending,
    so ties resolve to the lower feature and then the lower threshold.
    """
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        pos, scores = score_fn(xs, t[order])
        if pos.size == 0:
            continue
        i = int(np.argmin(scores))
        lowest = scores[i]
        # first (lowest threshold) candidate within tolerance of the minimum
        i = int(np.nonzero(scores <= lowest + TIE_TOL)[0][0])
        s = float(scores[i])
        if best is None or s < best[2] - TIE_TOL:
            best = (f, _midpoint(float(xs[pos[i]]), float(xs[pos[i] + 1])), s)
    return best


def grow_tree(
    X: np.ndarray,
    t: np.ndarray,
    *,
    max_depth: int | None,
    score_fn,
    leaf_value: Callable[[np.ndarray], float],
    should_split: Callable[[np.ndarray, np.ndarray], bool],
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
    parent_score: Callable[[np.ndarray], float] | None = None,
) -> Tree:
    """Grow a tree depth-first.

    ``should_split(idx, t[idx])`` gates each node. When ``max_features`` is set,
    each node draws a random feature order and evaluates the first
    ``max_features``; if none of them can split, further features are taken
    one at a time until one can. ``parent_score`` (same units as ``score_fn``)
    lets callers reject splits that do not improve the node.
    """
    n_samples, n_features = X.shape
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n_samples), 0)]
    while stack:
        node, idx, depth = stack.pop()
        value[node] = leaf_value(idx)
        if (max_depth is not None and depth >= max_depth) or not should_split(idx, t[idx]):
            continue
        Xn, tn = X[idx], t[idx]
        if max_features is None or max_features >= n_features:
            split = best_split(Xn, tn, range(n_features), score_fn)
        else:
            perm = rng.permutation(n_features)
            split = best_split(Xn, tn, perm[:max_features], score_fn)
            extra = max_features
            while split is None and extra < n_features:
                split = best_split(Xn, tn, [perm[extra]], score_fn)
                extra += 1
        if split is None:
            continue
        f, thr, s = split
        if parent_score is not None and not s < parent_score(tn) - TIE_TOL:
            continue
        go_left = Xn[:, f] <= thr
        feature[node], threshold[node] = f, thr
        l_node, r_node = new_node(), new_node()
        left[node], right[node] = l_node, r_node
        # right pushed first so the left subtree gets the lower node ids
        stack.append((r_node, idx[~go_left], depth + 1))
        stack.append((l_node, idx[go_left], depth + 1))

    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )
