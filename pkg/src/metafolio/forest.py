"""Small weighted random forest for binary labels.

Trees are CART-style with weighted Gini impurity and midpoint thresholds
between consecutive distinct feature values. Nodes are plain dicts so a
fitted forest serializes to JSON as is::

    {"feature": 0, "threshold": 1250.5, "left": {...}, "right": {...}}
    {"prob": 0.8}
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


@dataclass(frozen=True)
class TreeParams:
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int = 20
    max_features: int = 2
    bootstrap: bool = False


def _gini_mass(w1, w):
    """Weighted Gini impurity times node weight: ``2 * w1 * w0 / w``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 2.0 * w1 * (w - w1) / w
    return np.where(w > _EPS, np.maximum(g, 0.0), 0.0)


def _leaf(y, w) -> dict:
    total = float(w.sum())
    if total <= _EPS:
        return {"prob": 0.5}
    return {"prob": float((w * y).sum() / total)}


def _best_split(X, y, w, features, min_leaf):
    n = len(y)
    W, W1 = w.sum(), (w * y).sum()
    parent = float(_gini_mass(np.array(W1), np.array(W)))
    best = None  # (impurity, feature, threshold, left_mask)
    lo, hi = min_leaf - 1, n - min_leaf - 1
    if hi < lo:
        return None
    for f in features:
        x = X[:, f]
        order = np.argsort(x, kind="stable")
        xs, ws = x[order], w[order]
        cw = np.cumsum(ws)
        c1 = np.cumsum(ws * y[order])
        pos = np.arange(lo, hi + 1)
        pos = pos[xs[pos] < xs[pos + 1]]
        if pos.size == 0:
            continue
        L, L1 = cw[pos], c1[pos]
        R, R1 = np.maximum(W - L, 0.0), np.maximum(W1 - L1, 0.0)
        imp = _gini_mass(L1, L) + _gini_mass(R1, R)
        k = int(np.argmin(imp))
        if best is None or imp[k] < best[0] - _EPS:
            i = pos[k]
            best = (float(imp[k]), int(f), float((xs[i] + xs[i + 1]) / 2.0))
    if best is None or not best[0] < parent - _EPS:
        return None
    return best


def grow_tree(X, y, w, params: TreeParams, rng: np.random.Generator, depth: int = 0) -> dict:
    n = len(y)
    W = w.sum()
    W1 = (w * y).sum()
    if (
        depth >= params.max_depth
        or n < params.min_samples_split
        or n < 2 * params.min_samples_leaf
        or W <= _EPS
        or W1 <= _EPS
        or W - W1 <= _EPS
    ):
        return _leaf(y, w)
    n_feat = X.shape[1]
    k = min(max(1, params.max_features), n_feat)
    features = sorted(rng.permutation(n_feat)[:k].tolist()) if k < n_feat else list(range(n_feat))
    split = _best_split(X, y, w, features, params.min_samples_leaf)
    if split is None:
        return _leaf(y, w)
    _, f, t = split
    left = X[:, f] <= t
    return {
        "feature": f,
        "threshold": t,
        "left": grow_tree(X[left], y[left], w[left], params, rng, depth + 1),
        "right": grow_tree(X[~left], y[~left], w[~left], params, rng, depth + 1),
    }


def predict_tree(node: dict, x) -> float:
    while "prob" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["prob"]


@dataclass
class Forest:
    trees: list[dict] = field(default_factory=list)

    @classmethod
    def fit(cls, X, y, w, params: TreeParams, n_trees: int, seed) -> "Forest":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        if len(y) == 0:
            return cls([{"prob": 0.5}])
        trees = []
        for child in np.random.SeedSequence(seed).spawn(n_trees):
            rng = np.random.default_rng(child)
            if params.bootstrap:
                idx = rng.integers(0, len(y), size=len(y))
                Xb, yb, wb = X[idx], y[idx], w[idx]
            else:
                Xb, yb, wb = X, y, w
            trees.append(grow_tree(Xb, yb, wb, params, rng))
        return cls(trees)

    def predict_proba(self, x) -> float:
        """Mean leaf probability of the positive class over all trees."""
        return float(np.mean([predict_tree(t, x) for t in self.trees]))

    def to_list(self) -> list[dict]:
        return self.trees

    @classmethod
    def from_list(cls, trees) -> "Forest":
        return cls(list(trees))
