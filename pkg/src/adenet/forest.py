"""Random forest of Gini decision trees, built from scratch on numpy."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import _ordered_map

FOREST_FORMAT = 1


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 1
    max_features: int | None = None  # None: ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""
    feature: np.ndarray    # int, (m,)
    threshold: np.ndarray  # float, (m,); go left when x <= threshold
    left: np.ndarray       # int, (m,)
    right: np.ndarray      # int, (m,)
    counts: np.ndarray     # int, (m, 2) class counts of the training samples reaching the node

    @property
    def n_nodes(self):
        return len(self.feature)

    def leaf_index(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def vote(self, X):
        """1 where the reached leaf holds a damaged majority (ties vote undamaged)."""
        c = self.counts[self.leaf_index(X)]
        return (c[:, 1] > c[:, 0]).astype(np.int64)

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d):
        t = cls(np.array(d["feature"], np.int64), np.array(d["threshold"], np.float64),
                np.array(d["left"], np.int64), np.array(d["right"], np.int64),
                np.array(d["counts"], np.int64).reshape(-1, 2))
        t.check()
        return t

    def check(self):
        leaves = self.feature < 0
        if (self.counts[leaves].sum(axis=1) <= 0).any():
            raise ValueError("tree has an empty leaf")
        inner = ~leaves
        m = self.n_nodes
        for arr in (self.left[inner], self.right[inner]):
            if ((arr <= 0) | (arr >= m)).any():
                raise ValueError("tree has a dangling child index")


@dataclass
class ForestModel:
    trees: list
    config: ForestConfig
    n_features: int

    def to_dict(self):
        return {"format": FOREST_FORMAT, "n_features": self.n_features,
                "config": asdict(self.config), "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FOREST_FORMAT:
            raise ValueError(f"unsupported forest format {d.get('format')!r}")
        return cls([Tree.from_dict(t) for t in d["trees"]], ForestConfig(**d["config"]),
                   int(d["n_features"]))


def gini(counts):
    n = counts.sum(axis=-1)
    p = counts / np.maximum(n, 1)[..., None]
    return 1.0 - (p * p).sum(axis=-1)


def best_split(X, y, features, min_leaf=1):
    """Best (gain, feature, threshold) over ``features`` by Gini decrease.

    Thresholds are midpoints between consecutive distinct values, so a split
    always separates at least one sample on each side. Returns None when no
    admissible split lowers impurity.
    """
    n = len(y)
    parent = np.bincount(y, minlength=2)
    g_parent = gini(parent)
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        left = np.stack([np.cumsum(ys == 0), np.cumsum(ys == 1)], axis=1)[:-1]
        right = parent - left
        nl = np.arange(1, n)
        ok = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not ok.any():
            continue
        child = (nl * gini(left) + (n - nl) * gini(right)) / n
        gain = np.where(ok, g_parent - child, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > 1e-12 and (best is None or gain[i] > best[0]):
            best = (float(gain[i]), int(f), float((xs[i] + xs[i + 1]) / 2))
    return best


def grow_tree(X, y, rng, max_depth=12, min_leaf=1, max_features=None):
    d = X.shape[1]
    k = d if max_features is None else min(max_features, d)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(c):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        return len(feature) - 1

    root = new_node(np.bincount(y, minlength=2))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if depth >= max_depth or c.min() == 0 or len(idx) < 2 * min_leaf:
            continue
        feats = rng.choice(d, size=k, replace=False) if k < d else np.arange(d)
        split = best_split(X[idx], y[idx], feats, min_leaf)
        if split is None:
            continue
        _, f, t = split
        mask = X[idx, f] <= t
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, t
        left[node] = new_node(np.bincount(y[li], minlength=2))
        right[node] = new_node(np.bincount(y[ri], minlength=2))
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, np.int64), np.array(threshold, np.float64),
                np.array(left, np.int64), np.array(right, np.int64),
                np.array(counts, np.int64).reshape(-1, 2))


def train_forest(features, labels, config: ForestConfig | None = None):
    config = config or ForestConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("train_forest: need a non-empty (n, d) feature matrix")
    if len(y) != len(X):
        raise ValueError("train_forest: features and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("train_forest: labels must be 0 or 1")
    if not np.isfinite(X).all():
        raise ValueError("train_forest: non-finite feature values")
    n, d = X.shape
    k = config.max_features or math.ceil(math.sqrt(d))
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)

    def one(ss):
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        return grow_tree(X[idx], y[idx], rng, config.max_depth, config.min_leaf, k)

    return ForestModel(_ordered_map(one, seeds), config, d)


def forest_predict(model: ForestModel, features):
    """``(labels, scores)``: score is the fraction of trees voting damaged.

    A sample is labelled damaged only when more than half the trees say so;
    an exact split vote goes to undamaged.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValueError(f"forest_predict: expected {model.n_features} features, got {X.shape[1]}")
    votes = np.zeros(len(X), dtype=np.int64)
    for t in model.trees:
        votes += t.vote(X)
    scores = votes / len(model.trees)
    return (scores > 0.5).astype(np.int64), scores


def save_forest(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_forest(path):
    with open(path) as fh:
        return ForestModel.from_dict(json.load(fh))
