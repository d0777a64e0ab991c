"""Single-task comparison classifiers: KNN, CART, random forest, SAMME AdaBoost,
one-vs-rest linear SVM and a single-head network.

All classifiers work on encoded matrices and class *indices* ``0..K-1``;
ties always resolve to the lower index, which is the lower class value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .ingest import EncodedDataset, Encoder
from .mtl import Hyperparams, MtlNetwork, init_network, train
from .nn import DivergenceError
from .schema import ComfortScale, DatasetSchema, TaskSpec, index_class

KINDS = ("knn", "decision_tree", "random_forest", "adaboost", "linear_svm", "stl_dnn")

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "knn": {"k": 5},
    "decision_tree": {"max_depth": 10, "min_leaf": 1},
    "random_forest": {"n_trees": 100, "max_depth": 10, "feature_fraction": 0.3, "bootstrap": True},
    "adaboost": {"n_rounds": 50},
    "linear_svm": {"C": 1.0, "epochs": 50, "batch_size": 32},
    "stl_dnn": {},
}


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty training input")
    if len(y) != len(X):
        raise ValueError("X and y differ in length")
    return X, y


# ------------------------------------------------------------------------- KNN

class KNNClassifier:
    """Majority vote among the ``k`` nearest training rows (Euclidean).

    Distance ties go to the lower training index, vote ties to the lower class.
    """

    def __init__(self, k: int = 5, chunk: int = 128):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.chunk = chunk

    def fit(self, X, y, n_classes: int | None = None):
        X, y = _check_xy(X, y)
        if self.k > len(X):
            raise ValueError(f"k={self.k} exceeds the {len(X)} training rows")
        self.X_ = X
        self.y_ = y
        self.n_classes_ = int(n_classes if n_classes is not None else y.max() + 1)
        return self

    def neighbors(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        out = np.empty((len(Q), self.k), dtype=np.int64)
        for s in range(0, len(Q), self.chunk):
            diff = Q[s:s + self.chunk, None, :] - self.X_[None, :, :]
            d2 = np.einsum("qnd,qnd->qn", diff, diff)
            order = np.argsort(d2, axis=1, kind="stable")
            out[s:s + self.chunk] = order[:, :self.k]
        return out

    def predict(self, Q) -> np.ndarray:
        nb = self.neighbors(Q)
        votes = np.zeros((len(nb), self.n_classes_), dtype=np.int64)
        for j in range(self.k):
            np.add.at(votes, (np.arange(len(nb)), self.y_[nb[:, j]]), 1)
        return np.argmax(votes, axis=1)


def knn_fit_predict(X_train, y_train, query, k: int, n_classes: int | None = None) -> np.ndarray:
    return KNNClassifier(k).fit(X_train, y_train, n_classes).predict(query)


# ----------------------------------------------------------------------- trees

_TIE = 1e-12


def _best_split(X, y, w, idx, features, n_classes, min_leaf):
    """Lowest weighted Gini split over ``features``; ties to lower feature then threshold.

    All candidate features are scored in one vectorized pass.
    """
    features = np.asarray(features, dtype=np.int64)
    n = len(idx)
    if n < 2 or len(features) == 0:
        return None
    onehot_w = np.zeros((n, n_classes))
    onehot_w[np.arange(n), y[idx]] = w[idx]
    xs = X[np.ix_(idx, features)]                     # (n, F)
    order = np.argsort(xs, axis=0, kind="stable")
    xs_sorted = np.take_along_axis(xs, order, axis=0)
    cum = np.cumsum(onehot_w[order], axis=0)[:-1]     # (n-1, F, K): left side after row i
    total = onehot_w.sum(axis=0)
    right = total - cum
    wl = cum.sum(axis=2)
    wr = right.sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        gl = np.where(wl > 0, wl - (cum * cum).sum(axis=2) / wl, 0.0)
        gr = np.where(wr > 0, wr - (right * right).sum(axis=2) / wr, 0.0)
    imp = gl + gr
    pos = np.arange(n - 1)[:, None]
    ok = (xs_sorted[:-1] < xs_sorted[1:]) & (pos + 1 >= min_leaf) & (n - pos - 1 >= min_leaf)
    imp = np.where(ok, imp, np.inf)
    mins = imp.min(axis=0)
    tol = _TIE * np.maximum(1.0, np.abs(np.where(np.isfinite(mins), mins, 0.0)))
    first = np.argmax(imp <= (mins + tol)[None, :], axis=0)
    best = None  # (impurity, feature, threshold)
    for c in np.flatnonzero(np.isfinite(mins)):
        j = int(first[c])
        v = float(imp[j, c])
        if best is None or v < best[0] - _TIE * max(1.0, abs(best[0])):
            lo, hi = xs_sorted[j, c], xs_sorted[j + 1, c]
            thr = 0.5 * (lo + hi)
            if not thr < hi:
                thr = lo
            best = (v, int(features[c]), float(thr))
    return best


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (nodes, n_classes) weighted class distribution

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.value[self.apply(X)], axis=1)


def build_tree(X, y, n_classes: int, max_depth: int | None = None, min_leaf: int = 1,
               sample_weight=None, feature_fraction: float = 1.0,
               rng: np.random.Generator | None = None) -> Tree:
    """Greedy CART growth on weighted Gini impurity.

    A node splits whenever it is impure, within depth, and some feature has
    two distinct values, even if no split lowers the impurity.
    """
    X, y = _check_xy(X, y)
    n, d = X.shape
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    n_sub = d if feature_fraction >= 1.0 else max(1, int(math.ceil(feature_fraction * d)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        dist = np.bincount(y[idx], weights=w[idx], minlength=n_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(dist)
        return len(feature) - 1

    root = new_node(np.arange(n))
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if max_depth is not None and depth >= max_depth:
            continue
        if len(idx) < 2 * min_leaf or np.unique(y[idx]).size < 2:
            continue
        if n_sub < d:
            feats = np.sort(rng.choice(d, n_sub, replace=False))
            split = _best_split(X, y, w, idx, feats, n_classes, min_leaf)
            if split is None:
                rest = np.setdiff1d(np.arange(d), feats)
                split = _best_split(X, y, w, idx, rest, n_classes, min_leaf)
        else:
            split = _best_split(X, y, w, idx, range(d), n_classes, min_leaf)
        if split is None:
            continue
        _, f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.asarray(feature), np.asarray(threshold), np.asarray(left),
                np.asarray(right), np.asarray(value).reshape(len(feature), n_classes))


class DecisionTreeClassifier:
    def __init__(self, max_depth: int | None = 10, min_leaf: int = 1):
        self.max_depth = max_depth
        self.min_leaf = min_leaf

    def fit(self, X, y, n_classes: int | None = None, sample_weight=None):
        X, y = _check_xy(X, y)
        self.n_classes_ = int(n_classes if n_classes is not None else y.max() + 1)
        self.tree_ = build_tree(X, y, self.n_classes_, self.max_depth, self.min_leaf, sample_weight)
        return self

    def predict(self, X) -> np.ndarray:
        return self.tree_.predict(X)


def decision_tree_fit(X, y, n_classes: int, max_depth: int | None = 10, min_leaf: int = 1) -> Tree:
    return build_tree(X, y, n_classes, max_depth, min_leaf)


def tree_predict(tree: Tree, x) -> int:
    return int(tree.predict(np.atleast_2d(x))[0])


class RandomForestClassifier:
    """Bootstrap trees with per-split feature subsampling and a majority vote."""

    def __init__(self, n_trees: int = 100, max_depth: int | None = 10, feature_fraction: float = 0.3,
                 bootstrap: bool = True, min_leaf: int = 1, seed: int = 0):
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < feature_fraction <= 1.0:
            raise ValueError("feature_fraction must lie in (0, 1]")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.feature_fraction = feature_fraction
        self.bootstrap = bootstrap
        self.min_leaf = min_leaf
        self.seed = seed

    def fit(self, X, y, n_classes: int | None = None):
        X, y = _check_xy(X, y)
        self.n_classes_ = int(n_classes if n_classes is not None else y.max() + 1)
        self.trees_ = []
        n = len(X)
        for i in range(self.n_trees):
            rng = np.random.default_rng([self.seed % 2**64, i])
            rows = rng.integers(0, n, n) if self.bootstrap else np.arange(n)
            self.trees_.append(build_tree(X[rows], y[rows], self.n_classes_, self.max_depth,
                                          self.min_leaf, None, self.feature_fraction, rng))
        return self

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        votes = np.zeros((len(X), self.n_classes_), dtype=np.int64)
        for tree in self.trees_:
            np.add.at(votes, (np.arange(len(X)), tree.predict(X)), 1)
        return np.argmax(votes, axis=1)


def random_forest_fit(X, y, n_classes: int, n_trees: int = 100, max_depth: int | None = 10,
                      feature_fraction: float = 0.3, seed: int = 0, bootstrap: bool = True):
    return RandomForestClassifier(n_trees, max_depth, feature_fraction, bootstrap, seed=seed).fit(X, y, n_classes)


def forest_predict(forest: RandomForestClassifier, x) -> int:
    return int(forest.predict(np.atleast_2d(x))[0])


# -------------------------------------------------------------------- AdaBoost

class AdaBoostClassifier:
    """Multiclass SAMME over depth-1 stumps.

    Boosting stops when a stump's weighted error reaches ``1 - 1/K`` (that
    stump is discarded) or hits zero (that stump is kept).
    """

    def __init__(self, n_rounds: int = 50):
        if n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        self.n_rounds = n_rounds

    def fit(self, X, y, n_classes: int | None = None):
        X, y = _check_xy(X, y)
        K = self.n_classes_ = int(n_classes if n_classes is not None else y.max() + 1)
        n = len(X)
        w = np.full(n, 1.0 / n)
        self.stumps_: list[Tree] = []
        self.alphas_: list[float] = []
        self.weight_history_: list[np.ndarray] = []
        self.train_errors_: list[float] = []
        scores = np.zeros((n, K))
        for _ in range(self.n_rounds):
            stump = build_tree(X, y, K, max_depth=1, sample_weight=w)
            pred = stump.predict(X)
            miss = pred != y
            err = float(np.dot(w, miss) / w.sum())
            if err >= 1.0 - 1.0 / K:
                break
            if err <= 0.0:
                self.stumps_.append(stump)
                self.alphas_.append(1.0)
                scores[np.arange(n), pred] += 1.0
                self.train_errors_.append(float(np.mean(np.argmax(scores, axis=1) != y)))
                break
            alpha = math.log((1.0 - err) / err) + math.log(K - 1.0)
            self.stumps_.append(stump)
            self.alphas_.append(alpha)
            w = w * np.exp(alpha * miss)
            w = w / w.sum()
            self.weight_history_.append(w.copy())
            scores[np.arange(n), pred] += alpha
            self.train_errors_.append(float(np.mean(np.argmax(scores, axis=1) != y)))
        if not self.stumps_:
            self.fallback_ = int(np.argmax(np.bincount(y, minlength=K)))
        return self

    @property
    def n_rounds_run(self) -> int:
        return len(self.stumps_)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        scores = np.zeros((len(X), self.n_classes_))
        for stump, a in zip(self.stumps_, self.alphas_):
            scores[np.arange(len(X)), stump.predict(X)] += a
        return scores

    def predict(self, X) -> np.ndarray:
        if not self.stumps_:
            return np.full(len(np.atleast_2d(X)), self.fallback_)
        return np.argmax(self.decision_function(X), axis=1)


def adaboost_fit(X, y, n_classes: int, n_rounds: int = 50) -> AdaBoostClassifier:
    return AdaBoostClassifier(n_rounds).fit(X, y, n_classes)


def adaboost_predict(model: AdaBoostClassifier, x) -> int:
    return int(model.predict(np.atleast_2d(x))[0])


# ----------------------------------------------------------------- linear SVM

class LinearSVMClassifier:
    """One-vs-rest linear SVMs trained by mini-batch Pegasos subgradient steps.

    Each binary problem minimizes ``0.5 |w|^2 + C * sum_i hinge_i``, i.e.
    ``lam/2 |w|^2 + mean hinge`` with ``lam = 1/(C n)``. Weight steps are
    ``1/(lam t)``; the unregularized bias takes steps of ``1/t``. Rescaling
    the inputs by ``s`` and ``C`` by ``1/s^2`` rescales ``w`` by ``1/s`` and
    leaves margins unchanged.
    """

    def __init__(self, C: float = 1.0, epochs: int = 50, batch_size: int = 32, seed: int = 0):
        if not C > 0:
            raise ValueError("C must be > 0")
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.C = C
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, n_classes: int | None = None):
        X, y = _check_xy(X, y)
        K = self.n_classes_ = int(n_classes if n_classes is not None else y.max() + 1)
        n, d = X.shape
        lam = 1.0 / (self.C * n)
        Y = np.where(y[:, None] == np.arange(K)[None, :], 1.0, -1.0)  # (n, K)
        W = np.zeros((K, d))
        b = np.zeros(K)
        radius = 1.0 / math.sqrt(lam)
        rng = np.random.default_rng(self.seed % 2**64)
        t = 0
        for _ in range(self.epochs):
            perm = rng.permutation(n)
            for s in range(0, n, self.batch_size):
                idx = perm[s:s + self.batch_size]
                t += 1
                eta = 1.0 / (lam * t)
                Xb, Yb = X[idx], Y[idx]
                margin = Yb * (Xb @ W.T + b)
                viol = (margin < 1.0) * Yb  # (m, K)
                W *= 1.0 - eta * lam
                W += (eta / len(idx)) * (viol.T @ Xb)
                b += viol.mean(axis=0) / t
                norms = np.sqrt((W * W).sum(axis=1))
                shrink = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
                W *= shrink[:, None]
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DivergenceError("linear SVM weights became non-finite")
        self.W_ = W
        self.b_ = b
        return self

    @property
    def n_models(self) -> int:
        return self.W_.shape[0]

    def decision_function(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.W_.T + self.b_

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)


def linear_svm_fit(X, y, n_classes: int, C: float = 1.0, epochs: int = 50, seed: int = 0):
    return LinearSVMClassifier(C, epochs, seed=seed).fit(X, y, n_classes)


def svm_predict(model: LinearSVMClassifier, x) -> int:
    return int(model.predict(np.atleast_2d(x))[0])


# -------------------------------------------------------------------- STL DNN

def single_task_schema(schema: DatasetSchema, task: str) -> DatasetSchema:
    t = schema.task(task)
    return schema.with_tasks([TaskSpec(t.scale, 1.0)])


class STLNetworkClassifier:
    """The multi-task network restricted to one head: the single-task ablation."""

    def __init__(self, hyperparams: Hyperparams | None = None):
        self.hyperparams = hyperparams or Hyperparams()

    def fit_encoded(self, encoder: Encoder, data: EncodedDataset, task: str):
        schema = single_task_schema(data.schema, task)
        hp = self.hyperparams.replace(
            loss_weights=None,
            head_hidden_sizes={k: v for k, v in self.hyperparams.head_hidden_sizes.items() if k == task},
            class_weights=None if self.hyperparams.class_weights is None
            else {k: v for k, v in self.hyperparams.class_weights.items() if k == task},
        )
        self.task_ = task
        self.net_: MtlNetwork = init_network(schema, encoder, hp)
        sub = EncodedDataset(data.X, {task: data.y[task]}, schema)
        self.history_ = train(self.net_, sub)
        return self

    def predict_proba(self, X) -> np.ndarray:
        return self.net_.predict_proba(X)[self.task_]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


# ------------------------------------------------------------- task wrapper

@dataclass
class SingleTaskModel:
    """A fitted baseline bound to one task; predictions are scale values."""

    kind: str
    task: str
    scale: ComfortScale
    params: dict = field(default_factory=dict)
    model: Any = None

    def predict_indices(self, X) -> np.ndarray:
        return np.asarray(self.model.predict(X), dtype=np.int64)

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.scale.values)[self.predict_indices(X)]

    def predict_value(self, x) -> int:
        return index_class(self.scale, int(self.predict_indices(np.atleast_2d(x))[0]))


def make_classifier(kind: str, params: Mapping[str, Any], seed: int):
    p = {**DEFAULT_PARAMS.get(kind, {}), **params}
    if kind == "knn":
        return KNNClassifier(int(p["k"]))
    if kind == "decision_tree":
        return DecisionTreeClassifier(p["max_depth"], int(p["min_leaf"]))
    if kind == "random_forest":
        return RandomForestClassifier(int(p["n_trees"]), p["max_depth"], float(p["feature_fraction"]),
                                      bool(p["bootstrap"]), int(p.get("min_leaf", 1)), seed=seed)
    if kind == "adaboost":
        return AdaBoostClassifier(int(p["n_rounds"]))
    if kind == "linear_svm":
        return LinearSVMClassifier(float(p["C"]), int(p["epochs"]), int(p.get("batch_size", 32)), seed=seed)
    raise ValueError(f"unknown baseline kind {kind!r}")


def fit_single_task(kind: str, encoder: Encoder, data: EncodedDataset, task: str,
                    params: Mapping[str, Any] | None = None, seed: int = 0,
                    hyperparams: Hyperparams | None = None) -> SingleTaskModel:
    """Fit one baseline on the rows of ``data`` that carry a ``task`` label."""
    if kind not in KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    params = dict(params or {})
    scale = data.schema.task(task).scale
    if kind == "stl_dnn":
        hp = (hyperparams or Hyperparams()).replace(seed=seed)
        model = STLNetworkClassifier(hp).fit_encoded(encoder, data, task)
        return SingleTaskModel(kind, task, scale, params, model)
    rows = np.flatnonzero(data.y[task] >= 0)
    if len(rows) == 0:
        raise ValueError(f"no labeled rows for task {task!r}")
    clf = make_classifier(kind, params, seed)
    clf.fit(data.X[rows], data.y[task][rows], len(scale))
    return SingleTaskModel(kind, task, scale, params, clf)
