"""CART classification tree (Gini) with pruning to a feature budget."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_X_y

from ava.models.base import Predictor


def _gini(counts):
    n = counts.sum(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
    return np.where(n > 0, 1.0 - np.sum(p * p, axis=-1), 0.0)


class DecisionTreeClassifier(Predictor):
    """Greedy Gini tree, grown fully and then pruned to a feature budget.

    After growth, while more than ``max_used_features`` distinct features
    appear in split nodes, every split on the least important surplus
    feature (by total impurity decrease, ties to the higher index) is
    collapsed into a leaf. ``used_features_`` lists the surviving split
    features ranked by total impurity decrease.
    """

    kind = "decision_tree"

    def __init__(self, max_used_features=None, max_depth=None, min_samples_split=2,
                 min_samples_leaf=1):
        self.max_used_features = max_used_features
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.min_samples_leaf = min_samples_leaf

    def fit(self, X, y):
        if self.max_used_features is not None and self.max_used_features < 1:
            raise ValueError("max_used_features must be >= 1")
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        t = self._label_index(y)
        self._grow(X, t)
        if self.max_used_features is not None:
            self._prune_to(self.max_used_features)
        self.used_features_ = self._ranked_features()
        return self

    # -- growth --------------------------------------------------------------

    def _grow(self, X, t):
        n_cls = len(self.classes_)
        self.feature_, self.threshold_, self.left_, self.right_ = [], [], [], []
        self.value_, self.impurity_, self.n_node_samples_ = [], [], []
        self.n_total_ = len(X)
        stack = [(np.arange(len(X)), 0, None, None)]
        while stack:
            idx, depth, parent, side = stack.pop()
            node = len(self.feature_)
            counts = np.bincount(t[idx], minlength=n_cls).astype(float)
            self.value_.append(counts)
            self.impurity_.append(float(_gini(counts)))
            self.n_node_samples_.append(len(idx))
            self.feature_.append(-1)
            self.threshold_.append(np.nan)
            self.left_.append(-1)
            self.right_.append(-1)
            if parent is not None:
                (self.left_ if side == "L" else self.right_)[parent] = node
            split = None
            if (self.impurity_[node] > 0 and len(idx) >= self.min_samples_split
                    and (self.max_depth is None or depth < self.max_depth)):
                split = self._best_split(X[idx], t[idx], n_cls)
            if split is None:
                continue
            f, thr = split
            self.feature_[node] = f
            self.threshold_[node] = thr
            go_left = X[idx, f] <= thr
            # push right first so the left subtree is numbered first
            stack.append((idx[~go_left], depth + 1, node, "R"))
            stack.append((idx[go_left], depth + 1, node, "L"))
        for name in ("feature_", "left_", "right_", "n_node_samples_"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.threshold_ = np.asarray(self.threshold_)
        self.value_ = np.asarray(self.value_)
        self.impurity_ = np.asarray(self.impurity_)

    def _best_split(self, X, t, n_cls):
        n = len(t)
        best, best_score = None, np.inf
        onehot = np.eye(n_cls)[t]
        for f in range(X.shape[1]):
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            left = np.cumsum(onehot[order], axis=0)[:-1]
            right = left[-1] + onehot[order[-1]] - left
            valid = xs[1:] > xs[:-1]
            nl = np.arange(1, n)
            valid &= (nl >= self.min_samples_leaf) & (n - nl >= self.min_samples_leaf)
            if not valid.any():
                continue
            score = (nl * _gini(left) + (n - nl) * _gini(right)) / n
            score = np.where(valid, score, np.inf)
            pos = int(np.argmin(score))
            if score[pos] < best_score - 1e-12:
                best_score = score[pos]
                best = (f, 0.5 * (xs[pos] + xs[pos + 1]))
        return best

    # -- importance and pruning ----------------------------------------------

    def _live_splits(self):
        live, stack = [], [0]
        while stack:
            node = stack.pop()
            if self.feature_[node] >= 0:
                live.append(node)
                stack.extend([self.left_[node], self.right_[node]])
        return live

    def _importances(self):
        imp = np.zeros(self.n_features_in_)
        for node in self._live_splits():
            l, r = self.left_[node], self.right_[node]
            n_t = self.n_node_samples_[node]
            dec = (n_t * self.impurity_[node]
                   - self.n_node_samples_[l] * self.impurity_[l]
                   - self.n_node_samples_[r] * self.impurity_[r]) / self.n_total_
            imp[self.feature_[node]] += dec
        return imp

    def _used(self):
        return sorted({int(self.feature_[n]) for n in self._live_splits()})

    def _prune_to(self, m):
        while True:
            used = self._used()
            if len(used) <= m:
                return
            imp = self._importances()
            # least important; ties -> higher feature index
            victim = min(used, key=lambda f: (imp[f], -f))
            for node in self._live_splits():
                if self.feature_[node] == victim:
                    self.feature_[node] = -1
                    self.threshold_[node] = np.nan

    def _ranked_features(self):
        imp = self._importances()
        self.feature_importances_ = imp
        return sorted(self._used(), key=lambda f: (-imp[f], f))

    # -- prediction ----------------------------------------------------------

    def apply(self, X):
        X = self._check_X(X)
        nodes = np.zeros(len(X), dtype=np.int64)
        for i, x in enumerate(X):
            node = 0
            while self.feature_[node] >= 0:
                node = self.left_[node] if x[self.feature_[node]] <= self.threshold_[node] \
                    else self.right_[node]
            nodes[i] = node
        return nodes

    def predict_output(self, X):
        v = self.value_[self.apply(X)]
        return v / v.sum(1, keepdims=True)


def train_decision_tree(X, y, max_features: int):
    """Fit a pruned tree; returns the tree and its ranked feature list."""
    tree = DecisionTreeClassifier(max_used_features=max_features).fit(X, y)
    return tree, list(tree.used_features_)
