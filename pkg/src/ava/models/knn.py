"""k-nearest-neighbour classifier and its smooth surrogate."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_X_y

from ava.models.base import Predictor


def _sq_dists(X, T):
    return np.maximum((X * X).sum(1)[:, None] + (T * T).sum(1)[None, :] - 2.0 * X @ T.T, 0.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class KNNClassifier(Predictor):
    """Majority vote among the ``n_neighbors`` nearest training points.

    ``predict_output`` returns vote fractions. Tied votes resolve to the
    smallest class index; tied distances resolve to the lower training index.
    The model has no parameters and no input gradient; :meth:`surrogate`
    returns a smooth stand-in for gradient-based explanations and influence.
    """

    kind = "knn"

    def __init__(self, n_neighbors=5, temperature=0.1):
        self.n_neighbors = n_neighbors
        self.temperature = temperature

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if not 1 <= self.n_neighbors <= len(X):
            raise ValueError(f"n_neighbors must be in [1, {len(X)}]")
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        self.X_fit_ = X.copy()
        self.y_fit_ = y.copy()
        self._y_idx = self._label_index(y)
        return self

    def kneighbors(self, X):
        D = _sq_dists(self._check_X(X), self.X_fit_)
        return np.argsort(D, axis=1, kind="stable")[:, : self.n_neighbors]

    def predict_output(self, X):
        nn = self.kneighbors(X)
        votes = np.zeros((len(nn), len(self.classes_)))
        for c in range(len(self.classes_)):
            votes[:, c] = (self._y_idx[nn] == c).sum(1)
        return votes / self.n_neighbors

    def surrogate(self) -> "SoftKNNClassifier":
        return SoftKNNClassifier(self.n_neighbors, self.temperature).fit(self.X_fit_, self.y_fit_)

    def direct_influence(self, x_test, y_test):
        return self.surrogate().direct_influence(x_test, y_test)


class SoftKNNClassifier(KNNClassifier):
    """Smooth k-NN: soft top-k membership with a sigmoid of temperature ``tau``.

    With ``s_j = ||x - x_j||^2`` and ``r`` the midpoint between the k-th and
    (k+1)-th smallest ``s_j``, membership is ``m_j = sigmoid((r - s_j) / tau)``
    and ``p_c = sum_j m_j [y_j = c] / sum_j m_j``. As ``tau -> 0`` this is the
    hard vote away from distance ties.
    """

    kind = "soft_knn"
    has_input_gradient = True

    def _membership(self, X):
        S = _sq_dists(X, self.X_fit_)
        order = np.argsort(S, axis=1, kind="stable")
        k, n = self.n_neighbors, len(self.X_fit_)
        rows = np.arange(len(X))
        kth = order[:, k - 1]
        if k < n:
            nxt = order[:, k]
            r = 0.5 * (S[rows, kth] + S[rows, nxt])
        else:
            nxt = kth
            r = S[rows, kth] + 1.0
        M = _sigmoid((r[:, None] - S) / self.temperature)
        return S, M, kth, nxt

    def _onehot(self):
        Y = np.zeros((len(self.X_fit_), len(self.classes_)))
        Y[np.arange(len(Y)), self._y_idx] = 1.0
        return Y

    def predict_output(self, X):
        X = self._check_X(X)
        _, M, _, _ = self._membership(X)
        return (M @ self._onehot()) / M.sum(1, keepdims=True)

    def _input_gradient(self, X, output_index):
        S, M, kth, nxt = self._membership(X)
        Y = self._onehot()
        U = M.sum(1)
        P = (M @ Y) / U[:, None]
        # d s_j / dx = 2 (x - x_j);  d r / dx = mean of that for the two order statistics
        dr = (X - 0.5 * (self.X_fit_[kth] + self.X_fit_[nxt])) * 2.0
        if self.n_neighbors == len(self.X_fit_):
            dr = 2.0 * (X - self.X_fit_[kth])
        coef = M * (1.0 - M) / self.temperature * (Y[:, output_index][None, :] - P[:, [output_index]])
        coef = coef / U[:, None]  # (n, N)
        # sum_j coef_j (dr - 2(x - x_j))
        return coef.sum(1)[:, None] * (dr - 2.0 * X) + 2.0 * coef @ self.X_fit_

    def direct_influence(self, x_test, y_test):
        """Derivative of the test cross-entropy w.r.t. each training point's vote weight.

        A lazy learner has no optimisation step, so upweighting training point
        ``j`` by ``eps`` simply scales its vote by ``1 + eps``; the influence is
        the exact derivative of ``-log p_y(x_test)`` at ``eps = 0``.
        """
        x = self._check_X(np.asarray(x_test, dtype=float))
        _, M, _, _ = self._membership(x)
        m = M[0]
        c = int(self._label_index(np.asarray([y_test]))[0])
        U = m.sum()
        same = (self._y_idx == c).astype(float)
        p = float(m @ same) / U
        return -(m * (same - p) / U) / max(p, 1e-300)
