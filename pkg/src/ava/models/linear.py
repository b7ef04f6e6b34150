"""Convex linear models, trained to convergence (used for influence validation)."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_X_y

from ava.models.base import Predictor, TrainingError


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticRegressionModel(Predictor):
    """Binary L2-regularized logistic regression fitted by Newton's method.

    Parameters are ``theta = (w, b)``; the objective is the mean
    cross-entropy plus ``l2 / 2 * ||w||^2``. Training starts from zeros and
    stops when the gradient norm drops below ``tol``.
    """

    kind = "logistic"
    has_input_gradient = True
    has_param_gradient = True
    has_hvp = True

    def __init__(self, l2=1e-2, fit_intercept=True, tol=1e-10, max_iter=100):
        self.l2 = l2
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter

    def _design(self, X):
        return np.hstack([X, np.ones((len(X), 1))]) if self.fit_intercept else X

    def _reg_mask(self, p):
        mask = np.ones(p)
        if self.fit_intercept:
            mask[-1] = 0.0
        return mask

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError("LogisticRegressionModel is binary only")
        self.n_features_in_ = X.shape[1]
        t = self._label_index(y).astype(float)
        Z = self._design(X)
        n, p = Z.shape
        reg = self.l2 * self._reg_mask(p)
        theta = np.zeros(p)
        for it in range(self.max_iter):
            mu = _sigmoid(Z @ theta)
            grad = Z.T @ (mu - t) / n + reg * theta
            if np.linalg.norm(grad) < self.tol:
                break
            H = (Z * (mu * (1 - mu))[:, None]).T @ Z / n + np.diag(reg)
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
            if grad @ step < 1e-24:
                # Newton decrement at round-off level
                break
            # backtracking keeps Newton monotone on nearly separable data
            f0 = self._objective(Z, t, theta, reg)
            # objective differences below round-off cannot veto a Newton step
            f_max = f0 + 8 * np.finfo(float).eps * abs(f0)
            s = 1.0
            while self._objective(Z, t, theta - s * step, reg) > f_max and s > 1e-10:
                s *= 0.5
            theta = theta - s * step
        else:
            raise TrainingError(f"Newton did not converge in {self.max_iter} iterations")
        self.n_iter_ = it
        self.theta_ = theta
        return self

    @staticmethod
    def _objective(Z, t, theta, reg):
        z = Z @ theta
        ce = np.logaddexp(0.0, z) - t * z
        return ce.mean() + 0.5 * np.sum(reg * theta ** 2)

    def get_flat_params(self):
        return self.theta_.copy()

    def set_flat_params(self, theta):
        self.theta_ = np.asarray(theta, dtype=float).copy()
        return self

    def decision_function(self, X):
        return self._design(self._check_X(X)) @ self.theta_

    def predict_output(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def _loss(self, X, y):
        t = self._label_index(y).astype(float)
        z = self._design(X) @ self.theta_
        return np.logaddexp(0.0, z) - t * z

    def _reg_value(self):
        return 0.5 * float(np.sum(self.l2 * self._reg_mask(self.theta_.size) * self.theta_ ** 2))

    def _reg_gradient(self):
        return self.l2 * self._reg_mask(self.theta_.size) * self.theta_

    def _param_gradients(self, X, y):
        t = self._label_index(y).astype(float)
        Z = self._design(X)
        mu = _sigmoid(Z @ self.theta_)
        return (mu - t)[:, None] * Z

    def _hvp(self, X, y, v):
        Z = self._design(X)
        mu = _sigmoid(Z @ self.theta_)
        return Z.T @ (mu * (1 - mu) * (Z @ v)) / len(X) + self.l2 * self._reg_mask(v.size) * v

    def _input_gradient(self, X, output_index):
        p = _sigmoid(self.decision_function(X))
        sign = 1.0 if output_index == 1 else -1.0
        return sign * (p * (1 - p))[:, None] * self.theta_[: self.n_features_in_]


class LinearRegressionModel(Predictor):
    """Least squares with per-example loss ``(f(x) - y)^2``.

    Fitted in closed form (ridge when ``l2 > 0``).
    """

    kind = "linear"
    has_input_gradient = True
    has_param_gradient = True
    has_hvp = True
    is_classifier = False

    def __init__(self, fit_intercept=True, l2=0.0):
        self.fit_intercept = fit_intercept
        self.l2 = l2

    def _design(self, X):
        return np.hstack([X, np.ones((len(X), 1))]) if self.fit_intercept else X

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        Z = self._design(X)
        n, p = Z.shape
        A = 2 * Z.T @ Z / n + self.l2 * np.eye(p)
        # minimum-norm solution when the design is rank deficient
        self.theta_ = np.linalg.lstsq(A, 2 * Z.T @ y / n, rcond=None)[0]
        return self

    def get_flat_params(self):
        return self.theta_.copy()

    def set_flat_params(self, theta):
        self.theta_ = np.asarray(theta, dtype=float).copy()
        return self

    def predict_output(self, X):
        return (self._design(self._check_X(X)) @ self.theta_)[:, None]

    def _loss(self, X, y):
        r = self._design(X) @ self.theta_ - y
        return r ** 2

    def _reg_value(self):
        return 0.5 * self.l2 * float(np.sum(self.theta_ ** 2))

    def _reg_gradient(self):
        return self.l2 * self.theta_

    def _param_gradients(self, X, y):
        Z = self._design(X)
        r = Z @ self.theta_ - y
        return 2 * r[:, None] * Z

    def _hvp(self, X, y, v):
        Z = self._design(X)
        return 2 * Z.T @ (Z @ v) / len(X) + self.l2 * v

    def _input_gradient(self, X, output_index):
        return np.tile(self.theta_[: self.n_features_in_], (len(X), 1))
