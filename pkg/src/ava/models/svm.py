"""RBF-kernel SVM trained in the primal with the squared hinge loss.

Each one-vs-rest scorer is ``f_c(x) = sum_i beta_ci K(x_i, x) + b_c``. The
objective ``1/2 beta^T K beta + C sum_i max(0, 1 - y_i f(x_i))^2`` is smooth,
so parameter gradients and (generalized) Hessian-vector products are
available for influence computations. Training uses the primal Newton
iteration over the active set of margin violators.
"""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_X_y

from ava.models.base import Predictor, TrainingError


def rbf_kernel(A, B, gamma):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class RBFSVMClassifier(Predictor):
    """Squared-hinge kernel SVM with softmax-normalized class scores.

    Parameters
    ----------
    C : float
        Penalty on squared margin violations.
    gamma : float or "scale"
        RBF width. ``"scale"`` uses ``1 / (d * X.var())``.
    max_iter : int
        Cap on active-set Newton iterations per scorer.
    """

    kind = "svm_rbf"
    has_input_gradient = True
    has_param_gradient = True
    has_hvp = True

    def __init__(self, C=1.0, gamma="scale", max_iter=100):
        self.C = C
        self.gamma = gamma
        self.max_iter = max_iter

    def fit(self, X, y):
        if not self.C > 0:
            raise ValueError("C must be positive")
        X, y = check_X_y(X, y, dtype=float)
        if isinstance(self.gamma, str):
            if self.gamma != "scale":
                raise ValueError(f"unknown gamma {self.gamma!r}")
            var = X.var()
            self.gamma_ = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
        else:
            if not self.gamma > 0:
                raise ValueError("gamma must be positive")
            self.gamma_ = float(self.gamma)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        self.X_fit_ = X.copy()
        self.y_fit_ = y.copy()
        K = rbf_kernel(X, X, self.gamma_)
        Y = self._signed_targets(y)
        self.beta_ = np.zeros((Y.shape[1], len(X)))
        self.b_ = np.zeros(Y.shape[1])
        self.n_iter_ = []
        for c in range(Y.shape[1]):
            beta, b, it = self._newton(K, Y[:, c])
            self.beta_[c], self.b_[c] = beta, b
            self.n_iter_.append(it)
        return self

    def _n_scorers(self):
        return 1 if len(self.classes_) == 2 else len(self.classes_)

    def _signed_targets(self, y):
        idx = self._label_index(y)
        if len(self.classes_) == 2:
            return np.where(idx == 1, 1.0, -1.0)[:, None]
        Y = -np.ones((len(y), len(self.classes_)))
        Y[np.arange(len(y)), idx] = 1.0
        return Y

    def _newton(self, K, t):
        n = len(t)
        sv = np.ones(n, dtype=bool)
        beta, b = np.zeros(n), 0.0
        for it in range(1, self.max_iter + 1):
            idx = np.flatnonzero(sv)
            m = len(idx)
            A = np.zeros((m + 1, m + 1))
            A[:m, :m] = K[np.ix_(idx, idx)] + np.eye(m) / (2.0 * self.C)
            A[:m, m] = 1.0
            A[m, :m] = 1.0
            rhs = np.append(t[idx], 0.0)
            sol = np.linalg.solve(A, rhs)
            beta = np.zeros(n)
            beta[idx] = sol[:m]
            b = sol[m]
            margin = t * (K @ beta + b)
            new_sv = margin < 1.0
            if np.array_equal(new_sv, sv):
                return beta, b, it
            sv = new_sv
            if not sv.any():
                # no margin violators left
                return beta, b, it
        raise TrainingError(
            f"SVM active-set Newton did not converge in {self.max_iter} iterations"
        )

    # -- prediction --------------------------------------------------------

    def decision_function(self, X):
        X = self._check_X(X)
        F = rbf_kernel(X, self.X_fit_, self.gamma_) @ self.beta_.T + self.b_
        return F[:, 0] if F.shape[1] == 1 else F

    def _scores(self, F):
        return np.column_stack([-F, F]) if F.ndim == 1 else F

    def predict_output(self, X):
        return _softmax(self._scores(self.decision_function(X)))

    def _input_gradient(self, X, output_index):
        Kx = rbf_kernel(X, self.X_fit_, self.gamma_)  # (n, N)
        # d f_c / d x = sum_i beta_ci K(x, x_i) (-2 gamma)(x - x_i)
        dF = []
        for beta in self.beta_:
            w = Kx * beta  # (n, N)
            dF.append(-2.0 * self.gamma_ * (w.sum(1)[:, None] * X - w @ self.X_fit_))
        dF = np.stack(dF, axis=1)  # (n, scorers, d)
        if len(self.classes_) == 2:
            dF = np.concatenate([-dF, dF], axis=1)
        P = self.predict_output(X)
        # softmax Jacobian row for the chosen class
        coef = -P * P[:, [output_index]]
        coef[:, output_index] += P[:, output_index]
        return np.einsum("nc,ncd->nd", coef, dF)

    # -- parameters and influence capabilities ------------------------------

    def get_flat_params(self):
        return np.concatenate([np.append(beta, b) for beta, b in zip(self.beta_, self.b_)])

    def set_flat_params(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(self._n_scorers(), -1)
        self.beta_ = theta[:, :-1].copy()
        self.b_ = theta[:, -1].copy()
        return self

    def _features(self, X):
        """Rows ``(K(x, x_1..N), 1)``: f_c(x) = features @ (beta_c, b_c)."""
        Phi = rbf_kernel(X, self.X_fit_, self.gamma_)
        return np.hstack([Phi, np.ones((len(X), 1))])

    def _train_kernel(self):
        if not hasattr(self, "_K_fit"):
            self._K_fit = rbf_kernel(self.X_fit_, self.X_fit_, self.gamma_)
        return self._K_fit

    def _reg_value(self):
        K = self._train_kernel()
        return 0.5 * sum(float(b @ K @ b) for b in self.beta_) / len(self.X_fit_)

    def _reg_gradient(self):
        K = self._train_kernel()
        blocks = [np.append(K @ b, 0.0) for b in self.beta_]
        return np.concatenate(blocks) / len(self.X_fit_)

    def _loss(self, X, y):
        Phi = self._features(X)
        Y = self._signed_targets(y)
        theta = self.get_flat_params().reshape(self._n_scorers(), -1)
        slack = np.maximum(0.0, 1.0 - Y * (Phi @ theta.T))
        return self.C * (slack ** 2).sum(1)

    def _param_gradients(self, X, y):
        Phi = self._features(X)
        Y = self._signed_targets(y)
        theta = self.get_flat_params().reshape(self._n_scorers(), -1)
        slack = np.maximum(0.0, 1.0 - Y * (Phi @ theta.T))
        return np.hstack([(-2.0 * self.C * slack[:, c] * Y[:, c])[:, None] * Phi
                          for c in range(self._n_scorers())])

    def _hvp(self, X, y, v):
        Phi = self._features(X)
        Y = self._signed_targets(y)
        theta = self.get_flat_params().reshape(self._n_scorers(), -1)
        active = (Y * (Phi @ theta.T)) < 1.0
        K = self._train_kernel()
        N = len(self.X_fit_)
        V = v.reshape(self._n_scorers(), -1)
        out = np.zeros_like(V)
        for c in range(self._n_scorers()):
            Pa = Phi[active[:, c]]
            out[c] = 2.0 * self.C * Pa.T @ (Pa @ V[c]) / len(X)
            out[c, :-1] += K @ V[c, :-1] / N
        return out.ravel()
