"""Common predictor contract and capability-gated entry points."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted


class CapabilityError(TypeError):
    """A predictor was asked for a quantity it cannot provide."""


class TrainingError(RuntimeError):
    """Training diverged or failed to converge."""


class Predictor(ClassifierMixin, BaseEstimator):
    """Base class for the model zoo.

    Subclasses implement ``fit`` and ``predict_output`` and opt into the
    derivative capabilities by setting the class flags and overriding the
    matching ``_*`` hooks. ``predict_output`` returns a 2-D array: class
    probabilities for classifiers, a single score column for regressors.
    """

    kind = "base"
    has_input_gradient = False
    has_param_gradient = False
    has_hvp = False
    is_classifier = True

    # -- prediction --------------------------------------------------------

    def predict_output(self, X):
        raise NotImplementedError

    def predict_proba(self, X):
        if not self.is_classifier:
            raise CapabilityError(f"{self.kind} is not a classifier")
        return self.predict_output(X)

    def predict(self, X):
        out = self.predict_output(X)
        if self.is_classifier:
            return self.classes_[np.argmax(out, axis=1)]
        return out[:, 0]

    @property
    def n_features_(self) -> int:
        check_is_fitted(self)
        return self.n_features_in_

    # -- capabilities ------------------------------------------------------

    def input_gradient(self, X, output_index: int):
        """Gradient of output column ``output_index`` w.r.t. each row of X."""
        self._require("has_input_gradient", "input gradients")
        return self._input_gradient(self._check_X(X), output_index)

    def example_loss(self, X, y, regularized=False):
        """Per-example data loss; ``regularized`` adds the penalty term.

        The training objective is ``mean(example_loss) + penalty``, so the
        regularized per-example values average to the objective.
        """
        self._require("has_param_gradient", "a training loss")
        out = self._loss(self._check_X(X), np.asarray(y))
        return out + self._reg_value() if regularized else out

    def param_gradients(self, X, y, regularized=False):
        """Per-example gradients of the data loss, shape ``(n, p)``.

        Upweighting a training point changes only its data loss, so influence
        uses the unregularized form; ``regularized=True`` adds the penalty
        gradient to every row.
        """
        self._require("has_param_gradient", "parameter gradients")
        G = self._param_gradients(self._check_X(X), np.asarray(y))
        return G + self._reg_gradient() if regularized else G

    def _reg_value(self) -> float:
        return 0.0

    def _reg_gradient(self):
        return 0.0

    def hvp(self, X, y, v, damping: float = 0.0):
        """``(H + damping I) v`` with H the Hessian of the mean training loss."""
        self._require("has_hvp", "Hessian-vector products")
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params_,):
            raise ValueError(f"v must have shape ({self.n_params_},), got {v.shape}")
        return self._hvp(self._check_X(X), np.asarray(y), v) + damping * v

    def get_flat_params(self) -> np.ndarray:
        check_is_fitted(self)
        return np.empty(0)

    def set_flat_params(self, theta) -> "Predictor":
        raise CapabilityError(f"{self.kind} has no parameters")

    @property
    def n_params_(self) -> int:
        return self.get_flat_params().size

    def capabilities(self) -> dict:
        return {
            "has_input_gradient": self.has_input_gradient,
            "has_param_gradient": self.has_param_gradient,
            "has_hvp": self.has_hvp,
        }

    # -- helpers -----------------------------------------------------------

    def _require(self, flag: str, what: str):
        if not getattr(self, flag):
            raise CapabilityError(f"{self.kind} predictor does not provide {what}")
        check_is_fitted(self)

    def _check_X(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite values")
        return X

    def _label_index(self, y):
        """Map labels to column indices of ``classes_``."""
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("labels not seen during fit")
        return idx


# Module-level entry points mirroring the operation names used across the package.

def predict(p: Predictor, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = p.predict_output(x[None, :] if single else x)
    return out[0] if single else out


def grad_input(p: Predictor, x, output_index: int) -> np.ndarray:
    return p.input_gradient(np.asarray(x, dtype=float)[None, :], output_index)[0]


def grad_params(p: Predictor, x, y) -> np.ndarray:
    return p.param_gradients(np.asarray(x, dtype=float)[None, :], np.asarray([y]))[0]


def hvp(p: Predictor, X, y, v, damping: float = 0.0) -> np.ndarray:
    return p.hvp(X, y, v, damping)
