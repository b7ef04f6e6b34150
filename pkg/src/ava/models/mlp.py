"""Fully connected network trained with ADAM, with exact second-order products.

The Hessian-vector product is computed with the R-operator (forward-mode
differentiation of the backward pass), so the cost of one product is about
two gradient evaluations and no ``p x p`` matrix is formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.utils.validation import check_X_y

from ava.models.base import Predictor, TrainingError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "relu")
LOSSES = ("cross_entropy", "squared_error")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(z, name):
    """Return activation value, first and second derivative."""
    if name == "sigmoid":
        a = _sigmoid(z)
        d1 = a * (1.0 - a)
        return a, d1, d1 * (1.0 - 2.0 * a)
    # relu: subgradient 0 at the kink
    pos = (z > 0).astype(float)
    return z * pos, pos, np.zeros_like(z)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for :class:`MLPClassifier` training."""

    hidden_layer_sizes: tuple = (16, 16)
    activation: str = "sigmoid"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 500
    batch_size: int | None = None
    seed: int = 0
    loss: str = "cross_entropy"
    l2: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; valid: {', '.join(ACTIVATIONS)}"
            )
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; valid: {', '.join(LOSSES)}")
        for name in ("learning_rate", "beta1", "beta2", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if any(h < 1 for h in self.hidden_layer_sizes):
            raise ValueError("hidden layer widths must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    def estimator(self) -> "MLPClassifier":
        return MLPClassifier(**self.__dict__)


class MLPClassifier(Predictor):
    """Multilayer perceptron with softmax output.

    The default ``hidden_layer_sizes=(16, 16)`` gives three weight layers.
    With ``loss="squared_error"`` the network is a regressor with a single
    linear output unit.

    The training objective is the mean per-example loss plus
    ``l2 / 2 * ||theta||^2``; ``hvp`` differentiates exactly this objective.
    """

    kind = "mlp"
    has_input_gradient = True
    has_param_gradient = True
    has_hvp = True

    def __init__(self, hidden_layer_sizes=(16, 16), activation="sigmoid",
                 learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 epochs=500, batch_size=None, seed=0, loss="cross_entropy", l2=0.0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.loss = loss
        self.l2 = l2

    @property
    def is_classifier(self):
        return self.loss == "cross_entropy"

    # -- parameters --------------------------------------------------------

    def _init_params(self, n_in, n_out, rng):
        sizes = [n_in, *self.hidden_layer_sizes, n_out]
        self.layer_sizes_ = tuple(sizes)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            # Glorot uniform
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        self._params = params

    def get_flat_params(self):
        return np.concatenate([p.ravel() for p in self._params])

    def set_flat_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        out, pos = [], 0
        for p in self._params:
            out.append(theta[pos:pos + p.size].reshape(p.shape).copy())
            pos += p.size
        if pos != theta.size:
            raise ValueError(f"expected {pos} parameters, got {theta.size}")
        self._params = out
        return self

    def _unflatten(self, v):
        out, pos = [], 0
        for p in self._params:
            out.append(v[pos:pos + p.size].reshape(p.shape))
            pos += p.size
        return out

    # -- training ----------------------------------------------------------

    def fit(self, X, y):
        TrainConfig(**self.get_params())  # validates hyperparameters
        X, y = check_X_y(X, y, dtype=float, y_numeric=not self.is_classifier)
        self.n_features_in_ = X.shape[1]
        if self.is_classifier:
            self.classes_ = np.unique(y)
            n_out = len(self.classes_)
            targets = self._label_index(y)
        else:
            n_out = 1
            targets = y.astype(float)
        rng = np.random.default_rng(self.seed)
        self._init_params(X.shape[1], n_out, rng)
        n = X.shape[0]
        batch = self.batch_size or (n if n <= 1000 else 64)
        m = [np.zeros_like(p) for p in self._params]
        v = [np.zeros_like(p) for p in self._params]
        b1, b2 = self.beta1, self.beta2
        self.loss_curve_ = [float(self._objective(X, targets))]
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(n) if batch < n else np.arange(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                grads = self._batch_grads(X[idx], targets[idx])
                t += 1
                for i, g in enumerate(grads):
                    m[i] = b1 * m[i] + (1 - b1) * g
                    v[i] = b2 * v[i] + (1 - b2) * g * g
                    mhat = m[i] / (1 - b1 ** t)
                    vhat = v[i] / (1 - b2 ** t)
                    self._params[i] = self._params[i] - self.learning_rate * mhat / (
                        np.sqrt(vhat) + self.epsilon)
            obj = float(self._objective(X, targets))
            if not np.isfinite(obj):
                raise TrainingError(f"training diverged at step {t} (loss={obj})")
            self.loss_curve_.append(obj)
        return self

    # -- forward / backward ------------------------------------------------

    def _forward(self, X):
        """Return pre-activations, activations and activation derivatives."""
        Ws, bs = self._params[0::2], self._params[1::2]
        acts, zs, d1s, d2s = [X], [], [], []
        a = X
        for i, (W, b) in enumerate(zip(Ws, bs)):
            z = a @ W + b
            zs.append(z)
            if i < len(Ws) - 1:
                a, d1, d2 = _act(z, self.activation)
                acts.append(a)
                d1s.append(d1)
                d2s.append(d2)
        return zs, acts, d1s, d2s

    def _output_from_logits(self, z):
        return _softmax(z) if self.is_classifier else z

    def predict_output(self, X):
        X = self._check_X(X)
        zs, *_ = self._forward(X)
        return self._output_from_logits(zs[-1])

    def _example_loss(self, out, targets):
        if self.is_classifier:
            return -np.log(np.clip(out[np.arange(len(targets)), targets], 1e-300, None))
        return 0.5 * (out[:, 0] - targets) ** 2

    def _objective(self, X, targets):
        zs, *_ = self._forward(X)
        out = self._output_from_logits(zs[-1])
        reg = 0.5 * self.l2 * sum(float(np.sum(p * p)) for p in self._params)
        return self._example_loss(out, targets).mean() + reg

    def _output_delta(self, out, targets):
        """d(example loss)/d(logits), one row per example."""
        if self.is_classifier:
            delta = out.copy()
            delta[np.arange(len(targets)), targets] -= 1.0
            return delta
        return out - targets[:, None]

    def _backward(self, acts, d1s, delta):
        """Backpropagate per-example output deltas; returns per-layer deltas."""
        Ws = self._params[0::2]
        deltas = [delta]
        for i in range(len(Ws) - 1, 0, -1):
            delta = (delta @ Ws[i].T) * d1s[i - 1]
            deltas.append(delta)
        return deltas[::-1]

    def _batch_grads(self, X, targets):
        zs, acts, d1s, _ = self._forward(X)
        out = self._output_from_logits(zs[-1])
        deltas = self._backward(acts, d1s, self._output_delta(out, targets) / len(X))
        grads = []
        for a, d in zip(acts, deltas):
            grads.append(a.T @ d)
            grads.append(d.sum(axis=0))
        if self.l2:
            grads = [g + self.l2 * p for g, p in zip(grads, self._params)]
        return grads

    def _targets(self, y):
        return self._label_index(y) if self.is_classifier else np.asarray(y, dtype=float)

    def _loss(self, X, y):
        targets = self._targets(y)
        zs, *_ = self._forward(X)
        return self._example_loss(self._output_from_logits(zs[-1]), targets)

    def _reg_value(self):
        return 0.5 * self.l2 * float(np.sum(self.get_flat_params() ** 2))

    def _reg_gradient(self):
        return self.l2 * self.get_flat_params()

    def _param_gradients(self, X, y):
        targets = self._targets(y)
        zs, acts, d1s, _ = self._forward(X)
        out = self._output_from_logits(zs[-1])
        deltas = self._backward(acts, d1s, self._output_delta(out, targets))
        cols = []
        for a, d in zip(acts, deltas):
            cols.append(np.einsum("ni,nj->nij", a, d).reshape(len(X), -1))
            cols.append(d)
        return np.hstack(cols)

    def _input_gradient(self, X, output_index):
        zs, acts, d1s, _ = self._forward(X)
        out = self._output_from_logits(zs[-1])
        if self.is_classifier:
            # d p_c / d z = p_c (e_c - p)
            seed = -out * out[:, [output_index]]
            seed[:, output_index] += out[:, output_index]
        else:
            seed = np.zeros_like(out)
            seed[:, output_index] = 1.0
        deltas = self._backward(acts, d1s, seed)
        return deltas[0] @ self._params[0].T

    def _hvp(self, X, y, v):
        targets = self._targets(y)
        n = len(X)
        Ws = self._params[0::2]
        Vs = self._unflatten(v)
        VW, Vb = Vs[0::2], Vs[1::2]
        zs, acts, d1s, d2s = self._forward(X)
        L = len(Ws)

        # forward R-pass: directional derivatives of pre-activations/activations
        Rz, Ra = [], [np.zeros_like(X)]
        for i in range(L):
            rz = Ra[i] @ Ws[i] + acts[i] @ VW[i] + Vb[i]
            Rz.append(rz)
            if i < L - 1:
                Ra.append(d1s[i] * rz)

        out = self._output_from_logits(zs[-1])
        delta = self._output_delta(out, targets) / n
        if self.is_classifier:
            r_out = out * (Rz[-1] - np.sum(out * Rz[-1], axis=1, keepdims=True))
        else:
            r_out = Rz[-1]
        Rdelta = r_out / n

        # backward R-pass
        grads_R = [None] * (2 * L)
        for i in range(L - 1, -1, -1):
            grads_R[2 * i] = Ra[i].T @ delta + acts[i].T @ Rdelta
            grads_R[2 * i + 1] = Rdelta.sum(axis=0)
            if i == 0:
                break
            e = delta @ Ws[i].T
            Re = Rdelta @ Ws[i].T + delta @ VW[i].T
            new_delta = e * d1s[i - 1]
            Rdelta = Re * d1s[i - 1] + e * d2s[i - 1] * Rz[i - 1]
            delta = new_delta
        Hv = np.concatenate([g.ravel() for g in grads_R])
        if self.l2:
            Hv = Hv + self.l2 * v
        return Hv
