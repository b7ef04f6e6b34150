"""Influence of training points on a test loss, and neighbourhood selection.

For a predictor with parameter gradients and Hessian-vector products the
upweighting influence of training point ``j`` on the loss at a test point is

    I(j) = -grad L(x_test)^T (H + damping I)^{-1} grad L(x_j)

with H the Hessian of the mean training loss. The inverse-Hessian product
with the test gradient depends only on the test point, so it is solved once
and reused for every ``j``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import clone

from ava.models.base import CapabilityError

logger = logging.getLogger(__name__)

MODES = ("abs", "clamp_positive", "signed_topk")


class InfluenceError(RuntimeError):
    """Solver failure or an unusable set of influence weights."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "cg"
    damping: float = 0.01
    tol: float = 1e-6
    max_iter: Optional[int] = None
    exact_cap: int = 2000

    def __post_init__(self):
        if self.method not in ("cg", "exact"):
            raise ValueError(f"unknown inverse-HVP method {self.method!r}")
        if self.damping < 0 or self.tol <= 0:
            raise ValueError("damping must be >= 0 and tol > 0")


@dataclass
class SolveResult:
    x: np.ndarray
    n_iter: int
    residual: float


def conjugate_gradient(matvec, b, tol=1e-6, max_iter=None) -> SolveResult:
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as a matvec.

    Stops when ``||A x - b|| <= tol * ||b||``. Raises :class:`InfluenceError`
    on non-positive curvature or when ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=float)
    max_iter = 10 * b.size if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return SolveResult(x, 0, 0.0)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        curv = p @ Ap
        if curv <= 0:
            raise InfluenceError(
                f"non-positive curvature in CG at iteration {it}; increase damping"
            )
        alpha = rs / curv
        x += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= tol * bnorm:
            # confirm against the true residual; recurrence drift is possible
            true_res = np.linalg.norm(matvec(x) - b)
            if true_res <= tol * bnorm:
                return SolveResult(x, it, true_res / bnorm)
            r = b - matvec(x)
            rs_new = r @ r
            p = r.copy()
            rs = rs_new
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise InfluenceError(f"CG did not converge in {max_iter} iterations")


def explicit_hessian(model, X, y, damping=0.0) -> np.ndarray:
    """Materialize ``H + damping I`` column by column from Hessian-vector products."""
    p = model.n_params_
    H = np.empty((p, p))
    e = np.zeros(p)
    for i in range(p):
        e[i] = 1.0
        H[:, i] = model.hvp(X, y, e, damping)
        e[i] = 0.0
    return 0.5 * (H + H.T)


def inverse_hvp(model, X, y, b, method="cg", damping=0.01, tol=1e-6, max_iter=None,
                exact_cap=2000) -> np.ndarray:
    """Return ``v`` with ``(H + damping I) v = b`` to relative residual ``tol``."""
    return _inverse_hvp(model, X, y, b, SolverConfig(method, damping, tol, max_iter,
                                                      exact_cap)).x


def _inverse_hvp(model, X, y, b, cfg: SolverConfig, hessian=None) -> SolveResult:
    if not model.has_hvp:
        raise CapabilityError(f"{model.kind} predictor does not provide Hessian-vector products")
    b = np.asarray(b, dtype=float)
    if cfg.method == "exact":
        p = model.n_params_
        if p > cfg.exact_cap:
            raise InfluenceError(f"exact solve capped at {cfg.exact_cap} parameters (p={p})")
        H = explicit_hessian(model, X, y, cfg.damping) if hessian is None else hessian
        try:
            x = np.linalg.solve(H, b)
        except np.linalg.LinAlgError as exc:
            raise InfluenceError("H + damping I is singular") from exc
        if not np.all(np.isfinite(x)) or np.linalg.cond(H) > 1e14:
            raise InfluenceError("H + damping I is numerically singular")
        bn = np.linalg.norm(b)
        res = np.linalg.norm(H @ x - b) / bn if bn else 0.0
        return SolveResult(x, 0, res)
    return conjugate_gradient(lambda v: model.hvp(X, y, v, cfg.damping), b,
                              cfg.tol, cfg.max_iter)


class InfluenceCalculator:
    """Influence values of every training point for one model and training set.

    The test-side solve ``(H + damping I)^{-1} grad L(x_test)`` is cached per
    test point; per-example training gradients are computed once.
    Predictors without Hessian products but with a ``direct_influence``
    method (the k-NN family) use that instead.
    """

    def __init__(self, model, X, y, solver: SolverConfig = SolverConfig()):
        self.model = model
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y)
        self.solver = solver
        self._cache = {}
        self._train_grads = None
        self._hessian = None
        if not model.has_hvp and not hasattr(model, "direct_influence"):
            raise CapabilityError(
                f"{model.kind} predictor supports neither Hessian products nor a surrogate"
            )

    @property
    def train_gradients(self) -> np.ndarray:
        if self._train_grads is None:
            self._train_grads = self.model.param_gradients(self.X, self.y)
        return self._train_grads

    def _key(self, x_test, y_test):
        return (np.asarray(x_test, dtype=float).tobytes(), np.asarray(y_test).item())

    def test_solve(self, x_test, y_test) -> np.ndarray:
        key = self._key(x_test, y_test)
        if key not in self._cache:
            g = self.model.param_gradients(np.asarray(x_test, dtype=float)[None, :],
                                           np.asarray([y_test]))[0]
            if self.solver.method == "exact" and self._hessian is None:
                self._hessian = explicit_hessian(self.model, self.X, self.y,
                                                 self.solver.damping)
            res = _inverse_hvp(self.model, self.X, self.y, g, self.solver, self._hessian)
            self._cache[key] = res.x
        return self._cache[key]

    def influence(self, j: int, x_test, y_test) -> float:
        if not self.model.has_hvp:
            return float(self.all(x_test, y_test)[j])
        s = self.test_solve(x_test, y_test)
        return float(-(self.train_gradients[j] @ s))

    def all(self, x_test, y_test) -> np.ndarray:
        if not self.model.has_hvp:
            return np.asarray(self.model.direct_influence(x_test, y_test), dtype=float)
        s = self.test_solve(x_test, y_test)
        # row-wise dots keep each value bitwise equal to influence(j)
        return np.array([-(g @ s) for g in self.train_gradients])


def influence_up_loss(model, X, y, j, x_test, y_test, solver: SolverConfig = SolverConfig()):
    """Upweighting influence of training point ``j`` on the loss at ``(x_test, y_test)``."""
    return InfluenceCalculator(model, X, y, solver).influence(j, x_test, y_test)


# -- weights and neighbourhoods ----------------------------------------------

@dataclass
class InfluenceWeights:
    raw: np.ndarray
    rectified: np.ndarray
    mode: str
    test_point_id: Optional[int] = None

    def __post_init__(self):
        if np.any(self.rectified < 0):
            raise ValueError("rectified influence weights must be non-negative")


@dataclass
class Neighborhood:
    indices: np.ndarray
    weights: np.ndarray
    normalizer: float
    uniform_fallback: bool = False

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.normalizer

    def truncate(self, k: int) -> "Neighborhood":
        idx, w = self.indices[:k], self.weights[:k]
        total = float(w.sum())
        if self.uniform_fallback or total == 0:
            return Neighborhood(idx, np.ones(k), float(k), True)
        return Neighborhood(idx, w, total)


def rectify_weights(raw, mode: str = "abs") -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw influence contains non-finite values")
    if mode == "abs":
        return np.abs(raw)
    if mode in ("clamp_positive", "signed_topk"):
        return np.maximum(raw, 0.0)
    raise ValueError(f"unknown rectification mode {mode!r}; valid: {', '.join(MODES)}")


def make_weights(raw, mode="abs", test_point_id=None) -> InfluenceWeights:
    return InfluenceWeights(np.asarray(raw, dtype=float), rectify_weights(raw, mode), mode,
                            test_point_id)


def _top_k(score, k):
    # stable sort on -score: equal scores keep ascending index order
    return np.argsort(-score, kind="stable")[:k]


def select_neighborhood(weights: InfluenceWeights, k: int,
                        zero_fallback: str = "uniform") -> Neighborhood:
    """Top-``k`` training points by rectified weight, ties to the lower index.

    With ``signed_topk`` the selection uses the signed raw values and the
    selected weights are clamped afterwards. If all selected weights are zero
    the behaviour follows ``zero_fallback``: ``"uniform"`` assigns equal
    weights, ``"error"`` raises :class:`InfluenceError`.
    """
    n = len(weights.rectified)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    score = weights.raw if weights.mode == "signed_topk" else weights.rectified
    idx = _top_k(score, k)
    w = weights.rectified[idx]
    total = float(w.sum())
    if total > 0:
        return Neighborhood(idx, w, total)
    if zero_fallback == "uniform":
        logger.warning("all %d selected influence weights are zero; using uniform weights", k)
        return Neighborhood(idx, np.ones(k), float(k), uniform_fallback=True)
    raise InfluenceError(
        "selected influence weights sum to zero; use uniform weights or a larger k"
    )


# -- leave-one-out oracle ----------------------------------------------------

def loo_influence_oracle(estimator, X, y, j, x_test, y_test) -> float:
    """Actual change in test loss from deleting training point ``j`` and refitting.

    ``estimator`` is an unfitted template; it is cloned and fitted on the full
    data and on the data without ``j``. Returns ``L(f_{-j}) - L(f)``.
    """
    X, y = np.asarray(X, dtype=float), np.asarray(y)
    full = clone(estimator).fit(X, y)
    keep = np.arange(len(X)) != j
    loo = clone(estimator).fit(X[keep], y[keep])
    xt, yt = np.asarray(x_test, dtype=float)[None, :], np.asarray([y_test])
    return float(_data_loss(loo, xt, yt) - _data_loss(full, xt, yt))


def _data_loss(model, X, y):
    # regularization share is the same constant for both fits' test term only if
    # excluded, so compare the unpenalized data loss
    out = model.predict_output(X)
    if model.is_classifier:
        idx = model._label_index(y)
        return -np.log(out[np.arange(len(y)), idx]).mean()
    return ((out[:, 0] - y) ** 2).mean()


# -- audit dumps -------------------------------------------------------------

@dataclass
class InfluenceDump:
    rows: list = field(default_factory=list)

    def add(self, test_id, weights: InfluenceWeights, hood: Neighborhood):
        chosen = set(int(i) for i in hood.indices)
        for j, (r, w) in enumerate(zip(weights.raw, weights.rectified)):
            self.rows.append((test_id, j, float(r), float(w), int(j in chosen)))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["test_id", "train_id", "raw_influence", "rectified_weight",
                          "selected_flag"])
            for row in self.rows:
                out.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4]])
