"""Influence-weighted aggregation of neighbourhood attributions.

:class:`AVAExplainer` runs the whole pipeline for a fitted predictor:
influence of every training point on the test loss, rectification, top-k
neighbourhood, one attribution per neighbour, and the weighted consensus
``sum_j (rho_j / rho) g^j``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ava.attribution import integrated_gradients, shapley
from ava.influence import (InfluenceCalculator, Neighborhood, SolverConfig, make_weights,
                           select_neighborhood)
from ava.models.base import CapabilityError

logger = logging.getLogger(__name__)

METHODS = ("ava_shap", "ava_ig")
BASELINES = ("neighborhood", "zero", "mean")


def aggregate_weighted(attributions, weights) -> np.ndarray:
    """Return ``sum_j (w_j / sum(w)) g^j`` for non-negative weights."""
    rows = [np.asarray(g, dtype=float) for g in attributions]
    if len({r.shape for r in rows}) > 1:
        raise ValueError("attribution vectors must all have the same length")
    G = np.asarray(rows)
    w = np.asarray(weights, dtype=float)
    if G.ndim != 2:
        raise ValueError("attribution vectors must all have the same length")
    if len(w) != len(G) or len(G) == 0:
        raise ValueError("need one weight per attribution and at least one attribution")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights sum to zero")
    return (w / total) @ G


def check_convex_hull(values, per_point, atol=1e-12):
    """Each consensus coordinate must lie within the per-point range."""
    G = np.asarray(per_point, dtype=float)
    lo, hi = G.min(0), G.max(0)
    slack = atol * np.maximum(1.0, np.abs(G).max(0))
    if np.any(values < lo - slack) or np.any(values > hi + slack):
        raise AssertionError("consensus attribution left the convex hull of its inputs")


@dataclass
class ConsensusAttribution:
    values: np.ndarray
    method: str
    neighborhood: Neighborhood
    per_point: list
    normalized_weights: np.ndarray
    point_id: Optional[int] = None
    baseline: Optional[np.ndarray] = None
    output_index: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self, feature_names=None) -> dict:
        return {
            "point_id": self.point_id,
            "method": self.method,
            "consensus": self.values.tolist(),
            "feature_names": None if feature_names is None else list(feature_names),
            "output_index": self.output_index,
            "neighborhood": {
                "indices": self.neighborhood.indices.tolist(),
                "weights": self.neighborhood.weights.tolist(),
                "normalizer": self.neighborhood.normalizer,
                "uniform_fallback": self.neighborhood.uniform_fallback,
            },
            "normalized_weights": self.normalized_weights.tolist(),
            "baseline": None if self.baseline is None else np.asarray(self.baseline).tolist(),
            "per_point": [a.to_dict() for a in self.per_point],
            "config": self.config,
        }

    def to_json(self, feature_names=None) -> str:
        return json.dumps(self.to_dict(feature_names), indent=2)


class AVAExplainer(TransformerMixin, BaseEstimator):
    """Consensus attributions from a test point's most influential training points.

    Parameters
    ----------
    model : Predictor
        Fitted predictor to explain.
    method : {"ava_shap", "ava_ig"}
    k : int
        Neighbourhood size.
    influence_mode : {"abs", "clamp_positive", "signed_topk"}
        How signed influence values become non-negative weights.
    solver, damping, tol, max_iter :
        Inverse Hessian-vector product settings.
    zero_weight_fallback : {"uniform", "error"}
        What to do when every selected weight is zero.
    shap_exact_cap, shap_samples :
        Exact Shapley enumeration up to this many features, else permutation
        sampling with this many permutations.
    ig_steps : int
        Midpoint-rule nodes for integrated gradients.
    baseline : {"neighborhood", "zero", "mean"} or array
        IG baseline. ``"neighborhood"`` is the influence-weighted mean of the
        selected training points.
    target : {"predicted"} or int
        Output explained: the class predicted at the test point, or a fixed
        output column.
    influence_label : {"predicted", "true"}
        Label used for the test loss in the influence computation.
    include_test_point : bool
        Also aggregate the test point's own attribution, with the mean
        neighbourhood weight.
    seed : int
        Seed for sampled Shapley values.
    """

    def __init__(self, model=None, method="ava_shap", k=10, influence_mode="abs",
                 solver="cg", damping=0.01, tol=1e-6, max_iter=None,
                 zero_weight_fallback="uniform", shap_exact_cap=12, shap_samples=2000,
                 ig_steps=256, baseline="neighborhood", target="predicted",
                 influence_label="predicted", include_test_point=False, seed=0):
        self.model = model
        self.method = method
        self.k = k
        self.influence_mode = influence_mode
        self.solver = solver
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter
        self.zero_weight_fallback = zero_weight_fallback
        self.shap_exact_cap = shap_exact_cap
        self.shap_samples = shap_samples
        self.ig_steps = ig_steps
        self.baseline = baseline
        self.target = target
        self.influence_label = influence_label
        self.include_test_point = include_test_point
        self.seed = seed

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y):
        if self.model is None:
            raise ValueError("AVAExplainer needs a fitted model")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        check_is_fitted(self.model)
        X = check_array(X, dtype=float)
        if not 1 <= self.k <= len(X):
            raise ValueError(f"k must be in [1, {len(X)}]")
        self.X_train_ = X
        self.y_train_ = np.asarray(y)
        self.background_ = X.mean(0)
        self.influence_ = InfluenceCalculator(
            self.model, X, self.y_train_,
            SolverConfig(self.solver, self.damping, self.tol, self.max_iter))
        self.n_features_in_ = X.shape[1]
        return self

    # -- pipeline stages ---------------------------------------------------

    def output_index(self, x_test) -> int:
        if self.target != "predicted":
            return int(self.target)
        if not getattr(self.model, "is_classifier", True):
            return 0
        return int(np.argmax(self.model.predict_output(np.asarray(x_test)[None, :])[0]))

    def _loss_label(self, x_test, y_test):
        if self.influence_label == "true":
            if y_test is None:
                raise ValueError("influence_label='true' needs y_test")
            return y_test
        return self.model.predict(np.asarray(x_test)[None, :])[0]

    def influence_weights(self, x_test, y_test=None, point_id=None):
        check_is_fitted(self, "influence_")
        raw = self.influence_.all(np.asarray(x_test, dtype=float),
                                  self._loss_label(x_test, y_test))
        return make_weights(raw, self.influence_mode, point_id)

    def neighborhood(self, x_test, y_test=None, k=None, point_id=None) -> Neighborhood:
        w = self.influence_weights(x_test, y_test, point_id)
        return select_neighborhood(w, self.k if k is None else k, self.zero_weight_fallback)

    def _gradient_model(self):
        if self.model.has_input_gradient:
            return self.model
        if hasattr(self.model, "surrogate"):
            return self.model.surrogate()
        raise CapabilityError(f"{self.model.kind} has no input gradient and no surrogate")

    def resolve_baseline(self, hood: Neighborhood) -> np.ndarray:
        if isinstance(self.baseline, str):
            if self.baseline == "neighborhood":
                return hood.normalized @ self.X_train_[hood.indices]
            if self.baseline == "zero":
                return np.zeros(self.n_features_in_)
            if self.baseline == "mean":
                return self.background_.copy()
            raise ValueError(f"unknown baseline {self.baseline!r}; valid: {', '.join(BASELINES)}")
        b = np.asarray(self.baseline, dtype=float)
        if b.shape != (self.n_features_in_,):
            raise ValueError("baseline vector has the wrong length")
        return b

    def point_attributions(self, points, output_index, baseline=None, ids=None):
        """Attributions of ``output_index`` at each row of ``points``."""
        ids = [None] * len(points) if ids is None else ids
        if self.method == "ava_shap":
            return [shapley(self.model, x, self.background_, output_index,
                            self.shap_exact_cap, self.shap_samples, self.seed, pid)
                    for x, pid in zip(points, ids)]
        gm = self._gradient_model()
        return [integrated_gradients(gm, x, baseline, output_index, self.ig_steps, pid)
                for x, pid in zip(points, ids)]

    def consensus_from(self, x_test, hood: Neighborhood, point_id=None,
                       output_index=None) -> ConsensusAttribution:
        """Aggregate over a given neighbourhood (lets callers reuse influence rankings)."""
        out = self.output_index(x_test) if output_index is None else output_index
        baseline = self.resolve_baseline(hood) if self.method == "ava_ig" else None
        pts = self.X_train_[hood.indices]
        per_point = self.point_attributions(pts, out, baseline, [int(i) for i in hood.indices])
        weights = hood.weights
        if self.include_test_point:
            per_point.append(self.point_attributions(np.asarray(x_test)[None, :], out, baseline,
                                                     [point_id])[0])
            weights = np.append(weights, weights.mean())
        G = np.array([a.values for a in per_point])
        values = aggregate_weighted(G, weights)
        check_convex_hull(values, G)
        return ConsensusAttribution(
            values=values, method=self.method, neighborhood=hood, per_point=per_point,
            normalized_weights=weights / weights.sum(), point_id=point_id,
            baseline=baseline, output_index=out, config=self.get_config())

    def explain(self, x_test, y_test=None, point_id=None) -> ConsensusAttribution:
        check_is_fitted(self, "influence_")
        x_test = np.asarray(x_test, dtype=float)
        if x_test.shape != (self.n_features_in_,):
            raise ValueError(f"x_test must have shape ({self.n_features_in_},)")
        hood = self.neighborhood(x_test, y_test, point_id=point_id)
        return self.consensus_from(x_test, hood, point_id)

    def transform(self, X, y=None):
        X = check_array(X, dtype=float)
        ys = [None] * len(X) if y is None else list(y)
        return np.array([self.explain(x, yt, i).values for i, (x, yt) in enumerate(zip(X, ys))])

    def get_config(self) -> dict:
        params = self.get_params(deep=False)
        params.pop("model")
        if not isinstance(params["baseline"], str):
            params["baseline"] = np.asarray(params["baseline"]).tolist()
        params["model_kind"] = getattr(self.model, "kind", None)
        return params


def ava_shap(model, x_test, X_train, y_train, k=10, y_test=None, **config):
    return AVAExplainer(model, "ava_shap", k, **config).fit(X_train, y_train).explain(
        x_test, y_test)


def ava_ig(model, x_test, X_train, y_train, k=10, y_test=None, **config):
    return AVAExplainer(model, "ava_ig", k, **config).fit(X_train, y_train).explain(
        x_test, y_test)
