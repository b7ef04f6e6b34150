"""Per-point feature attributions: Shapley values, Harsanyi dividends, IG.

Games are represented by a batched value function ``v(masks)`` taking a
boolean array of shape ``(m, d)`` (one coalition per row) and returning
``m`` values. :class:`CoalitionValueFn` builds such a game from a predictor
by substituting absent features with a background vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Callable, Optional

import numpy as np

from ava.models.base import CapabilityError

MAX_EXACT_FEATURES = 20

ValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class Attribution:
    values: np.ndarray
    method: str
    point_id: Optional[int] = None
    reference: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution contains non-finite values")

    def to_dict(self, feature_names=None) -> dict:
        d = {
            "point_id": self.point_id,
            "method": self.method,
            "values": self.values.tolist(),
            "reference": None if self.reference is None else np.asarray(self.reference).tolist(),
            "metadata": self.metadata,
        }
        if feature_names is not None:
            d["feature_names"] = list(feature_names)
        return d


class CoalitionValueFn:
    """Model output when only the features in a coalition take their values from ``x``.

    ``v(S) = f(z)[output_index]`` with ``z_i = x_i`` for ``i`` in ``S`` and
    ``z_i = background_i`` otherwise.
    """

    def __init__(self, predictor, x, background, output_index: int = 0):
        self.predictor = predictor
        self.x = np.asarray(x, dtype=float)
        self.background = np.asarray(background, dtype=float)
        if self.x.shape != self.background.shape:
            raise ValueError("x and background must have the same shape")
        self.output_index = output_index

    @property
    def n_players(self) -> int:
        return self.x.size

    def __call__(self, masks) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        Z = np.where(masks, self.x, self.background)
        return self.predictor.predict_output(Z)[:, self.output_index]


def all_masks(d: int) -> np.ndarray:
    """Every coalition of ``d`` players; row ``s`` is the bit pattern of integer ``s``."""
    codes = np.arange(1 << d, dtype=np.int64)
    return ((codes[:, None] >> np.arange(d)) & 1).astype(bool)


def _check_cap(d, cap=MAX_EXACT_FEATURES):
    if d > cap:
        raise ValueError(
            f"exact enumeration is capped at {cap} features (got {d}); "
            "use shapley_sampled instead"
        )


def shapley_values_exact(v: ValueFn, d: int) -> np.ndarray:
    """Exact Shapley values by enumerating all ``2^d`` coalitions (each evaluated once)."""
    _check_cap(d)
    masks = all_masks(d)
    vals = np.asarray(v(masks), dtype=float)
    sizes = masks.sum(1)
    w = np.array([factorial(s) * factorial(d - s - 1) / factorial(d) for s in range(d)])
    codes = np.arange(1 << d)
    phi = np.empty(d)
    for i in range(d):
        without = codes[~masks[:, i]]
        with_i = without | (1 << i)
        phi[i] = np.sum(w[sizes[without]] * (vals[with_i] - vals[without]))
    return phi


def shapley_values_sampled(v: ValueFn, d: int, n_samples: int, rng) -> tuple:
    """Permutation-sampling estimate of Shapley values.

    Each sampled permutation adds players one at a time and credits each with
    its marginal contribution, giving an unbiased estimate for every player.
    Returns ``(estimate, standard_error)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    contrib = np.empty((n_samples, d))
    chunk = max(1, 4096 // (d + 1))
    for start in range(0, n_samples, chunk):
        stop = min(n_samples, start + chunk)
        perms = rng.permuted(np.tile(np.arange(d), (stop - start, 1)), axis=1)
        masks = np.zeros((stop - start, d + 1, d), dtype=bool)
        for pos in range(d):
            masks[np.arange(stop - start), pos + 1:, perms[:, pos]] = True
        vals = np.asarray(v(masks.reshape(-1, d)), dtype=float).reshape(stop - start, d + 1)
        marg = np.diff(vals, axis=1)
        contrib[np.arange(start, stop)[:, None], perms] = marg
    est = contrib.mean(0)
    se = contrib.std(0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.full(d, np.nan)
    return est, se


def harsanyi_dividend(v: ValueFn, S, d: Optional[int] = None) -> float:
    """Moebius transform of ``v`` at coalition ``S``: ``sum_{T <= S} (-1)^{|S \\ T|} v(T)``.

    ``d`` (number of players) defaults to ``v.n_players``.
    """
    S = sorted(set(int(i) for i in S))
    k = len(S)
    _check_cap(k)
    d = getattr(v, "n_players", None) if d is None else d
    if d is None:
        raise ValueError("number of players unknown; pass d")
    sub = all_masks(k)
    masks = np.zeros((len(sub), d), dtype=bool)
    if k:
        masks[:, S] = sub
    vals = np.asarray(v(masks), dtype=float)
    signs = np.where((k - sub.sum(1)) % 2 == 0, 1.0, -1.0)
    return float(signs @ vals)


def harsanyi_dividends(v: ValueFn, d: int) -> np.ndarray:
    """All ``2^d`` dividends, indexed by coalition bit pattern (fast Moebius transform)."""
    _check_cap(d)
    D = np.asarray(v(all_masks(d)), dtype=float).copy()
    codes = np.arange(1 << d)
    for i in range(d):
        has = (codes >> i) & 1 == 1
        D[has] -= D[codes[has] ^ (1 << i)]
    return D


def shapley_from_dividends(D: np.ndarray, d: int) -> np.ndarray:
    """``phi_i = sum_{S containing i} D(S) / |S|``."""
    masks = all_masks(d)
    sizes = masks.sum(1)
    share = np.zeros_like(D)
    share[sizes > 0] = D[sizes > 0] / sizes[sizes > 0]
    return masks.T.astype(float) @ share


# -- predictor-facing entry points ---------------------------------------------

def shapley_exact(p, x, background, output_index: int = 0, point_id=None) -> Attribution:
    game = CoalitionValueFn(p, x, background, output_index)
    phi = shapley_values_exact(game, game.n_players)
    return Attribution(phi, "shap_exact", point_id, game.background,
                       {"n_evaluations": 1 << game.n_players, "output_index": output_index})


def point_rng(seed: int, point_id=None) -> np.random.Generator:
    """Independent stream per (seed, point) pair."""
    key = [int(seed)] if point_id is None else [int(seed), int(point_id)]
    return np.random.default_rng(np.random.SeedSequence(key))


def shapley_sampled(p, x, background, output_index: int = 0, n_samples: int = 2000,
                    seed: int = 0, point_id=None) -> Attribution:
    game = CoalitionValueFn(p, x, background, output_index)
    est, se = shapley_values_sampled(game, game.n_players, n_samples, point_rng(seed, point_id))
    return Attribution(est, "shap_sampled", point_id, game.background,
                       {"n_samples": n_samples, "seed": seed, "stderr": se.tolist(),
                        "output_index": output_index})


def shapley(p, x, background, output_index=0, exact_cap=12, n_samples=2000, seed=0,
            point_id=None) -> Attribution:
    """Exact Shapley values when ``d <= exact_cap``, otherwise permutation sampling."""
    if np.asarray(x).size <= exact_cap:
        return shapley_exact(p, x, background, output_index, point_id)
    return shapley_sampled(p, x, background, output_index, n_samples, seed, point_id)


def integrated_gradients(p, x, baseline, output_index: int = 0, steps: int = 256,
                         point_id=None) -> Attribution:
    """Integrated gradients along the straight path from ``baseline`` to ``x``.

    The path integral uses the midpoint rule with nodes ``(t - 1/2) / steps``.
    ``metadata["completeness_residual"]`` holds
    ``|sum(g) - (f(x) - f(baseline))|``.
    """
    if not getattr(p, "has_input_gradient", False):
        raise CapabilityError(f"{getattr(p, 'kind', type(p).__name__)} has no input gradient")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = baseline + alphas[:, None] * (x - baseline)
    grads = p.input_gradient(path, output_index)
    g = (x - baseline) * grads.mean(0)
    ends = p.predict_output(np.vstack([x, baseline]))[:, output_index]
    residual = float(abs(g.sum() - (ends[0] - ends[1])))
    return Attribution(g, "ig", point_id, baseline,
                       {"steps": steps, "completeness_residual": residual,
                        "output_index": output_index})
