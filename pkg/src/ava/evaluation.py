"""Gold-set recall, random baseline, k-sensitivity and mean feature importance."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import KFold, StratifiedKFold

from ava.aggregation import AVAExplainer
from ava.attribution import integrated_gradients, point_rng, shapley
from ava.models import DecisionTreeClassifier, build_model

logger = logging.getLogger(__name__)

ALL_METHODS = ("random", "shap", "ig", "ava_shap", "ava_ig")
# opt-in: AVA-IG with the same fixed baseline as plain IG instead of the neighbourhood mean
EXTRA_METHODS = ("ava_ig_fixed",)


@dataclass(frozen=True)
class GoldSet:
    features: tuple
    m: int
    source: str = "decision_tree"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if len(self.features) > self.m:
            raise ValueError("gold set larger than m")


def gold_set(X, y, m: int) -> GoldSet:
    """Features used by a Gini tree pruned to at most ``m`` features."""
    tree = DecisionTreeClassifier(max_used_features=m).fit(X, y)
    if not tree.used_features_:
        raise ValueError("pruned tree has no splits; gold set would be empty")
    return GoldSet(tuple(int(f) for f in tree.used_features_), m,
                   f"decision_tree(max_used_features={m}, n_nodes={len(tree.feature_)})")


def select_m(X, y, m_candidates: Sequence[int], folds: int = 5, seed: int = 0) -> int:
    """Feature budget with the best mean cross-validated tree accuracy; ties -> smallest."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    cands = sorted(set(int(m) for m in m_candidates))
    if len(cands) == 1:
        return cands[0]
    X, y = np.asarray(X, dtype=float), np.asarray(y)
    _, counts = np.unique(y, return_counts=True)
    if counts.min() >= folds:
        splitter = StratifiedKFold(folds, shuffle=True, random_state=seed)
    else:
        splitter = KFold(folds, shuffle=True, random_state=seed)
    splits = list(splitter.split(X, y))
    best, best_acc = cands[0], -np.inf
    for m in cands:
        accs = []
        for tr, te in splits:
            tree = DecisionTreeClassifier(max_used_features=m).fit(X[tr], y[tr])
            accs.append(np.mean(tree.predict(X[te]) == y[te]))
        acc = float(np.mean(accs))
        if acc > best_acc + 1e-12:
            best, best_acc = m, acc
    return best


def top_m(g, m: int) -> np.ndarray:
    """Indices of the ``m`` largest ``|g|``, ties to the lower index."""
    return np.argsort(-np.abs(np.asarray(g, dtype=float)), kind="stable")[:m]


def recall_at_gold(g, gold: GoldSet) -> float:
    hits = len(set(top_m(g, gold.m).tolist()) & set(gold.features))
    return hits / len(gold.features)


def random_recalls(d: int, gold: GoldSet, n_trials: int, seed=0) -> np.ndarray:
    """Per-trial recall of uniformly random ``m``-subsets; ``seed`` may be a Generator."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if gold.m > d:
        raise ValueError("m must not exceed d")
    rng = np.random.default_rng(seed)
    gold_mask = np.zeros(d, dtype=bool)
    gold_mask[list(gold.features)] = True
    picks = np.argsort(rng.random((n_trials, d)), axis=1)[:, :gold.m]
    return gold_mask[picks].sum(1) / len(gold.features)


def random_baseline(d: int, m: int, n_trials: int = 1000, seed: int = 0,
                    gold: Optional[GoldSet] = None) -> float:
    """Mean recall of uniformly random ``m``-subsets; by symmetry any size-``m`` gold set works."""
    gold = GoldSet(tuple(range(m)), m) if gold is None else gold
    return float(random_recalls(d, gold, n_trials, seed).mean())


def mean_feature_importance(g, m: int) -> float:
    """Mean L1-normalized importance of the top-``m`` features (in ``[1/d, 1/m]``).

    Evaluated in exact rational arithmetic and rounded once, so the bounds and
    the boundary cases (uniform -> 1/d, equal mass on m features -> 1/m) hold
    without floating-point slack.
    """
    a = np.abs(np.asarray(g, dtype=float))
    if not np.all(np.isfinite(a)):
        raise ValueError("attribution contains non-finite values")
    if not np.any(a):
        raise ValueError("mean feature importance undefined for an all-zero attribution")
    if not 1 <= m <= len(a):
        raise ValueError("m must be in [1, d]")
    exact = [Fraction(float(v)) for v in np.sort(a)[::-1]]
    return float(sum(exact[:m]) / (m * sum(exact)))


# -- benchmark ----------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    k_curves: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def summary(self) -> list:
        """Rows averaged over seeds, keyed by (dataset, model, method)."""
        groups = {}
        for r in self.rows:
            if r.get("error"):
                continue
            groups.setdefault((r["dataset"], r["model"], r["method"]), []).append(r)
        out = []
        for (ds, model, method), rs in sorted(groups.items(),
                                              key=lambda kv: (kv[0][0], kv[0][1],
                                                              _method_order(kv[0][2]))):
            rec = np.array([r["recall"] for r in rs])
            mfis = [r["mfi"] for r in rs if r["mfi"] is not None]
            out.append({
                "dataset": ds, "model": model, "method": method, "n_seeds": len(rs),
                "recall": float(rec.mean()), "recall_std": float(rec.std()),
                "mfi": float(np.mean(mfis)) if mfis else None,
            })
        return out

    def table(self, model: str) -> dict:
        """``{dataset: {method: recall}}`` for one model: datasets as rows, methods as columns."""
        t = {}
        for r in self.summary():
            if r["model"] == model:
                t.setdefault(r["dataset"], {})[r["method"]] = r["recall"]
        return t

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r.get("error")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["dataset", "model", "seed", "method", "recall", "mfi", "m", "d", "n_test",
                "gold", "error"]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "gold": " ".join(map(str, r.get("gold") or ()))})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": self.rows, "summary": self.summary(),
                           "k_curves": self.k_curves}, indent=2, sort_keys=True)

    def k_curve_tsv(self) -> str:
        lines = ["dataset\tmodel\tseed\tmethod\tk\trecall"]
        for c in self.k_curves:
            for method, series in c["curves"].items():
                for k, rec in zip(c["k_values"], series):
                    lines.append(f"{c['dataset']}\t{c['model']}\t{c['seed']}\t{method}\t{k}\t{rec!r}")
        return "\n".join(lines) + "\n"

    def mfi_tsv(self) -> str:
        lines = ["dataset\tmodel\tmethod\tmfi"]
        for r in self.summary():
            if r["mfi"] is not None:
                lines.append(f"{r['dataset']}\t{r['model']}\t{r['method']}\t{r['mfi']!r}")
        return "\n".join(lines) + "\n"


def _method_order(method):
    order = ALL_METHODS + EXTRA_METHODS
    return order.index(method) if method in order else len(order)


@dataclass
class CellResult:
    rows: list
    curve: Optional[dict] = None


class PointExplainer:
    """All per-point explanations for one trained model on one split."""

    def __init__(self, model, X_train, y_train, k=10, ig_steps=256, ig_baseline="zero",
                 ava_ig_baseline="neighborhood", explainer_params=None, seed=0):
        self.model = model
        self.X_train = X_train
        self.seed = seed
        params = dict(explainer_params or {})
        params.setdefault("ig_steps", ig_steps)
        self.ava = AVAExplainer(model, "ava_shap", k, seed=seed, **params).fit(X_train, y_train)
        self.ava_ig = AVAExplainer(model, "ava_ig", k, seed=seed, baseline=ava_ig_baseline,
                                   **params)
        self.ava_ig.fit(X_train, y_train)
        # share the influence cache between the two methods
        self.ava_ig.influence_ = self.ava.influence_
        self.ig_steps = ig_steps
        self.ig_baseline = ig_baseline
        self.ava_ig_fixed = AVAExplainer(model, "ava_ig", k, seed=seed,
                                         baseline=self._ig_reference(), **params)
        self.ava_ig_fixed.fit(X_train, y_train)
        self.ava_ig_fixed.influence_ = self.ava.influence_

    def _ig_reference(self):
        if isinstance(self.ig_baseline, str):
            return np.zeros(self.X_train.shape[1]) if self.ig_baseline == "zero" \
                else self.X_train.mean(0)
        return np.asarray(self.ig_baseline, dtype=float)

    def attributions(self, x, methods, k=None, point_id=None, y_test=None):
        out_idx = self.ava.output_index(x)
        res = {}
        if "shap" in methods:
            res["shap"] = shapley(self.model, x, self.ava.background_, out_idx,
                                  self.ava.shap_exact_cap, self.ava.shap_samples, self.seed,
                                  point_id).values
        if "ig" in methods:
            res["ig"] = integrated_gradients(self.ava._gradient_model(), x, self._ig_reference(),
                                             out_idx, self.ig_steps, point_id).values
        ava = {"ava_shap": self.ava, "ava_ig": self.ava_ig, "ava_ig_fixed": self.ava_ig_fixed}
        wanted = [m for m in ava if m in methods]
        if wanted:
            hood = self.ava.neighborhood(x, y_test, k=k, point_id=point_id)
            for m in wanted:
                res[m] = ava[m].consensus_from(x, hood, point_id, out_idx).values
        return res


def load_dataset(spec: dict):
    from ava import data as D

    if spec.get("builtin"):
        name = spec["builtin"]
        if name not in D.BUILTIN_DATASETS:
            raise ValueError(f"unknown builtin dataset {name!r}")
        return D.BUILTIN_DATASETS[name](**spec.get("options", {}))
    return D.load_csv(spec["path"], spec["label_column"], spec.get("header", True))


def run_cell(dataset_spec: dict, model_spec: dict, seed: int, cfg: dict) -> CellResult:
    """Evaluate every method for one (dataset, model, seed) combination."""
    from ava import data as D

    name = dataset_spec.get("name") or dataset_spec.get("builtin") or dataset_spec.get("path")
    label = model_spec.get("name") or model_spec["kind"]
    methods = cfg.get("methods", ALL_METHODS)
    try:
        raw = load_dataset(dataset_spec)
        sp = D.prepare(raw, dataset_spec.get("categorical", ()),
                       cfg.get("test_fraction", 0.33), seed)
        Xtr, ytr, Xte, yte = sp.train.X, sp.train.y, sp.test.X, sp.test.y
        d = Xtr.shape[1]
        m = cfg.get("m")
        if m is None:
            cands = cfg.get("m_candidates") or list(range(1, min(d, 8) + 1))
            m = select_m(Xtr, ytr, cands, cfg.get("cv_folds", 5), seed)
        gold = gold_set(Xtr, ytr, m)
        params = {k: v for k, v in model_spec.items() if k not in ("kind", "name")}
        if model_spec["kind"] == "mlp":
            params.setdefault("seed", seed)
        model = build_model(model_spec["kind"], **params).fit(Xtr, ytr)
        px = PointExplainer(model, Xtr, ytr, cfg.get("k", 10), cfg.get("ig_steps", 256),
                            cfg.get("ig_baseline", "zero"), cfg.get("ava_ig_baseline", "neighborhood"),
                            cfg.get("explainer", {}), seed)
        n_test = min(len(Xte), cfg.get("max_test_points") or len(Xte))
        recalls = {mth: [] for mth in methods}
        mfis = {mth: [] for mth in methods if mth != "random"}
        for i in range(n_test):
            if "random" in methods:
                trials = random_recalls(d, gold, cfg.get("n_trials", 1000), point_rng(seed, i))
                recalls["random"].append(float(trials.mean()))
            for mth, g in px.attributions(Xte[i], methods, point_id=i, y_test=yte[i]).items():
                recalls[mth].append(recall_at_gold(g, gold))
                if np.any(g != 0):
                    mfis[mth].append(mean_feature_importance(g, gold.m))
        rows = []
        for mth in methods:
            mf = mfis.get(mth)
            rows.append({
                "dataset": name, "model": label, "seed": seed, "method": mth,
                "recall": 100.0 * float(np.mean(recalls[mth])),
                "mfi": float(np.mean(mf)) if mf else None,
                "m": int(gold.m), "d": int(d), "n_test": int(n_test),
                "gold": [int(f) for f in gold.features], "error": None,
            })
        curve = None
        if cfg.get("k_values"):
            curve = k_sweep(px, Xte[:n_test], gold, cfg["k_values"], y_test=yte[:n_test])
            curve.update({"dataset": name, "model": label, "seed": seed})
        return CellResult(rows, curve)
    except Exception as exc:  # noqa: BLE001 - per-cell failures are recorded
        logger.exception("cell %s/%s/seed=%s failed", name, label, seed)
        return CellResult([{"dataset": name, "model": label, "seed": seed, "method": "*",
                            "recall": None, "mfi": None, "m": None, "d": None, "n_test": None,
                            "gold": None, "error": f"{type(exc).__name__}: {exc}"}])


def k_sweep(px: PointExplainer, X_test, gold: GoldSet, k_values, methods=("ava_shap", "ava_ig"),
            y_test=None):
    """Mean recall (percent) per k; influence rankings are computed once at max k."""
    k_values = sorted(set(int(k) for k in k_values))
    kmax = k_values[-1]
    if kmax > len(px.X_train):
        raise ValueError("k exceeds the number of training points")
    curves = {m: [] for m in methods}
    per_k = {m: {k: [] for k in k_values} for m in methods}
    ys = [None] * len(X_test) if y_test is None else list(y_test)
    for i, (x, yt) in enumerate(zip(X_test, ys)):
        out_idx = px.ava.output_index(x)
        hood = px.ava.neighborhood(x, yt, k=kmax, point_id=i)
        shap_cache = None
        if "ava_shap" in methods:
            shap_cache = px.ava.consensus_from(x, hood, i, out_idx).per_point
        for k in k_values:
            sub = hood.truncate(k)
            if "ava_shap" in methods:
                G = np.array([a.values for a in shap_cache[:k]])
                g = (sub.weights / sub.weights.sum()) @ G
                per_k["ava_shap"][k].append(recall_at_gold(g, gold))
            if "ava_ig" in methods:
                g = px.ava_ig.consensus_from(x, sub, i, out_idx).values
                per_k["ava_ig"][k].append(recall_at_gold(g, gold))
    for m in methods:
        curves[m] = [100.0 * float(np.mean(per_k[m][k])) for k in k_values]
    return {"k_values": k_values, "curves": curves}


def run_benchmark(datasets, models, methods=ALL_METHODS, seeds=(0,), config=None,
                  n_jobs: int = 1) -> EvalReport:
    """Evaluate the full (dataset x model x seed) grid.

    ``config`` keys: ``k``, ``m`` (fixed budget) or ``m_candidates``/``cv_folds``,
    ``test_fraction``, ``ig_steps``, ``ig_baseline``, ``ava_ig_baseline``,
    ``max_test_points``, ``k_values`` (enables the k-sweep), ``n_trials`` (random
    draws per test point), ``explainer`` (extra :class:`AVAExplainer` parameters).
    """
    methods = tuple(methods)
    if not methods:
        raise ValueError("no methods requested")
    unknown = set(methods) - set(ALL_METHODS + EXTRA_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    cfg = dict(config or {})
    cfg["methods"] = methods
    jobs = [(ds, md, s) for ds in datasets for md in models for s in seeds]
    results = Parallel(n_jobs=n_jobs)(delayed(run_cell)(ds, md, s, cfg) for ds, md, s in jobs)
    report = EvalReport(config={"datasets": list(datasets), "models": list(models),
                                "seeds": list(seeds), **cfg, "methods": list(methods)})
    for res in results:
        report.rows.extend(res.rows)
        if res.curve:
            report.k_curves.append(res.curve)
    return report
