"""Command-line interface: ``train``, ``explain``, ``benchmark``, ``sweep-k``.

Every command reads an optional JSON run configuration (``--config``); flags
override config keys. The output directory can also come from ``AVA_OUTPUT_DIR``
(flag > environment > config). Each artifact embeds the resolved config.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ava import data as D
from ava.aggregation import AVAExplainer
from ava.attribution import integrated_gradients, shapley
from ava.evaluation import ALL_METHODS, EXTRA_METHODS, load_dataset, run_benchmark
from ava.models import build_model, checkpoint
from ava.models.base import CapabilityError

logger = logging.getLogger("ava")

CONFIG_VERSION = 1
OUTPUT_ENV = "AVA_OUTPUT_DIR"
EXPLAIN_METHODS = ("ava_shap", "ava_ig", "shap", "ig")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "dataset": {"builtin": "iris", "path": None, "label_column": None, "categorical": [],
                "header": True, "name": None, "options": {}},
    "model": {"kind": "mlp", "learning_rate": 1e-2, "epochs": 500},
    "split": {"test_fraction": 0.33, "seed": 0},
    "influence": {"k": 10, "mode": "abs", "solver": "cg", "damping": 0.01, "tol": 1e-6,
                  "max_iter": None, "label": "predicted", "zero_weight_fallback": "uniform"},
    "attribution": {"method": "ava_shap", "ig_steps": 256, "shap_samples": 2000,
                    "shap_exact_cap": 12, "ava_ig_baseline": "neighborhood",
                    "ig_baseline": "zero", "target": "predicted"},
    "evaluation": {"methods": list(ALL_METHODS), "seeds": [0, 1, 2, 3, 4], "m": None,
                   "m_candidates": None, "cv_folds": 5, "n_trials": 1000,
                   "max_test_points": None, "k_values": None, "datasets": None,
                   "models": None},
    "output_dir": "ava_out",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        # model hyperparameters are open-ended; build_model validates them
        if isinstance(base[key], dict) and where not in ("model", "dataset.options"):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        elif where == "model":
            if not isinstance(val, dict) or "kind" not in val:
                raise ConfigError("config key 'model' must be an object with a 'kind'")
            out[key] = copy.deepcopy(val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the JSON file, then ``overrides`` (same nested shape)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {user['version']!r}; "
                              f"expected {CONFIG_VERSION}")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    env_dir = os.environ.get(OUTPUT_ENV)
    if env_dir and not (overrides or {}).get("output_dir"):
        cfg["output_dir"] = env_dir
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    if not ds.get("builtin") and not ds.get("path"):
        raise ConfigError("dataset needs either 'builtin' or 'path'")
    if ds.get("path") and not ds.get("label_column"):
        raise ConfigError("dataset.label_column is required for CSV datasets")
    if ds.get("builtin") and ds["builtin"] not in D.BUILTIN_DATASETS:
        raise ConfigError(f"unknown builtin dataset {ds['builtin']!r}; "
                          f"valid: {', '.join(D.BUILTIN_DATASETS)}")
    methods = cfg["evaluation"]["methods"]
    if not methods:
        raise ConfigError("evaluation.methods is empty")
    valid = ALL_METHODS + EXTRA_METHODS
    bad = set(methods) - set(valid)
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}; valid: {', '.join(valid)}")
    if cfg["attribution"]["method"] not in EXPLAIN_METHODS:
        raise ConfigError(f"unknown attribution.method {cfg['attribution']['method']!r}; "
                          f"valid: {', '.join(EXPLAIN_METHODS)}")
    if not cfg["evaluation"]["seeds"]:
        raise ConfigError("evaluation.seeds is empty")
    if int(cfg["influence"]["k"]) < 1:
        raise ConfigError("influence.k must be >= 1")
    params = {k: v for k, v in cfg["model"].items() if k != "kind"}
    try:
        build_model(cfg["model"]["kind"], **params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_k_range(text: str) -> list:
    """``"1..16"`` -> 1..16 inclusive; ``"1,2,8"`` -> those values."""
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split("..", 1))
            if lo < 1 or hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        ks = [int(t) for t in text.split(",")]
        if not ks or min(ks) < 1:
            raise ValueError
        return ks
    except ValueError:
        raise ConfigError(f"bad k range {text!r}; use LO..HI or a comma list") from None


def parse_points(text: str, n: int) -> list:
    """Test point selector: an index, ``a..b`` (inclusive) or ``all``."""
    if text == "all":
        return list(range(n))
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split("..", 1))
            idx = list(range(lo, hi + 1))
        else:
            idx = [int(text)]
    except ValueError:
        raise ConfigError(f"bad point selector {text!r}; use an index, LO..HI or 'all'") from None
    if not idx or min(idx) < 0 or max(idx) >= n:
        raise ConfigError(f"point selector {text!r} out of range for {n} test points")
    return idx


def dataset_spec(cfg: dict) -> dict:
    ds = cfg["dataset"]
    spec = {k: v for k, v in ds.items() if v not in (None, [], {})}
    spec.setdefault("name", ds.get("builtin") or Path(ds["path"]).stem)
    return spec


def load_split(cfg: dict):
    spec = dataset_spec(cfg)
    raw = load_dataset(spec)
    return D.prepare(raw, spec.get("categorical", ()), cfg["split"]["test_fraction"],
                     cfg["split"]["seed"])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    sp = load_split(cfg)
    params = {k: v for k, v in cfg["model"].items() if k != "kind"}
    model = build_model(cfg["model"]["kind"], **params).fit(sp.train.X, sp.train.y)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    blob = checkpoint.to_dict(model, sp.train.preprocessing, sp.train.feature_names)
    blob["config"] = cfg
    (out / "model.json").write_text(json.dumps(blob, sort_keys=True))
    log = {
        "config": cfg,
        "train_accuracy": float(np.mean(model.predict(sp.train.X) == sp.train.y)),
        "test_accuracy": float(np.mean(model.predict(sp.test.X) == sp.test.y)),
        "n_train": int(sp.train.n_points),
        "n_test": int(sp.test.n_points),
        "loss_curve": [float(v) for v in getattr(model, "loss_curve_", [])],
    }
    _write_json(out / "train_log.json", log)
    print(f"test accuracy {log['test_accuracy']:.4f}; checkpoint {out / 'model.json'}")
    return 0


def _explain_point(method, model, sp, explainer, i, cfg):
    x, y = sp.test.X[i], sp.test.y[i]
    att = cfg["attribution"]
    if method in ("ava_shap", "ava_ig"):
        return explainer.explain(x, y, point_id=i).to_dict(sp.train.feature_names)
    out_idx = explainer.output_index(x)
    if method == "shap":
        a = shapley(model, x, explainer.background_, out_idx, att["shap_exact_cap"],
                    att["shap_samples"], cfg["split"]["seed"], i)
    else:
        base = att["ig_baseline"]
        ref = (np.zeros(x.shape) if base == "zero" else explainer.background_) \
            if isinstance(base, str) else np.asarray(base, dtype=float)
        a = integrated_gradients(explainer._gradient_model(), x, ref, out_idx,
                                 att["ig_steps"], i)
    return a.to_dict(sp.train.feature_names)


def cmd_explain(cfg: dict, checkpoint_path, points: str) -> int:
    model, blob = checkpoint.load(checkpoint_path)
    if blob.get("config"):
        # data and split must match what the model was trained on
        for key in ("dataset", "split"):
            cfg[key] = blob["config"][key]
    sp = load_split(cfg)
    idx = parse_points(points, sp.test.n_points)
    method = cfg["attribution"]["method"]
    inf, att = cfg["influence"], cfg["attribution"]
    explainer = AVAExplainer(
        model, "ava_ig" if method in ("ava_ig", "ig") else "ava_shap", int(inf["k"]),
        influence_mode=inf["mode"], solver=inf["solver"], damping=inf["damping"],
        tol=inf["tol"], max_iter=inf["max_iter"],
        zero_weight_fallback=inf["zero_weight_fallback"],
        shap_exact_cap=att["shap_exact_cap"], shap_samples=att["shap_samples"],
        ig_steps=att["ig_steps"], baseline=att["ava_ig_baseline"], target=att["target"],
        influence_label=inf["label"], seed=cfg["split"]["seed"],
    ).fit(sp.train.X, sp.train.y)
    out = Path(cfg["output_dir"]) / "explain"
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], 0
    for i in idx:
        try:
            res = _explain_point(method, model, sp, explainer, i, cfg)
        except (CapabilityError, ValueError, ArithmeticError, RuntimeError) as exc:
            failures += 1
            print(f"point {i}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        res["config"] = cfg
        _write_json(out / f"point_{i}_{method}.json", res)
        values = res.get("consensus", res.get("values"))
        rows.append([i, method] + [repr(float(v)) for v in values])
    with open(out / f"attributions_{method}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "method"] + list(sp.train.feature_names))
        w.writerows(rows)
    _write_json(out / "config.json", cfg)
    print(f"explained {len(rows)}/{len(idx)} points with {method}; output in {out}")
    return 1 if failures else 0


def _benchmark_inputs(cfg: dict):
    ev = cfg["evaluation"]
    datasets = ev["datasets"] or [dataset_spec(cfg)]
    models = ev["models"] or [cfg["model"]]
    inf, att = cfg["influence"], cfg["attribution"]
    bench_cfg = {
        "k": int(inf["k"]), "m": ev["m"], "m_candidates": ev["m_candidates"],
        "cv_folds": ev["cv_folds"], "test_fraction": cfg["split"]["test_fraction"],
        "ig_steps": att["ig_steps"], "ig_baseline": att["ig_baseline"],
        "ava_ig_baseline": att["ava_ig_baseline"], "max_test_points": ev["max_test_points"],
        "k_values": ev["k_values"], "n_trials": ev["n_trials"],
        "explainer": {"influence_mode": inf["mode"], "solver": inf["solver"],
                      "damping": inf["damping"], "tol": inf["tol"],
                      "max_iter": inf["max_iter"],
                      "zero_weight_fallback": inf["zero_weight_fallback"],
                      "shap_exact_cap": att["shap_exact_cap"],
                      "shap_samples": att["shap_samples"], "target": att["target"],
                      "influence_label": inf["label"]},
    }
    return datasets, models, bench_cfg


def _table_tsv(report) -> str:
    cols = ALL_METHODS + tuple(m for m in EXTRA_METHODS
                               if any(r["method"] == m for r in report.summary()))
    lines = ["dataset\tmodel\t" + "\t".join(m.upper() for m in cols)]
    grid = {}
    for r in report.summary():
        grid.setdefault((r["dataset"], r["model"]), {})[r["method"]] = r["recall"]
    for (ds, model), row in grid.items():
        cells = [f"{row[m]:.1f}" if m in row else "" for m in cols]
        lines.append("\t".join([str(ds), str(model)] + cells))
    return "\n".join(lines) + "\n"


def cmd_benchmark(cfg: dict, jobs: int = 1, methods=None) -> int:
    datasets, models, bench_cfg = _benchmark_inputs(cfg)
    report = run_benchmark(datasets, models, methods or cfg["evaluation"]["methods"],
                           cfg["evaluation"]["seeds"], bench_cfg, n_jobs=jobs)
    report.config = {"run_config": cfg, "benchmark": report.config}
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "recall_table.tsv").write_text(_table_tsv(report))
    (out / "mfi.tsv").write_text(report.mfi_tsv())
    if report.k_curves:
        (out / "k_curve.tsv").write_text(report.k_curve_tsv())
    print(_table_tsv(report), end="")
    for r in report.failed:
        print(f"cell {r['dataset']}/{r['model']}/seed={r['seed']} failed: {r['error']}",
              file=sys.stderr)
    return 1 if report.failed else 0


def cmd_sweep_k(cfg: dict, jobs: int = 1) -> int:
    if not cfg["evaluation"]["k_values"]:
        cfg["evaluation"]["k_values"] = list(range(1, 17))
    return cmd_benchmark(cfg, jobs, methods=("ava_shap", "ava_ig"))


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ava", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--output-dir", help=f"output directory (also ${OUTPUT_ENV})")
        sp.add_argument("--dataset", help="builtin dataset name or a CSV path")
        sp.add_argument("--label-column", help="label column for CSV datasets")
        sp.add_argument("--seed", type=int, help="split seed")
        sp.add_argument("--k", type=int, help="neighbourhood size")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t)
    t.add_argument("--model", help="model kind")
    t.add_argument("--activation", help="MLP activation")
    t.add_argument("--epochs", type=int, help="MLP epochs")

    e = sub.add_parser("explain", help="attribute test points with a trained model")
    common(e)
    e.add_argument("--checkpoint", help="checkpoint path (default OUTPUT_DIR/model.json)")
    e.add_argument("--method", choices=EXPLAIN_METHODS, help="attribution method")
    e.add_argument("--point", default="0", help="test index, LO..HI, or 'all'")

    for name, helptext in (("benchmark", "gold-set recall over datasets x models x seeds"),
                           ("sweep-k", "AVA recall as a function of k")):
        b = sub.add_parser(name, help=helptext)
        common(b)
        b.add_argument("--model", help="model kind")
        b.add_argument("--methods", help="comma-separated methods")
        b.add_argument("--seeds", help="comma-separated seeds")
        b.add_argument("--k-sweep", help="k values, e.g. 1..16")
        b.add_argument("--max-test-points", type=int, help="limit test points per cell")
        b.add_argument("--jobs", type=int, default=1, help="parallel benchmark cells")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.output_dir:
        o["output_dir"] = args.output_dir
    if args.dataset:
        if args.dataset in D.BUILTIN_DATASETS:
            o["dataset"] = {"builtin": args.dataset, "path": None}
        else:
            o["dataset"] = {"builtin": None, "path": args.dataset}
    if args.label_column:
        o.setdefault("dataset", {})["label_column"] = args.label_column
    if args.seed is not None:
        o["split"] = {"seed": args.seed}
    if args.k is not None:
        o["influence"] = {"k": args.k}
    model = {}
    for key in ("activation", "epochs"):
        if getattr(args, key, None) is not None:
            model[key] = getattr(args, key)
    if getattr(args, "model", None) or model:
        o["model"] = model
    if getattr(args, "method", None):
        o["attribution"] = {"method": args.method}
    ev = {}
    if getattr(args, "methods", None):
        ev["methods"] = [m for m in args.methods.split(",") if m]
    if getattr(args, "seeds", None):
        ev["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "k_sweep", None):
        ev["k_values"] = parse_k_range(args.k_sweep)
    if getattr(args, "max_test_points", None) is not None:
        ev["max_test_points"] = args.max_test_points
    if ev:
        o["evaluation"] = ev
    return o


def resolve(args) -> dict:
    o = _overrides(args)
    model_flags = o.pop("model", None)
    cfg = load_config(args.config, o)
    if model_flags is not None:
        kind = getattr(args, "model", None)
        base = cfg["model"] if not kind or kind == cfg["model"]["kind"] else {}
        merged = {**base, **model_flags, "kind": kind or cfg["model"]["kind"]}
        cfg = load_config(None, {**_as_overrides(cfg), "model": merged})
    return cfg


def _as_overrides(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "model"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "explain":
            ckpt = args.checkpoint or str(Path(cfg["output_dir"]) / "model.json")
            return cmd_explain(cfg, ckpt, args.point)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, args.jobs)
        return cmd_sweep_k(cfg, args.jobs)
    except (ConfigError, D.DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
