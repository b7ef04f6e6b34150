"""Tabular dataset loading, preprocessing and train/test splitting.

Points are stored row-wise (``X`` has shape ``(N, d)``), the layout every
estimator in this package consumes. ``Dataset.D`` exposes the column-wise
``(d, N)`` view for code that wants one column per training point.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for unreadable, malformed or degenerate input data."""


@dataclass(frozen=True)
class PreprocessingRecord:
    """Per-feature transforms fitted on a training set.

    ``numeric`` maps column name to ``(mean, scale)``; ``categorical`` maps
    column name to its ordered list of levels. ``columns`` keeps the raw
    column order so the record can be replayed on new raw data.
    """

    columns: tuple
    numeric: dict
    categorical: dict

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "numeric": {k: list(v) for k, v in self.numeric.items()},
            "categorical": {k: list(v) for k, v in self.categorical.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessingRecord":
        return cls(
            columns=tuple(d["columns"]),
            numeric={k: (float(v[0]), float(v[1])) for k, v in d["numeric"].items()},
            categorical={k: list(v) for k, v in d["categorical"].items()},
        )


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with labels and metadata.

    Raw datasets (straight from :func:`load_csv`) hold an object array of
    strings with ``None`` for missing cells. Preprocessed datasets hold a
    finite float matrix and carry the :class:`PreprocessingRecord` used.
    """

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple
    preprocessing: Optional[PreprocessingRecord] = None
    classes: Optional[tuple] = None
    row_index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.X.ndim != 2:
            raise DataError("features must be a 2-D array")
        if len(self.y) != self.X.shape[0]:
            raise DataError(
                f"labels length {len(self.y)} != number of points {self.X.shape[0]}"
            )
        if len(self.feature_names) != self.X.shape[1]:
            raise DataError("feature_names length does not match number of features")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature_names must be unique")
        if self.preprocessing is not None and not np.all(np.isfinite(self.X)):
            raise DataError("preprocessed features contain non-finite values")
        if self.row_index is None:
            object.__setattr__(self, "row_index", np.arange(self.X.shape[0]))

    @property
    def n_points(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def D(self) -> np.ndarray:
        """Column-per-point view, shape ``(d, N)``."""
        return self.X.T

    @property
    def is_raw(self) -> bool:
        return self.preprocessing is None and self.X.dtype == object

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            X=self.X[idx],
            y=self.y[idx],
            feature_names=self.feature_names,
            preprocessing=self.preprocessing,
            classes=self.classes,
            row_index=self.row_index[idx],
        )


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    test: Dataset
    seed: int
    test_fraction: float
    train_index: np.ndarray = field(repr=False, default=None)
    test_index: np.ndarray = field(repr=False, default=None)


def _is_missing(cell: str) -> bool:
    return cell.strip() in ("", "?", "NA", "NaN", "nan")


def load_csv(path, label_column: str, header: bool = True,
             label_kind: str = "class") -> Dataset:
    """Read a delimited file into a raw :class:`Dataset`.

    Cells are kept as strings; empty cells (and ``?``/``NA``) become ``None``.
    With ``label_kind="class"`` labels are encoded as indices into the sorted
    distinct label values, which are stored in ``classes``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path} is empty")
    if header:
        names, body, first_row = [c.strip() for c in rows[0]], rows[1:], 1
    else:
        names = [f"x{i}" for i in range(len(rows[0]))]
        body, first_row = rows, 0
    if label_column not in names:
        raise DataError(f"unknown label column {label_column!r}; columns are {names}")
    width = len(names)
    for i, r in enumerate(body):
        if len(r) != width:
            raise DataError(
                f"malformed row {i + first_row}: expected {width} fields, got {len(r)}"
            )
    li = names.index(label_column)
    raw_labels = [r[li].strip() for r in body]
    if any(_is_missing(v) for v in raw_labels):
        raise DataError("label column contains missing values")
    if label_kind == "class":
        classes = tuple(sorted(set(raw_labels), key=_natural_key))
        lookup = {c: i for i, c in enumerate(classes)}
        y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    elif label_kind == "real":
        classes = None
        y = np.array([float(v) for v in raw_labels])
    else:
        raise ValueError(f"unknown label_kind {label_kind!r}")
    feat_cols = [i for i in range(width) if i != li]
    X = np.empty((len(body), len(feat_cols)), dtype=object)
    for r_i, r in enumerate(body):
        for c_j, c in enumerate(feat_cols):
            cell = r[c]
            X[r_i, c_j] = None if _is_missing(cell) else cell.strip()
    return Dataset(X=X, y=y, feature_names=tuple(names[c] for c in feat_cols),
                   classes=classes)


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def _to_float(col: np.ndarray, name: str) -> np.ndarray:
    out = np.empty(len(col))
    for i, v in enumerate(col):
        if v is None:
            out[i] = np.nan
        else:
            try:
                out[i] = float(v)
            except (TypeError, ValueError):
                raise DataError(
                    f"column {name!r} is not numeric (value {v!r}); "
                    "list it as categorical"
                ) from None
    return out


class TabularPreprocessor(BaseEstimator, TransformerMixin):
    """Standardize numeric columns and one-hot encode categorical ones.

    Statistics come from the data passed to ``fit`` only. Missing numeric
    cells are imputed with the training mean, which standardizes to 0.
    Zero-variance columns get scale 1. Categorical levels unseen at fit time
    encode to all zeros.

    Parameters
    ----------
    categorical : sequence of str
        Names of the categorical columns. Every other column must be numeric.
    feature_names : sequence of str, optional
        Raw column names, needed when ``fit`` receives a bare array.
    """

    def __init__(self, categorical: Sequence[str] = (), feature_names=None):
        self.categorical = categorical
        self.feature_names = feature_names

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=object)
        names = self._names(X)
        unknown = set(self.categorical) - set(names)
        if unknown:
            raise DataError(f"categorical columns not in data: {sorted(unknown)}")
        numeric, categorical = {}, {}
        for j, name in enumerate(names):
            col = X[:, j]
            if name in self.categorical:
                levels = sorted({str(v) for v in col if v is not None}, key=_natural_key)
                categorical[name] = levels
            else:
                vals = _to_float(col, name)
                seen = vals[~np.isnan(vals)]
                mean = float(seen.mean()) if seen.size else 0.0
                scale = float(seen.std()) if seen.size else 0.0
                if scale == 0.0:
                    logger.warning("column %r has zero variance; using scale 1", name)
                    scale = 1.0
                numeric[name] = (mean, scale)
        self.record_ = PreprocessingRecord(tuple(names), numeric, categorical)
        self.output_names_ = tuple(_output_names(self.record_))
        return self

    def transform(self, X):
        check_is_fitted(self, "record_")
        return apply_record(self.record_, np.asarray(X, dtype=object))

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "record_")
        return np.asarray(self.output_names_, dtype=object)

    def _names(self, X):
        if self.feature_names is not None:
            names = list(self.feature_names)
        else:
            names = [f"x{i}" for i in range(X.shape[1])]
        if len(names) != X.shape[1]:
            raise DataError("feature_names length does not match data")
        return names


def _output_names(record: PreprocessingRecord):
    for name in record.columns:
        if name in record.categorical:
            for level in record.categorical[name]:
                yield f"{name}={level}"
        else:
            yield name


def apply_record(record: PreprocessingRecord, X: np.ndarray) -> np.ndarray:
    """Replay a fitted preprocessing record on raw rows."""
    if X.shape[1] != len(record.columns):
        raise DataError(
            f"expected {len(record.columns)} raw columns, got {X.shape[1]}"
        )
    blocks = []
    for j, name in enumerate(record.columns):
        col = X[:, j]
        if name in record.categorical:
            levels = record.categorical[name]
            index = {lv: i for i, lv in enumerate(levels)}
            block = np.zeros((len(col), len(levels)))
            for r, v in enumerate(col):
                if v is None:
                    continue
                pos = index.get(str(v))
                if pos is None:
                    logger.warning("unseen level %r in column %r; encoded as zeros", v, name)
                    continue
                block[r, pos] = 1.0
            blocks.append(block)
        else:
            mean, scale = record.numeric[name]
            vals = _to_float(col, name)
            vals = np.where(np.isnan(vals), mean, vals)
            blocks.append(((vals - mean) / scale)[:, None])
    if not blocks:
        return np.zeros((X.shape[0], 0))
    return np.hstack(blocks)


def preprocess(raw: Dataset, categorical: Sequence[str] = ()) -> Dataset:
    """Fit preprocessing on ``raw`` and return the transformed dataset."""
    pre = TabularPreprocessor(categorical=categorical,
                              feature_names=raw.feature_names).fit(raw.X)
    return _wrap(raw, pre.transform(raw.X), pre.record_)


def apply_preprocessing(record: PreprocessingRecord, raw: Dataset) -> Dataset:
    """Transform ``raw`` with statistics fitted elsewhere (e.g. the train split)."""
    return _wrap(raw, apply_record(record, np.asarray(raw.X, dtype=object)), record)


def _wrap(raw: Dataset, X: np.ndarray, record: PreprocessingRecord) -> Dataset:
    return Dataset(X=X.astype(float), y=raw.y, feature_names=tuple(_output_names(record)),
                   preprocessing=record, classes=raw.classes, row_index=raw.row_index)


def n_test_points(n_total: int, test_fraction: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(test_fraction * n_total + 0.5))


def split(data: Dataset, test_fraction: float = 0.33, seed: int = 0) -> SplitDataset:
    """Seeded shuffle split with ``round(test_fraction * N)`` test points."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    n = data.n_points
    if n < 2:
        raise DataError("need at least two points to split")
    n_test = n_test_points(n, test_fraction)
    if n_test == 0 or n_test == n:
        raise DataError(f"split of {n} points at fraction {test_fraction} leaves a side empty")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return SplitDataset(train=data.subset(train_idx), test=data.subset(test_idx),
                        seed=seed, test_fraction=test_fraction,
                        train_index=train_idx, test_index=test_idx)


def prepare(raw: Dataset, categorical: Sequence[str] = (), test_fraction: float = 0.33,
            seed: int = 0) -> SplitDataset:
    """Split raw data, fit preprocessing on the train side, apply it to both."""
    parts = split(raw, test_fraction, seed)
    if raw.preprocessing is not None or raw.X.dtype != object:
        # already numeric: standardize with train statistics
        train_raw = Dataset(X=parts.train.X.astype(object), y=parts.train.y,
                            feature_names=raw.feature_names, classes=raw.classes,
                            row_index=parts.train.row_index)
        test_raw = Dataset(X=parts.test.X.astype(object), y=parts.test.y,
                           feature_names=raw.feature_names, classes=raw.classes,
                           row_index=parts.test.row_index)
    else:
        train_raw, test_raw = parts.train, parts.test
    train = preprocess(train_raw, categorical)
    test = apply_preprocessing(train.preprocessing, test_raw)
    return SplitDataset(train=train, test=test, seed=seed, test_fraction=test_fraction,
                        train_index=parts.train_index, test_index=parts.test_index)


def group_attribution(values: np.ndarray, record: PreprocessingRecord) -> dict:
    """Sum attribution magnitudes of one-hot indicator columns per source column."""
    values = np.asarray(values, dtype=float)
    out, pos = {}, 0
    for name in record.columns:
        width = len(record.categorical[name]) if name in record.categorical else 1
        out[name] = float(np.abs(values[pos:pos + width]).sum())
        pos += width
    return out


# -- built-in datasets -------------------------------------------------------

def load_iris() -> Dataset:
    """The Iris data (150 points, 4 numeric features, 3 classes), unprocessed."""
    from sklearn.datasets import load_iris as _sk_iris

    bunch = _sk_iris()
    names = tuple(n.replace(" (cm)", "").replace(" ", "_") for n in bunch.feature_names)
    return Dataset(X=bunch.data.astype(object), y=bunch.target.astype(np.int64),
                   feature_names=names, classes=tuple(bunch.target_names))


def make_synthetic(n_points: int = 600, n_features: int = 8, n_informative: int = 3,
                   seed: int = 0) -> Dataset:
    """Binary task driven by the first ``n_informative`` features.

    The remaining features are noise with the same marginal distribution, so
    a faithful attribution should concentrate on the leading columns.
    """
    if not 1 <= n_informative <= n_features:
        raise ValueError("need 1 <= n_informative <= n_features")
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_points, n_features))
    w = np.linspace(2.0, 1.0, n_informative)
    logits = X[:, :n_informative] @ w
    if n_informative >= 2:
        logits = logits + 0.75 * X[:, 0] * X[:, 1]
    y = (logits + 0.25 * rng.normal(size=n_points) > 0).astype(np.int64)
    names = tuple(f"f{i}" for i in range(n_features))
    return Dataset(X=X.astype(object), y=y, feature_names=names, classes=("0", "1"))


BUILTIN_DATASETS = {"iris": load_iris, "synthetic8": make_synthetic}
