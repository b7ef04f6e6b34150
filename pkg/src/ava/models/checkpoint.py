"""Versioned JSON checkpoints for fitted predictors.

Floats are written with ``repr`` precision, which round-trips IEEE doubles
exactly, so a saved and reloaded model predicts bit-identically.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ava.models import MODEL_KINDS

FORMAT = "ava-checkpoint"
VERSION = 1

# derived caches rebuilt on demand
_SKIP = {"_K_fit"}


def _encode(value):
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype), "shape": list(value.shape)}
    if isinstance(value, (list, tuple)) and any(isinstance(v, np.ndarray) for v in value):
        return {"__list__": [_encode(v) for v in value]}
    if isinstance(value, tuple):
        return {"__tuple__": list(value)}
    if isinstance(value, np.generic):
        return value.item()
    return value


def _decode(value):
    if isinstance(value, dict):
        if "__ndarray__" in value:
            arr = np.array(value["__ndarray__"], dtype=value["dtype"])
            return arr.reshape(value["shape"])
        if "__list__" in value:
            return [_decode(v) for v in value["__list__"]]
        if "__tuple__" in value:
            return tuple(value["__tuple__"])
    return value


def to_dict(model, preprocessing=None, feature_names=None) -> dict:
    params = {k: _encode(v) for k, v in model.get_params(deep=False).items()}
    state = {k: _encode(v) for k, v in vars(model).items()
             if k not in params and k not in _SKIP}
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "hyperparameters": params,
        "state": state,
        "preprocessing": None if preprocessing is None else preprocessing.to_dict(),
        "feature_names": None if feature_names is None else list(feature_names),
    }


def from_dict(blob: dict):
    if blob.get("format") != FORMAT:
        raise ValueError("not an ava checkpoint")
    if blob.get("version", 0) > VERSION:
        raise ValueError(f"checkpoint version {blob['version']} is newer than supported {VERSION}")
    cls = MODEL_KINDS[blob["kind"]]
    model = cls(**{k: _decode(v) for k, v in blob["hyperparameters"].items()})
    for k, v in blob["state"].items():
        setattr(model, k, _decode(v))
    return model


def save(model, path, preprocessing=None, feature_names=None) -> None:
    text = json.dumps(to_dict(model, preprocessing, feature_names), sort_keys=True)
    Path(path).write_text(text)


def load(path):
    """Return ``(model, blob)``; the blob carries preprocessing and feature names."""
    blob = json.loads(Path(path).read_text())
    return from_dict(blob), blob
