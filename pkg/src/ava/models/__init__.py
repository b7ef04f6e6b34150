"""Model zoo behind a single predictor contract."""

from ava.models.base import (CapabilityError, Predictor, TrainingError, grad_input,
                             grad_params, hvp, predict)
from ava.models.knn import KNNClassifier, SoftKNNClassifier
from ava.models.linear import LinearRegressionModel, LogisticRegressionModel
from ava.models.mlp import MLPClassifier, TrainConfig
from ava.models.svm import RBFSVMClassifier
from ava.models.tree import DecisionTreeClassifier, train_decision_tree

MODEL_KINDS = {
    "mlp": MLPClassifier,
    "svm_rbf": RBFSVMClassifier,
    "knn": KNNClassifier,
    "soft_knn": SoftKNNClassifier,
    "decision_tree": DecisionTreeClassifier,
    "logistic": LogisticRegressionModel,
    "linear": LinearRegressionModel,
}


def build_model(kind: str, **params) -> Predictor:
    """Unfitted predictor of the given kind; unknown hyperparameters are rejected."""
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; valid: {', '.join(MODEL_KINDS)}") from None
    valid = set(cls().get_params())
    unknown = set(params) - valid
    if unknown:
        raise ValueError(f"unknown {kind} hyperparameters: {sorted(unknown)}")
    if kind == "mlp":
        if "hidden_layer_sizes" in params:
            params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
        TrainConfig(**params)
    return cls(**params)


def train_mlp(X, y, config: TrainConfig) -> MLPClassifier:
    return config.estimator().fit(X, y)


def train_svm_rbf(X, y, C=1.0, gamma="scale") -> RBFSVMClassifier:
    return RBFSVMClassifier(C=C, gamma=gamma).fit(X, y)


def train_knn(X, y, n_neighbors=5) -> KNNClassifier:
    return KNNClassifier(n_neighbors=n_neighbors).fit(X, y)


__all__ = [
    "CapabilityError", "DecisionTreeClassifier", "KNNClassifier", "LinearRegressionModel",
    "LogisticRegressionModel", "MLPClassifier", "MODEL_KINDS", "Predictor",
    "RBFSVMClassifier", "SoftKNNClassifier", "TrainConfig", "TrainingError", "build_model",
    "grad_input", "grad_params", "hvp", "predict", "train_decision_tree", "train_knn",
    "train_mlp", "train_svm_rbf",
]
