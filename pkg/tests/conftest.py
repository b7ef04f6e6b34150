import numpy as np
import pytest

from ava import data as D
from ava.models import MLPClassifier


@pytest.fixture(scope="session")
def iris_split():
    return D.prepare(D.load_iris(), (), 0.33, 0)


@pytest.fixture(scope="session")
def iris_mlp(iris_split):
    return MLPClassifier(learning_rate=1e-2, epochs=500, seed=0).fit(
        iris_split.train.X, iris_split.train.y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


class FnPredictor:
    """Scalar function wrapped as a one-output predictor (gradient optional)."""

    has_input_gradient = True
    kind = "fn"

    def __init__(self, f, grad=None):
        self.f = f
        self.grad = grad
        self.has_input_gradient = grad is not None

    def predict_output(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.f(X), dtype=float).reshape(-1, 1)

    def input_gradient(self, X, output_index=0):
        return self.grad(np.atleast_2d(np.asarray(X, dtype=float)))


def table_game(values):
    """Coalition game given by a lookup table indexed by coalition bit pattern."""
    values = np.asarray(values, dtype=float)
    d = int(np.log2(len(values)))

    def v(masks):
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        return values[masks.astype(np.int64) @ (1 << np.arange(d))]

    v.n_players = d
    return v


# acceptance criteria report: criterion number -> (passed, detail)
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        prev = ACCEPTANCE.get(number)
        # a criterion with several tests fails if any part fails
        if prev is not None:
            passed, detail = prev[0] and passed, f"{prev[1]}; {detail}"
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
