import numpy as np
import pytest
from sklearn.base import clone

from ava.influence import explicit_hessian
from ava.models import (CapabilityError, DecisionTreeClassifier, KNNClassifier,
                        LinearRegressionModel, LogisticRegressionModel, MLPClassifier,
                        RBFSVMClassifier, SoftKNNClassifier, TrainConfig, TrainingError,
                        build_model, checkpoint, grad_input, grad_params, hvp, predict,
                        train_decision_tree, train_knn, train_mlp, train_svm_rbf)
from conftest import central_diff, rel_err


def blobs(n=60, d=2, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(n, d)), rng.normal(size=(n, d)) + sep])
    return X, np.repeat([0, 1], n)


def small_mlp(activation="sigmoid", seed=0, hidden=(4, 3), n_cls=3, epochs=30):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 3))
    y = rng.integers(0, n_cls, 25)
    y[:n_cls] = np.arange(n_cls)
    m = MLPClassifier(hidden_layer_sizes=hidden, activation=activation, learning_rate=1e-2,
                      epochs=epochs, seed=seed).fit(X, y)
    return m, X, y


# -- MLP -----------------------------------------------------------------------

def test_mlp_iris_accuracy_200_epochs(iris_split):
    cfg = TrainConfig(learning_rate=1e-2, epochs=200)
    m = train_mlp(iris_split.train.X, iris_split.train.y, cfg)
    assert np.mean(m.predict(iris_split.test.X) == iris_split.test.y) > 0.9
    assert m.loss_curve_[-1] < m.loss_curve_[0]


def test_mlp_xor():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    y = np.array([0, 1, 1, 0])
    m = MLPClassifier(hidden_layer_sizes=(8, 8), activation="relu", learning_rate=0.05,
                      epochs=500, seed=0).fit(X, y)
    assert np.all(m.predict(X) == y)


def test_mlp_zero_epochs_is_initialization():
    X, y = blobs(10)
    a = MLPClassifier(epochs=0, seed=3).fit(X, y)
    b = MLPClassifier(epochs=0, seed=3)
    b._init_params(2, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(a.get_flat_params(), b.get_flat_params())


def test_mlp_seeded_determinism():
    X, y = blobs(20)
    a = MLPClassifier(epochs=20, seed=5).fit(X, y)
    b = MLPClassifier(epochs=20, seed=5).fit(X, y)
    np.testing.assert_array_equal(a.get_flat_params(), b.get_flat_params())


def test_mlp_zero_final_layer_gives_uniform():
    m, X, _ = small_mlp()
    m._params[-2][:] = 0
    m._params[-1][:] = 0
    np.testing.assert_allclose(m.predict_proba(X), 1 / 3, atol=1e-15)


def test_mlp_rejects_bad_config():
    with pytest.raises(ValueError, match="unknown activation 'tanh'; valid: sigmoid, relu"):
        TrainConfig(activation="tanh")
    with pytest.raises(ValueError, match="learning_rate"):
        MLPClassifier(learning_rate=0).fit(*blobs(5))


def test_mlp_divergence_raises():
    X, y = blobs(10)
    with pytest.raises(TrainingError), np.errstate(all="ignore"):
        MLPClassifier(learning_rate=1e300, epochs=5, hidden_layer_sizes=(4,)).fit(X * 1e200, y)


def test_sigmoid_saturation_gradient_finite():
    m, X, _ = small_mlp()
    g = m.input_gradient(np.full((1, 3), 1e4), 0)
    assert np.all(np.isfinite(g)) and np.abs(g).max() < 1e-6


@pytest.mark.parametrize("activation", ["sigmoid", "relu"])
def test_mlp_gradients_match_finite_differences(activation):
    m, X, y = small_mlp(activation)
    theta = m.get_flat_params()
    h = 1e-5 if activation == "sigmoid" else 1e-7

    def loss_at(t, i):
        m.set_flat_params(t)
        return float(m.example_loss(X[i:i + 1], y[i:i + 1])[0])

    G = m.param_gradients(X, y)
    for i in range(5):
        fd = central_diff(lambda t: loss_at(t, i), theta, h)
        assert rel_err(G[i], fd) < 1e-4
    m.set_flat_params(theta)
    for i in range(5):
        for c in range(3):
            fd = central_diff(lambda x: m.predict_output(x[None, :])[0, c], X[i], h)
            assert rel_err(m.input_gradient(X[i:i + 1], c)[0], fd) < 1e-4


def test_mlp_hvp_matches_hessian_of_gradients():
    m, X, y = small_mlp("sigmoid", hidden=(3, 3))
    assert m.n_params_ <= 50
    theta = m.get_flat_params()

    def mean_grad(t):
        m.set_flat_params(t)
        return m.param_gradients(X, y, regularized=True).mean(0)

    p = theta.size
    H_fd = np.empty((p, p))
    h = 1e-3
    for i in range(p):
        e = np.zeros(p)
        e[i] = h
        # 5-point stencil
        H_fd[:, i] = (-mean_grad(theta + 2 * e) + 8 * mean_grad(theta + e)
                      - 8 * mean_grad(theta - e) + mean_grad(theta - 2 * e)) / (12 * h)
    m.set_flat_params(theta)
    H = explicit_hessian(m, X, y)
    v = np.random.default_rng(0).normal(size=p)
    assert rel_err(H @ v, H_fd @ v) < 1e-8
    np.testing.assert_allclose(m.hvp(X, y, v, 0.3), m.hvp(X, y, v) + 0.3 * v, rtol=1e-13)


@pytest.mark.parametrize("activation", ["sigmoid", "relu"])
def test_hvp_linear_and_symmetric(activation):
    m, X, y = small_mlp(activation)
    rng = np.random.default_rng(1)
    v, w = rng.normal(size=(2, m.n_params_))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(m.hvp(X, y, a * v + b * w), a * m.hvp(X, y, v) + b * m.hvp(X, y, w),
                               atol=1e-10)
    assert abs(v @ m.hvp(X, y, w) - w @ m.hvp(X, y, v)) < 1e-8


def test_l2_regularizer_in_hvp_not_in_example_gradients():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(10, 2)), np.arange(10) % 2
    plain = MLPClassifier(hidden_layer_sizes=(3,), epochs=3).fit(X, y)
    reg = clone(plain).set_params(l2=0.5).fit(X, y)
    reg.set_flat_params(plain.get_flat_params())
    np.testing.assert_array_equal(reg.param_gradients(X, y), plain.param_gradients(X, y))
    v = rng.normal(size=plain.n_params_)
    np.testing.assert_allclose(reg.hvp(X, y, v), plain.hvp(X, y, v) + 0.5 * v, atol=1e-12)


def test_squared_error_regressor():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    y = X @ [1.0, -2.0]
    m = MLPClassifier(loss="squared_error", hidden_layer_sizes=(8,), learning_rate=1e-2,
                      epochs=300).fit(X, y)
    assert not m.is_classifier
    assert m.predict_output(X).shape == (40, 1)
    with pytest.raises(CapabilityError):
        m.predict_proba(X)


# -- linear models -------------------------------------------------------------

def test_logistic_closed_form_gradient_and_optimum():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    y = (X[:, 0] + 0.5 * rng.normal(size=50) > 0).astype(int)
    m = LogisticRegressionModel(l2=0.0, fit_intercept=False).fit(X, y)
    theta = m.get_flat_params()
    s = 1 / (1 + np.exp(-X @ theta))
    np.testing.assert_allclose(m.param_gradients(X, y), (s - y)[:, None] * X, atol=1e-12)
    assert np.linalg.norm(m.param_gradients(X, y, regularized=True).mean(0)) < 1e-8


def test_logistic_binary_only():
    with pytest.raises(ValueError, match="binary"):
        LogisticRegressionModel().fit(np.zeros((3, 1)), [0, 1, 2])


def test_linear_regression_gradient_is_w():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 3))
    m = LinearRegressionModel(fit_intercept=True).fit(X, X @ [1.0, 2.0, -3.0] + 4.0)
    for x in X[:5]:
        np.testing.assert_allclose(grad_input(m, x, 0), [1.0, 2.0, -3.0], atol=1e-10)


def test_quadratic_hvp_constant_hessian():
    # loss (theta x - y)^2: H = mean(2 x^2), independent of theta
    X = np.array([[1.0], [2.0]])
    m = LinearRegressionModel(fit_intercept=False).fit(X, np.array([1.0, 2.0]))
    for theta in (0.0, 1.0, -3.0):
        m.set_flat_params([theta])
        np.testing.assert_allclose(m.hvp(X, [1.0, 2.0], np.array([2.0]), 0.5), [2 * 5 + 0.5 * 2])


# -- SVM -----------------------------------------------------------------------

def test_svm_blobs_accuracy():
    X, y = blobs(60, seed=1)
    Xt, yt = blobs(40, seed=2)
    m = train_svm_rbf(X, y, C=1.0, gamma=0.5)
    assert np.mean(m.predict(Xt) == yt) > 0.95


def test_svm_two_points():
    X = np.array([[0.0, 0.0], [2.0, 1.0]])
    m = RBFSVMClassifier(C=10.0, gamma=0.5).fit(X, [0, 1])
    f = m.decision_function(X)
    assert f[0] < 0 < f[1]
    mid = m.decision_function(np.array([[1.0, 0.5]]))
    assert abs(mid[0]) < 1e-8


def test_svm_rejects_gamma_zero():
    with pytest.raises(ValueError, match="gamma"):
        RBFSVMClassifier(gamma=0).fit(*blobs(5))


def test_svm_derivatives(iris_split):
    X, y = iris_split.train.X[:40], iris_split.train.y[:40]
    m = RBFSVMClassifier(C=1.0).fit(X, y)
    probs = m.predict_proba(X)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    for i in range(3):
        fd = central_diff(lambda x: m.predict_output(x[None, :])[0, 1], X[i])
        assert rel_err(m.input_gradient(X[i:i + 1], 1)[0], fd) < 1e-4
    theta = m.get_flat_params()
    v = np.random.default_rng(0).normal(size=theta.size)
    h = 1e-6

    def g(t):
        m.set_flat_params(t)
        return m.param_gradients(X, y, regularized=True).mean(0)

    fd = (g(theta + h * v) - g(theta - h * v)) / (2 * h)
    m.set_flat_params(theta)
    assert rel_err(m.hvp(X, y, v), fd) < 1e-6
    assert np.linalg.norm(g(theta)) < 1e-8


# -- kNN -----------------------------------------------------------------------

def test_knn_own_point_and_majority():
    X = np.array([[0.0], [1.0], [-1.0], [0.5]])
    m = train_knn(X, [0, 0, 0, 1], n_neighbors=1)
    assert m.predict(X).tolist() == [0, 0, 0, 1]
    np.testing.assert_array_equal(m.predict_output(X[3:]), [[0.0, 1.0]])
    # two A at distance 1, one B at distance 0.5
    X = np.array([[1.0], [-1.0], [0.5]])
    m = KNNClassifier(n_neighbors=3).fit(X, ["A", "A", "B"])
    assert m.predict(np.array([[0.0]]))[0] == "A"


def test_knn_vote_tie_goes_to_smallest_class():
    X = np.array([[1.0], [-1.0]])
    m = KNNClassifier(n_neighbors=2).fit(X, [1, 0])
    assert m.predict(np.array([[0.0]]))[0] == 0


def test_knn_capabilities():
    m = KNNClassifier(n_neighbors=1).fit(np.zeros((2, 1)), [0, 1])
    with pytest.raises(CapabilityError):
        m.input_gradient(np.zeros((1, 1)), 0)
    with pytest.raises(CapabilityError):
        m.param_gradients(np.zeros((1, 1)), [0])


def test_soft_knn_agrees_with_hard_knn_at_small_tau():
    X, y = blobs(30, sep=2.0, seed=4)
    hard = KNNClassifier(n_neighbors=5).fit(X, y)
    soft = SoftKNNClassifier(n_neighbors=5, temperature=1e-3).fit(X, y)
    g = np.stack(np.meshgrid(np.linspace(-2, 4, 25), np.linspace(-2, 4, 25)), -1).reshape(-1, 2)
    votes = hard.predict_output(g).max(1)
    # stay away from vote ties and from near-ties in the k-th distance
    S = np.sort(((g[:, None] - X[None]) ** 2).sum(-1), 1)
    keep = (votes > 0.5) & (S[:, 5] - S[:, 4] > 0.05)
    assert keep.sum() > 100
    assert np.all(soft.predict(g[keep]) == hard.predict(g[keep]))


def test_soft_knn_input_gradient():
    X, y = blobs(20, sep=1.0, seed=5)
    m = SoftKNNClassifier(n_neighbors=4, temperature=0.5).fit(X, y)
    for x in np.random.default_rng(0).normal(size=(5, 2)):
        fd = central_diff(lambda z: m.predict_output(z[None, :])[0, 1], x, 1e-6)
        assert rel_err(m.input_gradient(x[None, :], 1)[0], fd) < 1e-4


# -- decision tree ---------------------------------------------------------------

def test_tree_single_perfect_splitter():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 4))
    y = (X[:, 2] > 0.1).astype(int)
    tree, feats = train_decision_tree(X, y, 1)
    assert feats == [2]
    assert np.all(tree.predict(X) == y)


def test_tree_no_pruning_when_m_large():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 3))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    full = DecisionTreeClassifier().fit(X, y)
    big = DecisionTreeClassifier(max_used_features=3).fit(X, y)
    assert sorted(big.used_features_) == sorted(full.used_features_)
    np.testing.assert_array_equal(big.feature_, full.feature_)


def test_tree_pure_dataset_is_leaf():
    tree, feats = train_decision_tree(np.random.default_rng(0).normal(size=(5, 2)), [1] * 5, 2)
    assert feats == [] and tree.predict(np.zeros((1, 2)))[0] == 1


def test_tree_iris_petal_features(iris_split):
    _, feats = train_decision_tree(iris_split.train.X, iris_split.train.y, 2)
    assert set(feats) <= {2, 3}


def test_tree_pruning_respects_budget(iris_split):
    for m in range(1, 5):
        t = DecisionTreeClassifier(max_used_features=m).fit(iris_split.train.X, iris_split.train.y)
        assert len(t.used_features_) <= m
        np.testing.assert_allclose(t.predict_proba(iris_split.test.X).sum(1), 1.0, atol=1e-12)


def test_tree_has_no_gradients():
    t = DecisionTreeClassifier().fit(np.array([[0.0], [1.0]]), [0, 1])
    with pytest.raises(CapabilityError):
        t.input_gradient(np.zeros((1, 1)), 0)


# -- shared contract -------------------------------------------------------------

def test_probabilities_sum_to_one_everywhere(iris_split, iris_mlp):
    X, y = iris_split.train.X, iris_split.train.y
    models = [iris_mlp, RBFSVMClassifier().fit(X, y), KNNClassifier().fit(X, y),
              SoftKNNClassifier().fit(X, y), DecisionTreeClassifier().fit(X, y)]
    for m in models:
        P = m.predict_proba(iris_split.test.X)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(P, m.predict_proba(iris_split.test.X))


def test_dimension_mismatch_rejected(iris_mlp):
    with pytest.raises(ValueError, match="features"):
        predict(iris_mlp, np.zeros(3))
    with pytest.raises(ValueError):
        iris_mlp.predict_output(np.array([[np.nan, 0, 0, 0]]))


def test_module_wrappers(iris_split, iris_mlp):
    x, y = iris_split.test.X[0], iris_split.test.y[0]
    np.testing.assert_array_equal(grad_params(iris_mlp, x, y),
                                  iris_mlp.param_gradients(x[None, :], [y])[0])
    v = np.ones(iris_mlp.n_params_)
    np.testing.assert_array_equal(hvp(iris_mlp, iris_split.train.X, iris_split.train.y, v),
                                  iris_mlp.hvp(iris_split.train.X, iris_split.train.y, v))


def test_build_model_validation():
    assert isinstance(build_model("svm_rbf", C=2.0), RBFSVMClassifier)
    with pytest.raises(ValueError, match="unknown model kind"):
        build_model("forest")
    with pytest.raises(ValueError, match="hyperparameters"):
        build_model("knn", depth=3)
    with pytest.raises(ValueError, match="unknown activation"):
        build_model("mlp", activation="tanh")


@pytest.mark.parametrize("kind", ["mlp", "svm_rbf", "knn", "soft_knn", "decision_tree"])
def test_checkpoint_round_trip_bit_exact(tmp_path, iris_split, kind):
    params = {"epochs": 20} if kind == "mlp" else {}
    m = build_model(kind, **params).fit(iris_split.train.X, iris_split.train.y)
    path = tmp_path / "m.json"
    checkpoint.save(m, path, iris_split.train.preprocessing, iris_split.train.feature_names)
    m2, blob = checkpoint.load(path)
    np.testing.assert_array_equal(m.predict_output(iris_split.test.X),
                                  m2.predict_output(iris_split.test.X))
    assert blob["feature_names"] == list(iris_split.train.feature_names)
    checkpoint.save(m2, tmp_path / "again.json", iris_split.train.preprocessing,
                    iris_split.train.feature_names)
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def test_checkpoint_rejects_newer_version(tmp_path, iris_split):
    blob = checkpoint.to_dict(KNNClassifier().fit(iris_split.train.X, iris_split.train.y))
    blob["version"] = checkpoint.VERSION + 1
    with pytest.raises(ValueError, match="newer"):
        checkpoint.from_dict(blob)
