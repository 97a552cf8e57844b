import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gruntlab.learn.svm import SvmModel, standardize_fit, svm_predict, svm_train


def blobs(n=40, d=5, margin=2.0, seed=0):
    rng = np.random.default_rng(seed)
    direction = np.zeros(d)
    direction[0] = 1.0
    y = np.repeat([0, 1], n // 2)
    X = rng.uniform(-1, 1, (n, d))
    X[:, 0] = np.where(y == 1, 1, -1) * (margin / 2 + rng.uniform(0, 1, n))
    return X, y


def test_standardizer_examples():
    s = standardize_fit(np.array([[0.0], [2.0]]))
    assert s.mean.tolist() == [1.0] and s.std.tolist() == [1.0]
    const = standardize_fit(np.array([[3.0, 1.0], [3.0, 2.0]]))
    assert np.all(const.apply(np.array([[3.0, 1.5]]))[:, 0] == 0)
    X = np.random.default_rng(0).normal(5, 3, (50, 5))
    Z = standardize_fit(X).apply(X)
    assert np.all(np.abs(Z.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(Z.std(axis=0) - 1) < 1e-10)


def test_separable_blobs_train_perfectly():
    X, y = blobs()
    model = svm_train(X, y, C=1.0, iterations=200)
    pred, _ = svm_predict(model, X)
    assert np.array_equal(pred, y)


def test_small_c_collapses_weights():
    X, y = blobs()
    norms = [np.linalg.norm(svm_train(X, y, C=c, iterations=50).weights) for c in (1e-2, 1e-4, 1e-7)]
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] < 1e-4


def test_determinism_bitwise():
    X, y = blobs(seed=3)
    a = svm_train(X, y, C=0.1, iterations=30, seed=5)
    b = svm_train(X, y, C=0.1, iterations=30, seed=5)
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


def test_tie_goes_to_class_zero_and_sign_flip():
    model = SvmModel(np.array([1.0, -1.0]), 0.0, 1.0)
    pred, margins = svm_predict(model, np.array([[2.0, 2.0], [3.0, 1.0], [1.0, 3.0]]))
    assert margins[0] == 0 and pred.tolist() == [0, 1, 0]
    X, y = blobs(seed=4)
    m = svm_train(X, y, C=1.0, iterations=50)
    flipped = SvmModel(-m.weights, -m.bias, 1.0)
    a, ma = svm_predict(m, X)
    b, mb = svm_predict(flipped, X)
    nonzero = ma != 0
    assert np.array_equal(a[nonzero], 1 - b[nonzero])
    np.testing.assert_array_equal(ma, -mb)


def test_objective_trend_on_convex_toy():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((80, 4))
    y = (X[:, 0] + 0.8 * rng.standard_normal(80) > 0).astype(int)  # not separable
    hist = svm_train(X, y, C=0.5, iterations=200, track_objective=True).objective_history
    avg = np.array(hist).reshape(20, 10).mean(axis=1)
    assert np.all(np.diff(avg) <= 1e-3 * avg[0])
    assert avg[-1] < avg[0]


def test_predict_applies_standardizer_and_checks_dimension():
    X, y = blobs()
    std = standardize_fit(X)
    m = svm_train(std.apply(X), y, C=1.0, iterations=50)
    m.standardizer = std
    pred, _ = svm_predict(m, X)
    assert np.array_equal(pred, y)
    with pytest.raises(ValueError):
        svm_predict(m, X[:, :3])


def test_rejects_single_class_and_bad_c():
    X, y = blobs()
    with pytest.raises(ValueError):
        svm_train(X, np.zeros(len(y), dtype=int), C=1.0)
    with pytest.raises(ValueError):
        svm_train(X, y, C=0.0)


@given(st.integers(0, 10 ** 6), st.floats(1e-3, 10))
@settings(max_examples=20, deadline=None)
def test_separable_property(seed, c):
    X, y = blobs(n=20, d=3, margin=4.0, seed=seed)
    m = svm_train(X, y, C=max(c, 0.1), iterations=100, seed=seed)
    assert np.array_equal(svm_predict(m, X)[0], y)
