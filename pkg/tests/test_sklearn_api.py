import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline

from quzo.data import gen_synthetic
from quzo.sklearn_api import OutlierQuantizer, QuantizerTransformer, QuZOClassifier


@pytest.fixture(scope="module")
def xy():
    ds = gen_synthetic("two-gaussians", 300, seed=0, dim=3, margin=3.0)
    return ds.inputs, np.where(ds.targets == 1, "yes", "no")


def test_classifier_fit_predict_score(xy):
    X, y = xy
    clf = QuZOClassifier(hidden=(8,), steps=300, queries=2).fit(X, y)
    assert list(clf.classes_) == ["no", "yes"] and clf.n_features_in_ == 3
    assert set(clf.predict(X)) <= {"no", "yes"}
    proba = clf.predict_proba(X)
    assert proba.shape == (300, 2) and np.allclose(proba.sum(axis=1), 1)
    assert clf.score(X, y) >= 0.9
    assert len(clf.log_.records) == 300


def test_classifier_is_deterministic(xy):
    X, y = xy
    a = QuZOClassifier(hidden=(4,), steps=30).fit(X, y).predict_proba(X)
    b = QuZOClassifier(hidden=(4,), steps=30).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_classifier_params_and_clone():
    clf = QuZOClassifier(lr=0.5, weight_format="INT4")
    assert clf.get_params()["lr"] == 0.5
    c = clone(clf).set_params(steps=7)
    assert c.steps == 7 and c.weight_format == "INT4"


def test_classifier_errors(xy):
    X, y = xy
    with pytest.raises(NotFittedError):
        QuZOClassifier().predict(X)
    clf = QuZOClassifier(hidden=(4,), steps=2).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :2])


def test_classifier_in_pipeline(xy):
    X, y = xy
    pipe = make_pipeline(QuantizerTransformer("INT8"), QuZOClassifier(hidden=(4,), steps=50))
    scores = cross_val_score(pipe, X, y, cv=2)
    assert scores.shape == (2,)


def test_quantizer_transformer_nearest():
    X = np.random.default_rng(0).standard_normal((50, 4)) * [1, 10, 100, 0.1]
    tr = QuantizerTransformer("INT8", granularity="per-channel").fit(X)
    Xq = tr.transform(X)
    step = np.max(np.abs(X), axis=0) / 127
    assert np.all(np.abs(Xq - X) <= step / 2 + 1e-12)
    assert tr.quantize(X).codes.dtype.kind == "i"
    with pytest.raises(ValueError):
        tr.transform(X[:, :2])


def test_quantizer_transformer_stochastic_is_seeded():
    X = np.random.default_rng(1).standard_normal((20, 3))
    a = QuantizerTransformer("INT4", rounding="stochastic", seed=3).fit_transform(X)
    b = QuantizerTransformer("INT4", rounding="stochastic", seed=3).fit_transform(X)
    c = QuantizerTransformer("INT4", rounding="stochastic", seed=4).fit_transform(X)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_outlier_quantizer():
    X = np.random.default_rng(2).standard_t(3, (100, 20))
    oq = OutlierQuantizer(alpha=0.02)
    out = oq.fit_transform(X)
    assert out.shape == X.shape
    assert 0.01 <= oq.encoded_.alpha <= 0.04
