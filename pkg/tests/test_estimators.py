import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from encodenet.datasets import make_synthetic
from encodenet.errors import ConfigError
from encodenet.estimators import (
    ConvertingAutoencoder,
    ConvNetClassifier,
    EncodeNetClassifier,
    check_images,
    resolve_spec,
)
from encodenet.model_ir import output_shape

SPEC = """input 1 16 16
conv 8 3 1 same
relu
maxpool
conv 8 3 1 same
relu
maxpool
flatten
dense 10
softmax
"""


@pytest.fixture(scope="module")
def small():
    split = make_synthetic(8, 4, num_classes=4, noise=0.05, seed=0)
    names = np.array(["ant", "bee", "cat", "dog"])
    return split.train.images, names[split.train.labels], split.test.images


def test_resolve_spec_resizes_output():
    assert output_shape(resolve_spec("vgg8_mini", 4)) == (4,)
    assert output_shape(resolve_spec(SPEC)) == (10,)
    with pytest.raises(ConfigError):
        resolve_spec(42)


def test_check_images():
    assert check_images(np.zeros((2, 5, 5))).shape == (2, 1, 5, 5)
    with pytest.raises(ValueError):
        check_images(np.full((2, 1, 5, 5), 2.0))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 5)))


def test_unfitted_raises(small):
    X, _, _ = small
    with pytest.raises(NotFittedError):
        ConvNetClassifier(SPEC).predict(X)
    with pytest.raises(NotFittedError):
        ConvertingAutoencoder(spec=SPEC).transform(X)
    with pytest.raises(NotFittedError):
        EncodeNetClassifier(SPEC).predict(X)


def test_estimators_fit_predict(small):
    X, y, Xt = small
    clf = ConvNetClassifier(SPEC, epochs=3, batch_size=8).fit(X, y)
    proba = clf.predict_proba(Xt)
    assert proba.shape == (len(Xt), 4)
    np.testing.assert_allclose(proba.sum(1), 1, rtol=1e-5)
    assert set(clf.predict(Xt)) <= set(y)
    assert clf.embed(X).shape[0] == len(X)
    cae = ConvertingAutoencoder(clf, n_clusters=2, cae_epochs=2, batch_size=8).fit(X, y)
    assert cae.transform(Xt).shape == Xt.shape
    assert cae.encode(Xt).shape[0] == len(Xt)
    labels = np.searchsorted(clf.classes_, y)
    assert (labels[cae.pairs_.targets] == labels[cae.pairs_.inputs]).all()
    enc = EncodeNetClassifier(SPEC, n_clusters=2, epochs=2, cae_epochs=2, head_epochs=2, batch_size=8).fit(X, y)
    assert enc.network_.parameter_count() == clf.network_.parameter_count()
    assert enc.predict(Xt).shape == (len(Xt),)


def test_fit_is_deterministic(small):
    X, y, Xt = small
    a = ConvNetClassifier(SPEC, epochs=2, batch_size=8, random_state=3).fit(X, y).predict_proba(Xt)
    b = ConvNetClassifier(SPEC, epochs=2, batch_size=8, random_state=3).fit(X, y).predict_proba(Xt)
    np.testing.assert_array_equal(a, b)
