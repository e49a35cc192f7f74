import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mcseg import scenegen
from mcseg.estimator import MCDSegmenter


@pytest.fixture(scope="module")
def arrays():
    src = [scenegen.generate_scene([0, i], scenegen.DomainParams(), (32, 32)) for i in range(4)]
    tgt = [scenegen.generate_scene([1, i], scenegen.default_target_params(), (32, 32)) for i in range(3)]
    X = np.stack([np.concatenate([s.rgb, s.hha]) for s in src])
    Xt = np.stack([np.concatenate([s.rgb, s.hha]) for s in tgt])
    y = np.stack([s.labels for s in src])
    b = np.stack([s.boundaries for s in src])
    return X, y, Xt, b


def test_fit_predict_shapes(arrays):
    X, y, Xt, _ = arrays
    est = MCDSegmenter(width=4, n_iter=5, num_classes=6).fit(X[:, :3], y, Xt[:, :3])
    proba = est.predict_proba(Xt[:, :3])
    assert proba.shape == (3, 6, 32, 32)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)
    pred = est.predict(Xt[:, :3])
    np.testing.assert_array_equal(pred, proba.argmax(axis=1))
    assert 0.0 <= est.score(X[:, :3], y) <= 1.0


def test_fit_is_deterministic_and_clone_keeps_params(arrays):
    X, y, Xt, _ = arrays
    a = MCDSegmenter(width=4, n_iter=4, random_state=3).fit(X, y, Xt)
    b = clone(a).fit(X, y, Xt)
    assert b.get_params() == a.get_params()
    np.testing.assert_array_equal(a.predict_proba(Xt), b.predict_proba(Xt))


def test_multitask_and_fusion_variants(arrays):
    X, y, Xt, b = arrays
    MCDSegmenter(tasks="triple", width=4, n_iter=2).fit(X, y, Xt, boundaries=b).predict(Xt)
    MCDSegmenter(fusion="score_gate", width=4, n_iter=2).fit(X, y, Xt).predict(Xt)
    MCDSegmenter(width=4, n_iter=2, adapt=False).fit(X[:, :3], y).predict(X[:, :3])


def test_input_validation(arrays):
    X, y, Xt, _ = arrays
    est = MCDSegmenter(width=4, n_iter=1)
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(ValueError, match="X_target"):
        est.fit(X, y)
    with pytest.raises(ValueError, match="channels"):
        est.fit(X[:, :4], y, Xt[:, :4])
    with pytest.raises(ValueError, match="multiples of 8"):
        est.fit(X[:, :, :30, :30], y[:, :30, :30], Xt[:, :, :30, :30])
    with pytest.raises(ValueError, match="shape"):
        est.fit(X, y[:2], Xt)
    with pytest.raises(ValueError, match="6 channels"):
        MCDSegmenter(fusion="early", width=4, n_iter=1).fit(X[:, :3], y, Xt[:, :3])
    with pytest.raises(ValueError, match="boundary"):
        MCDSegmenter(tasks="triple", width=4, n_iter=1).fit(X, y, Xt)
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        est.fit(bad, y, Xt)
