import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from realsmilenet.estimator import RealSmileClassifier, check_video, check_videos
from realsmilenet.exceptions import ArgumentError, InputError, ShapeError

SMALL = dict(resolution=8, fpn_channels=(3, 4), convlstm_hidden=4, head_conv_channels=3, head_conv_kernel=1)


@pytest.fixture
def toy(rng):
    X = [rng.random((2 + i % 4, 3, 8, 8)) for i in range(8)]
    return X, np.array([0, 1] * 4)


def test_get_params_and_clone():
    est = RealSmileClassifier(epochs=7, **SMALL)
    params = est.get_params()
    assert params["epochs"] == 7 and params["resolution"] == 8
    assert clone(est).get_params() == params
    est.set_params(lr=0.01)
    assert est.lr == 0.01


def test_fit_predict_transform(toy):
    X, y = toy
    est = RealSmileClassifier(epochs=2, batch_videos=4, **SMALL).fit(X, y, eval_set=(X[:2], y[:2]))
    proba = est.predict_proba(X)
    assert proba.shape == (8, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X)) <= {0, 1}
    assert est.transform(X).shape == (8, est.model_config().embedding_dim)
    assert 0 <= est.score(X, y) <= 1
    assert any(r.split == "val" for r in est.history_)


def test_fit_is_deterministic(toy):
    X, y = toy
    a = RealSmileClassifier(epochs=2, batch_videos=4, **SMALL).fit(X, y).predict_proba(X)
    b = RealSmileClassifier(epochs=2, batch_videos=4, **SMALL).fit(X, y).predict_proba(X)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_round_trip(toy):
    X, y = toy
    est = RealSmileClassifier(epochs=1, batch_videos=4, **SMALL).fit(X, y)
    again = RealSmileClassifier.from_checkpoint(est.to_checkpoint())
    np.testing.assert_array_equal(again.predict_proba(X), est.predict_proba(X))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        RealSmileClassifier(**SMALL).predict([np.zeros((2, 3, 8, 8))])


def test_validation_helpers(rng):
    assert check_video(rng.random((2, 3, 8, 8))).dtype == np.float32
    with pytest.raises(ShapeError):
        check_video(rng.random((2, 8, 8)))
    with pytest.raises(ShapeError):
        check_video(rng.random((2, 3, 8, 6)))
    with pytest.raises(ShapeError):
        check_video(rng.random((2, 1, 8, 8)), in_channels=3)
    with pytest.raises(InputError):
        check_video(rng.random((1, 3, 8, 8)))
    with pytest.raises(InputError):
        check_video(np.full((2, 3, 8, 8), np.nan))
    with pytest.raises(ShapeError):
        check_videos(rng.random((2, 3, 8, 8)))
    with pytest.raises(InputError):
        check_videos([])


def test_bad_labels(toy):
    X, _ = toy
    est = RealSmileClassifier(epochs=1, **SMALL)
    with pytest.raises(ArgumentError):
        est.fit(X, [2] * 8)
    with pytest.raises(ShapeError):
        est.fit(X, [0, 1])
