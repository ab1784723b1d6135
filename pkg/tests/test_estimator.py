import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flexio.estimator import FlexibleDemandIO, check_day_arrays
from flexio.metrics import DEFAULT_LEVELS


def _arrays(ds):
    X = np.array([d.features for d in ds.days])
    return X, ds.demand(), ds.generation()


@pytest.fixture(scope="module")
def fitted(small_fit):
    X, y, g = _arrays(small_fit["train"])
    est = FlexibleDemandIO(t_max=2, day_max_nodes=200)
    est.fit(X, y, gen=g, prices=small_fit["prices"], costs=small_fit["costs"])
    return est


def test_estimator_matches_functional_fit(fitted, small_fit):
    np.testing.assert_array_equal(fitted.result_.d_bl, small_fit["result"].d_bl)
    assert fitted.result_.training_loss == small_fit["result"].training_loss
    assert fitted.n_features_in_ == 3 and fitted.horizon_ == 4


def test_predict_shapes_and_score(fitted, small_fit):
    X, y, g = _arrays(small_fit["test"])
    kw = dict(gen=g, prices=small_fit["prices"], costs=small_fit["costs"])
    pred = fitted.predict(X, **kw)
    assert pred.shape == (3, 4)
    assert fitted.score(X, y, **kw) == pytest.approx(-np.abs(pred - y).mean())
    Q = fitted.predict_quantiles(X, **kw)
    assert Q.shape == (3, len(DEFAULT_LEVELS), 4)
    parts = fitted.decompose(X, **kw)
    np.testing.assert_array_equal(pred[0], parts[0].net)


def test_params_round_trip_and_clone():
    est = FlexibleDemandIO(t_max=3, alpha=1.5, solver_mode="exact")
    params = est.get_params()
    assert params["t_max"] == 3 and params["solver_mode"] == "exact"
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(alpha=0.0)
    assert twin.alpha == 0.0 and est.alpha == 1.5


def test_unfitted_and_bad_inputs(fitted, small_fit):
    with pytest.raises(NotFittedError):
        FlexibleDemandIO().predict(np.zeros((1, 4, 3)), prices=small_fit["prices"], costs=small_fit["costs"])
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((1, 5, 3)), prices=small_fit["prices"], costs=small_fit["costs"])
    with pytest.raises(ValueError, match="prices is required"):
        FlexibleDemandIO().fit(np.zeros((2, 4, 1)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        check_day_arrays(np.zeros((2, 4, 1)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        check_day_arrays(np.full((2, 4, 1), np.nan))
