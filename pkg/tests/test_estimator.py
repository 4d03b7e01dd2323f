import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from smsnlmm import SmsnLmmRegressor
from smsnlmm.dependence import DependenceSpec
from smsnlmm.estimate import FitOptions, fit
from smsnlmm.exceptions import ValidationError
from smsnlmm.mixing import MixingFamily
from smsnlmm.simkit import generate, study1


def _long(data):
    X = np.vstack([s.X for s in data])
    y = np.concatenate([s.y for s in data])
    g = np.concatenate([[s.id] * s.n for s in data])
    t = np.concatenate([s.t for s in data])
    return X, y, g, t


@pytest.fixture(scope="module")
def fitted():
    data = generate(study1("SN", 40), 0)
    X, y, g, t = _long(data)
    est = SmsnLmmRegressor(dependence="ar:2", max_iter=80).fit(X, y, groups=g, times=t)
    return est, data, (X, y, g, t)


def test_params_and_clone():
    est = SmsnLmmRegressor(family="st", dependence="dec", tol=1e-6)
    params = est.get_params()
    assert params["family"] == "st" and params["tol"] == 1e-6
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(max_iter=5)
    assert est.max_iter == 5


def test_fit_matches_functional_api(fitted):
    est, data, _ = fitted
    ref = fit(data, MixingFamily.sn(), DependenceSpec.parse("ar:2"), FitOptions(max_iter=80))
    res = est.result_
    assert res.loglik == ref.loglik and res.iterations == ref.iterations
    assert est.coef_.shape == (2,) and est.n_features_in_ == 2
    assert est.inference_ is not None and est.inference_.se is not None


def test_predict(fitted):
    est, data, (X, y, g, t) = fitted
    pop = est.predict(X)
    np.testing.assert_allclose(pop, X @ est.coef_)
    subj = est.predict(X, groups=g)
    b = np.array([est.random_effects_[k][0] for k in g])
    np.testing.assert_allclose(subj, X @ est.coef_ + b)
    assert np.mean((y - subj) ** 2) < np.mean((y - pop) ** 2)
    assert -1.0 < est.score(X, y) <= 1.0


def test_predict_future(fitted):
    est, data, _ = fitted
    out = est.predict_future(1, [[1.0, 0.5], [1.0, 1.0]], [11, 12])
    assert out.shape == (2,) and np.all(np.isfinite(out))
    with pytest.raises(ValidationError):
        est.predict_future(999, [[1.0, 0.5]], [11])


def test_unfitted_and_shape_errors(fitted):
    with pytest.raises(NotFittedError):
        SmsnLmmRegressor().predict(np.ones((2, 2)))
    est = fitted[0]
    with pytest.raises(ValidationError):
        est.predict(np.ones((3, 5)))
    with pytest.raises(ValidationError):
        SmsnLmmRegressor(family="gauss").fit(np.ones((4, 1)), np.arange(4.0), [1, 1, 2, 2])


def test_default_times_are_row_order():
    data = generate(study1("SN", 15), 0)
    X, y, g, _ = _long(data)
    est = SmsnLmmRegressor(max_iter=20, compute_se=False).fit(X, y, groups=g)
    np.testing.assert_array_equal(est.data_[0].t, np.arange(1.0, 11.0))
    assert est.inference_ is None
