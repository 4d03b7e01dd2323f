import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smsnlmm.dependence import DependenceSpec
from smsnlmm.estimate import FitOptions, fit
from smsnlmm.exceptions import NotNested
from smsnlmm.inference import (
    inference_report,
    lr_test,
    observed_information,
    score,
    score_components,
    skewness_lrt,
    standard_errors,
)
from smsnlmm.mixing import MixingFamily
from smsnlmm.model import LongitudinalDataset, SubjectBlock, ThetaParams, marginal_loglik
from smsnlmm.simkit import generate, study1

FAMILIES = {
    "SN": MixingFamily.sn(),
    "ST": MixingFamily.st(5.0),
    "SSL": MixingFamily.ssl(2.2),
    "SCN": MixingFamily.scn(0.2, 0.35),
}
DEPS = {
    "CI": DependenceSpec.ci(),
    "AR2": DependenceSpec.ar((0.45, -0.25)),
    "DEC": DependenceSpec.dec(0.55, 0.8),
}


def random_instance(seed, family, dependence, q=2):
    rng = np.random.default_rng(seed)
    subs = []
    for i in range(6):
        n = 3 + i % 3
        t = np.sort(rng.choice(np.arange(1, 10), n, replace=False)).astype(float)
        X = np.column_stack([np.ones(n), rng.normal(size=n), t / 5])
        Z = np.column_stack([np.ones(n), t / 5])[:, :q]
        subs.append(SubjectBlock(i, rng.normal(size=n) * 1.5 + 1.0, X, Z, t))
    A = rng.normal(size=(q, q)) * 0.4
    D = A @ A.T + 0.6 * np.eye(q)
    th = ThetaParams.from_D(rng.normal(size=3), rng.uniform(0.3, 1.5), D, rng.normal(size=q) * 2, family,
                            dependence)
    return th, LongitudinalDataset(subs)


def fd_score(theta, data, rel_step=1e-6):
    x = theta.theta_star()
    out = np.empty_like(x)
    for k in range(x.size):
        h = rel_step * max(abs(x[k]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        out[k] = (marginal_loglik(theta.with_theta_star(xp), data)
                  - marginal_loglik(theta.with_theta_star(xm), data)) / (2 * h)
    return out


def score_rel_error(theta, data):
    a = score(theta, data)
    f = fd_score(theta, data)
    return np.abs(a - f) / np.maximum(np.abs(f), 1.0)


@pytest.mark.parametrize("fam", ["SN", "ST", "SCN"])
@pytest.mark.parametrize("dep", list(DEPS))
@pytest.mark.parametrize("seed", [0, 1])
def test_score_matches_finite_differences(fam, dep, seed):
    th, data = random_instance(seed, FAMILIES[fam], DEPS[dep])
    err = score_rel_error(th, data)
    assert err.max() < 1e-4, dict(zip(th.theta_star_names(), err))


@pytest.mark.parametrize("dep", list(DEPS))
def test_score_matches_finite_differences_ssl(dep):
    th, data = random_instance(3, FAMILIES["SSL"], DEPS[dep])
    assert score_rel_error(th, data).max() < 1e-3


@pytest.mark.parametrize("fam", list(FAMILIES))
def test_score_q1_and_ar1(fam):
    th, data = random_instance(5, FAMILIES[fam], DependenceSpec.ar((-0.4,)), q=1)
    assert score_rel_error(th, data).max() < (1e-3 if fam == "SSL" else 1e-4)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000))
def test_score_property_random_instances(seed):
    th, data = random_instance(seed, FAMILIES["ST"], DEPS["DEC"])
    assert score_rel_error(th, data).max() < 1e-4


def test_score_is_additive_over_subjects():
    th, data = random_instance(2, FAMILIES["ST"], DEPS["AR2"])
    S = score_components(th, data)
    np.testing.assert_allclose(S.sum(axis=0), score(th, data), atol=1e-12)
    np.testing.assert_allclose(S[2], score(th, data[2]), atol=1e-12)


def test_score_near_zero_at_converged_fit():
    sc = study1("SN", 100)
    data = generate(sc, 0)
    res = fit(data, theta0=sc.theta, options=FitOptions(tol=1e-12, max_iter=3000))
    assert res.converged
    assert np.abs(score(res.theta, data)).max() < 1e-3 * np.sqrt(data.n_obs)


def test_information_symmetric_psd_and_additive():
    th, data = random_instance(4, FAMILIES["SCN"], DEPS["DEC"])
    info = observed_information(th, data)
    np.testing.assert_allclose(info, info.T, atol=1e-12)
    assert np.linalg.eigvalsh(info).min() > -1e-8
    doubled = LongitudinalDataset(list(data) + [SubjectBlock(f"{s.id}b", s.y, s.X, s.Z, s.t) for s in data])
    np.testing.assert_allclose(observed_information(th, doubled), 2 * info, rtol=1e-12)


def test_standard_errors_and_report():
    sc = study1("SN", 100)
    data = generate(sc, 0)
    res = fit(data, theta0=sc.theta)
    se = standard_errors(res.theta, data)
    cov = np.linalg.inv(observed_information(res.theta, data))
    np.testing.assert_allclose(se, np.sqrt(np.diag(cov)), rtol=1e-12)
    rep = inference_report(res.theta, data)
    np.testing.assert_allclose(rep.se, se, rtol=1e-12)
    assert any("skewness" in w for w in rep.warnings)
    ci = rep.wald_ci()
    assert np.all(ci[:, 0] < rep.estimates) and np.all(rep.estimates < ci[:, 1])
    # beta SEs are of the order of the sampling spread at this size
    assert 0.005 < se[1] < 0.1


def test_fixed_lambda_report_drops_lambda():
    data = generate(study1("SN", 40), 0)
    res = fit(data, MixingFamily.sn(), DependenceSpec.ci(), FitOptions(fix_lambda_zero=True))
    rep = inference_report(res.theta, data, fixed_lambda=True)
    assert np.isnan(rep.se[-1]) and np.all(np.isfinite(rep.se[:-1]))


def test_singular_information_reported_as_absent():
    # a single subject cannot identify all parameters
    th, data = random_instance(0, FAMILIES["SN"], DEPS["AR2"])
    rep = inference_report(th, data.subset([0]))
    assert rep.se is None
    assert any("unavailable" in w for w in rep.warnings)


# --- likelihood-ratio test --------------------------------------------------------


def test_lrt_identical_models():
    data = generate(study1("SN", 30), 0)
    res = fit(data, MixingFamily.sn(), DependenceSpec.ci(), FitOptions(max_iter=50))
    out = lr_test(res, res)
    assert out.statistic == 0.0 and out.p_value == 1.0


def test_lrt_not_nested():
    data = generate(study1("SN", 30), 0)
    full = fit(data, MixingFamily.sn(), DependenceSpec.ci(), FitOptions(max_iter=3))
    better = fit(data, MixingFamily.sn(), DependenceSpec.ci())
    restricted = better.__class__(**{**better.__dict__, "n_params": better.n_params - 1})
    with pytest.raises(NotNested):
        lr_test(full, restricted)


def test_lrt_large_statistic_has_small_p():
    from dataclasses import replace

    data = generate(study1("SN", 30), 0)
    res = fit(data, MixingFamily.sn(), DependenceSpec.ci(), FitOptions(max_iter=50))
    restricted = replace(res, loglik=res.loglik - 35.832 / 2, n_params=res.n_params - 2)
    out = lr_test(res, restricted)
    assert out.df == 2 and out.statistic == pytest.approx(35.832)
    assert out.p_value < 1e-7


def test_skewness_lrt_detects_skew_data():
    sc = study1("SN", 150)
    data = generate(sc.with_(theta=sc.theta.replace(dependence=DependenceSpec.ci())), 0)
    out, full, restricted = skewness_lrt(data, MixingFamily.sn(), DependenceSpec.ci())
    assert out.statistic >= 0 and out.df == 1
    assert out.p_value < 0.01
    np.testing.assert_array_equal(restricted.theta.lam, 0.0)
