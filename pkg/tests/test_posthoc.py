import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from oracles import posterior_moments
from smsnlmm.dependence import DependenceSpec, build_corr
from smsnlmm.estimate import fit
from smsnlmm.exceptions import InvalidGrid, UnequalLengths
from smsnlmm.mixing import MixingFamily, mahalanobis_cdf
from smsnlmm.model import LongitudinalDataset, SubjectBlock, ThetaParams
from smsnlmm.posthoc import (
    acf_table,
    eb_all,
    eb_random_effects,
    healy_coordinates,
    healy_from_distances,
    mahalanobis,
    mc_envelope,
    predict_block,
    predict_future,
    residual_acf,
    standardized_residuals,
)
from smsnlmm.simkit import generate, study1

FAMILIES = {
    "SN": MixingFamily.sn(),
    "ST": MixingFamily.st(4.0),
    "SSL": MixingFamily.ssl(1.7),
    "SCN": MixingFamily.scn(0.25, 0.3),
}

T = np.array([1.0, 2.0, 3.0])
X = np.column_stack([np.ones(3), [0.3, 1.1, 1.8]])
Z = np.ones((3, 1))
Y = np.array([1.9, 3.4, 4.6])
DEP = DependenceSpec.ar((0.5,))
SUBJECT = SubjectBlock(1, Y, X, Z, T)


def _theta(name, lam=2.0, dep=DEP):
    return ThetaParams.from_D([1.0, 1.5], 0.4, [[1.2]], [lam], FAMILIES[name], dep)


def test_eb_gaussian_limit():
    th = ThetaParams.from_D([1.0, 1.5], 0.4, [[1.2, 0.2], [0.2, 0.5]], [0.0, 0.0], MixingFamily.sn(), DEP)
    Z2 = np.column_stack([np.ones(3), T])
    s = SubjectBlock(1, Y, X, Z2, T)
    Psi = 0.4 * build_corr(DEP, T) + Z2 @ th.D @ Z2.T
    np.testing.assert_allclose(eb_random_effects(th, s), th.D @ Z2.T @ np.linalg.solve(Psi, Y - X @ th.beta),
                               atol=1e-13)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_eb_zero_design_uses_prior(name):
    s = SubjectBlock(1, Y, X, np.zeros((3, 1)), T)
    th = _theta(name)
    b = eb_random_effects(th, s)
    # y informs b only through the shared scale U; for SN the centred prior mean remains
    if name == "SN":
        np.testing.assert_allclose(b, 0.0, atol=1e-12)
    params = dict(beta=[1.0, 1.5], sigma2=0.4, D=1.2, lam=2.0, family=name, nu=FAMILIES[name].nu)
    mc = posterior_moments(params, Y, X, np.zeros((3, 1)), build_corr(DEP, T), 400_000, np.random.default_rng(8))
    assert abs(b[0] - mc["b"][0]) < 4 * mc["b"][1] + 1e-12
    th0 = _theta(name, lam=0.0)
    np.testing.assert_allclose(eb_random_effects(th0, s), 0.0, atol=1e-14)


def test_eb_all_shape():
    data = generate(study1("SN", 7), 0)
    assert eb_all(study1().theta, data).shape == (7, 1)


def test_prediction_gaussian_limit():
    th = _theta("SN", lam=0.0)
    t_new = np.array([4.0, 6.0])
    X_new = np.column_stack([np.ones(2), [0.5, 1.4]])
    Z_new = np.ones((2, 1))
    t_all = np.r_[T, t_new]
    Zs = np.vstack([Z, Z_new])
    Psi = 0.4 * build_corr(DEP, t_all) + Zs @ th.D @ Zs.T
    mu1, mu2 = X @ th.beta, X_new @ th.beta
    expect = mu2 + Psi[3:, :3] @ np.linalg.solve(Psi[:3, :3], Y - mu1)
    np.testing.assert_allclose(predict_future(th, SUBJECT, X_new, Z_new, t_new), expect, atol=1e-13)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_prediction_matches_hierarchical_monte_carlo(name):
    th = _theta(name)
    t_new = np.array([4.0])
    X_new = np.array([[1.0, 0.9]])
    Z_new = np.ones((1, 1))
    pred = predict_future(th, SUBJECT, X_new, Z_new, t_new)[0]
    params = dict(beta=[1.0, 1.5], sigma2=0.4, D=1.2, lam=2.0, family=name, nu=FAMILIES[name].nu)
    R_full = build_corr(DEP, np.r_[T, t_new])
    mc = posterior_moments(params, Y, X, Z, R_full[:3, :3], 1_000_000, np.random.default_rng(5),
                           X_new=X_new, Z_new=Z_new, R_full=R_full)
    est, se = mc["y_new"]
    assert abs(pred - est) < 4 * se, (pred, est, se)


def test_prediction_block_pieces():
    th = _theta("ST")
    blk = predict_block(th, SUBJECT, [[1.0, 0.2]], [[1.0]], [5.0])
    assert np.linalg.eigvalsh(blk.Psi22_1).min() > 0
    assert blk.tau_tilde > 0
    # the combined skewness projection reproduces the observed-data A
    sub = ThetaParams.from_D([1.0, 1.5], 0.4, [[1.2]], [2.0], FAMILIES["ST"], DEP)
    from smsnlmm.model import marginal_moments

    assert blk.A_tilde == pytest.approx(marginal_moments(sub, SUBJECT).A, rel=1e-10)


def test_prediction_interleaved_times():
    th = _theta("SN", lam=0.0, dep=DependenceSpec.dec(0.5, 1.0))
    s = SubjectBlock(1, Y, X, Z, [0.0, 2.0, 3.0])
    pred = predict_future(th, s, [[1.0, 0.7]], [[1.0]], [1.0])
    t_all = np.array([0.0, 1.0, 2.0, 3.0])
    Zs = np.ones((4, 1))
    Psi = 0.4 * build_corr(th.dependence, t_all) + Zs @ th.D @ Zs.T
    obs = [0, 2, 3]
    expect = th.beta @ [1.0, 0.7] + Psi[1, obs] @ np.linalg.solve(Psi[np.ix_(obs, obs)], Y - X @ th.beta)
    assert pred[0] == pytest.approx(expect, abs=1e-12)


def test_prediction_degenerate_and_errors():
    th = _theta("SN")
    assert predict_future(th, SUBJECT, np.zeros((0, 2)), np.zeros((0, 1)), []).size == 0
    with pytest.raises(InvalidGrid):
        predict_future(th, SUBJECT, [[1.0, 0.0]], [[1.0]], [2.0])
    with pytest.raises(InvalidGrid):
        predict_future(th, SUBJECT, [[1.0, 0.0]], [[1.0]], [4.5])


# --- Mahalanobis distances --------------------------------------------------------


@pytest.mark.parametrize("name", list(FAMILIES))
def test_mahalanobis_decomposition(name):
    sc = study1(name, 30)
    data = generate(sc, 0)
    md = mahalanobis(sc.theta, data)
    np.testing.assert_allclose(md["d"], md["d_e"] + md["d_b"], rtol=0, atol=1e-8 * md["d"].max())
    assert ((md["cdf"] > 0.99) == md["outlier"]).all()
    np.testing.assert_allclose(mahalanobis_cdf(sc.theta.family, 10, md["q_level"].iloc[0]), 0.99, atol=1e-9)


def test_mahalanobis_no_random_effects():
    rng = np.random.default_rng(1)
    subs = [SubjectBlock(i, rng.normal(size=4), np.ones((4, 1)), np.zeros((4, 0)), np.arange(4.0))
            for i in range(5)]
    data = LongitudinalDataset(subs)
    th = ThetaParams([0.2], 0.7, np.zeros((0, 0)), np.zeros(0))
    md = mahalanobis(th, data)
    for k, s in enumerate(data):
        assert md["d"][k] == pytest.approx(np.sum((s.y - 0.2) ** 2) / 0.7, rel=1e-12)
    np.testing.assert_array_equal(md["d_b"], 0.0)


def test_mahalanobis_outlier_rate_calibrated():
    sc = study1("SN", 500)
    rates = [mahalanobis(sc.theta, generate(sc, r))["outlier"].mean() for r in range(10)]
    # 5000 subjects in total at a nominal 1% rate
    assert abs(np.mean(rates) - 0.01) < 3 * np.sqrt(0.01 * 0.99 / 5000)


# --- Healy plot ---------------------------------------------------------------------


@given(n=st.integers(5, 200))
def test_healy_calibrated_distances_on_diagonal(n):
    fam = MixingFamily.sn()
    p = 4
    k = np.arange(1, n + 1)
    d = stats.chi2.ppf(k / n - 0.5 / n, p)
    res = healy_from_distances(fam, p, d)
    np.testing.assert_allclose(res.theoretical, res.nominal - 0.5 / n, atol=1e-10)
    assert res.within_band


def test_healy_requires_equal_lengths():
    data = LongitudinalDataset([SubjectBlock(1, [1.0, 2.0], np.ones((2, 1)), np.ones((2, 1)), [1.0, 2.0]),
                                SubjectBlock(2, [1.0], np.ones((1, 1)), np.ones((1, 1)), [1.0])])
    th = ThetaParams.from_D([0.0], 1.0, [[1.0]], [1.0])
    with pytest.raises(UnequalLengths):
        healy_coordinates(th, data)


def test_healy_well_specified_within_band():
    sc = study1("SN", 100)
    inside = [healy_coordinates(sc.theta, generate(sc, r)).within_band for r in range(20)]
    assert np.mean(inside) >= 0.8


def test_healy_detects_heavy_tails():
    sc = study1("ST", 100).with_(family="ST", nu=[4.0])
    sn_theta = sc.theta.replace(family=MixingFamily.sn())
    outside = []
    for r in range(10):
        data = generate(sc, r)
        res = fit(data, theta0=sn_theta)
        outside.append(not healy_coordinates(res.theta, data).within_band)
    assert np.mean(outside) >= 0.8


def test_healy_frame():
    sc = study1("SN", 20)
    frame = healy_coordinates(sc.theta, generate(sc, 0)).to_frame()
    assert list(frame.columns) == ["nominal", "theoretical", "lower", "upper"]
    assert (frame["lower"] <= frame["upper"]).all()


# --- residual ACF -------------------------------------------------------------------


def test_standardized_residuals_have_unit_covariance():
    sc = study1("ST", 20000)
    data = generate(sc, 0)
    res = np.array(standardized_residuals(sc.theta, data))
    np.testing.assert_allclose(np.cov(res.T), np.eye(10), atol=0.06)


def test_acf_lag_zero_and_white_noise():
    sc = study1("SN", 200)
    th = sc.theta.replace(dependence=DependenceSpec.ci())
    data = generate(sc.with_(theta=th), 0)
    rho, cnt = residual_acf(th, data)
    assert rho[0] == 1.0
    assert rho.size == 10 and cnt[1] == 200 * 9
    assert np.all(np.abs(rho[1:]) < 3 / np.sqrt(cnt[1:]))


def test_acf_pair_counts_with_gaps():
    subs = [SubjectBlock(1, [1.0, -1.0, 0.5], np.ones((3, 1)), np.zeros((3, 0)), [1.0, 2.0, 5.0])]
    rho, cnt = residual_acf(ThetaParams([0.0], 1.0, np.zeros((0, 0)), np.zeros(0)), LongitudinalDataset(subs))
    np.testing.assert_array_equal(cnt, [3, 1, 0, 1, 1])
    assert rho[1] == pytest.approx(-1.0 / (2.25 / 3))
    assert np.isnan(rho[2])


def test_acf_requires_discrete_times():
    data = LongitudinalDataset([SubjectBlock(1, [1.0, 2.0], np.ones((2, 1)), np.ones((2, 1)), [0.0, 0.5])])
    th = ThetaParams.from_D([0.0], 1.0, [[1.0]], [1.0])
    with pytest.raises(InvalidGrid):
        residual_acf(th, data)
    with pytest.raises(InvalidGrid):
        mc_envelope(th, data, M=5)


def test_envelope_covers_ci_data():
    sc = study1("SN", 100)
    th = sc.theta.replace(dependence=DependenceSpec.ci())
    flagged = []
    for r in range(20):
        data = generate(sc.with_(theta=th), r)
        tab = acf_table(th, data, M=100, seed=r)
        flagged.append(tab["outside"].sum())
    # roughly 5% of the nine lags fall outside by chance
    assert np.mean(flagged) < 1.5


def test_envelope_flags_ar1_data_fitted_ci():
    truth = study1("SN", 100).theta.replace(dependence=DependenceSpec.ar((0.6,)))
    sc = study1("SN", 100).with_(theta=truth)
    hits = []
    for r in range(10):
        data = generate(sc, r)
        res = fit(data, MixingFamily.sn(), DependenceSpec.ci())
        hits.append(acf_table(res.theta, data, M=100, seed=r)["outside"].any())
    assert np.mean(hits) >= 0.8


def test_envelope_deterministic_and_ordered():
    sc = study1("SN", 30)
    data = generate(sc, 0)
    lo, hi = mc_envelope(sc.theta, data, M=50, seed=3)
    lo2, hi2 = mc_envelope(sc.theta, data, M=50, seed=3)
    np.testing.assert_array_equal(lo, lo2)
    assert np.all(lo <= hi) and lo[0] == hi[0] == 1.0
