"""Empirical-Bayes random effects, prediction and goodness-of-fit diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import optimize, stats

from ._linalg import sym_sqrt
from .dependence import DependenceSpec, build_corr
from .exceptions import InvalidGrid, UnequalLengths, ValidationError
from .mixing import log_iphi_cdf, log_iphi_pdf, mahalanobis_cdf
from .simkit import draw_hierarchical

OUTLIER_LEVEL = 0.99


def _subject_parts(theta, subject):
    R = build_corr(theta.dependence, subject.t)
    Sigma = theta.sigma2 * R
    Z = subject.Z
    D = theta.D
    Psi = Sigma + Z @ D @ Z.T
    Psi_inv = np.linalg.inv(Psi)
    r = subject.y - subject.X @ theta.beta - theta.c * (Z @ theta.Delta)
    v = theta.F @ theta.lam
    a2 = 1.0 + theta.lam @ theta.lam - v @ Z.T @ Psi_inv @ Z @ v
    a = math.sqrt(a2)
    A = float(v @ Z.T @ Psi_inv @ r) / a
    d = float(r @ Psi_inv @ r)
    return Sigma, Psi, Psi_inv, r, v, a, A, d


def eb_random_effects(theta, subject):
    """Conditional mean ``E{b_i | y_i}`` at ``theta``."""
    n = subject.n
    Sigma, Psi, Psi_inv, r, v, a, A, d = _subject_parts(theta, subject)
    D = theta.D
    Z = subject.Z
    mu_b = theta.c * theta.Delta + D @ Z.T @ Psi_inv @ r
    # Lambda zeta = D zeta - D Z' Psi^-1 Z D zeta with D zeta = F lambda
    Lz = v - D @ Z.T @ Psi_inv @ Z @ v
    fam = theta.family
    tau_m1 = math.exp(float(log_iphi_pdf(fam, 0.5 * (n - 1), d, A) - log_iphi_cdf(fam, 0.5 * n, d, A)))
    return mu_b + tau_m1 / a * Lz


def eb_all(theta, data):
    """EB estimates for every subject, shape ``(n_subjects, q)``."""
    return np.array([eb_random_effects(theta, s) for s in data]).reshape(data.n_subjects, theta.q)


@dataclass
class PredictionBlock:
    """Partitioned quantities of a joint observed/future prediction."""

    mean: np.ndarray
    mu21: np.ndarray
    Psi22_1: np.ndarray
    upsilon1: np.ndarray
    upsilon2: np.ndarray
    upsilon_tilde: np.ndarray
    tau_tilde: float
    A_tilde: float


def predict_block(theta, subject, X_new, Z_new, t_new):
    """Everything needed for the conditional mean of future responses."""
    X_new = np.asarray(X_new, float).reshape(-1, theta.beta.size)
    m = X_new.shape[0]
    Z_new = np.asarray(Z_new, float).reshape(m, theta.q)
    t_new = np.asarray(t_new, float).ravel()
    if t_new.size != m:
        raise ValidationError("future design and times have different lengths")
    n = subject.n
    t_all = np.concatenate([subject.t, t_new])
    if np.unique(t_all).size != t_all.size:
        raise InvalidGrid("future times overlap observed times")
    order = np.argsort(t_all)
    R_sorted = build_corr(theta.dependence, t_all[order])
    back = np.argsort(order)
    R = R_sorted[np.ix_(back, back)]
    Zs = np.vstack([subject.Z, Z_new])
    Psi = theta.sigma2 * R + Zs @ theta.D @ Zs.T
    try:
        np.linalg.cholesky(Psi)
    except np.linalg.LinAlgError as exc:
        raise InvalidGrid("joint dispersion is not positive definite") from exc
    Psi_inv = np.linalg.inv(Psi)
    v = theta.F @ theta.lam
    a_star = math.sqrt(1.0 + theta.lam @ theta.lam - v @ Zs.T @ Psi_inv @ Zs @ v)
    ups = Psi_inv @ Zs @ v / a_star
    u1, u2 = ups[:n], ups[n:]
    P11, P12, P22 = Psi[:n, :n], Psi[:n, n:], Psi[n:, n:]
    P11_inv = np.linalg.inv(P11)
    P22_1 = P22 - P12.T @ P11_inv @ P12
    r = subject.y - subject.X @ theta.beta - theta.c * (subject.Z @ theta.Delta)
    mu21 = X_new @ theta.beta + theta.c * (Z_new @ theta.Delta) + P12.T @ P11_inv @ r
    scale = math.sqrt(1.0 + u2 @ P22_1 @ u2)
    ut = (u1 + P11_inv @ P12 @ u2) / scale
    A_t = float(ut @ r)
    d = float(r @ P11_inv @ r)
    fam = theta.family
    tau = math.exp(float(log_iphi_pdf(fam, 0.5 * (n - 1), d, A_t) - log_iphi_cdf(fam, 0.5 * n, d, A_t)))
    mean = mu21 + tau * (P22_1 @ u2) / scale
    return PredictionBlock(mean, mu21, P22_1, u1, u2, ut, tau, A_t)


def predict_future(theta, subject, X_new, Z_new, t_new):
    """Minimum-MSE predictor of future responses of ``subject``."""
    if np.size(t_new) == 0:
        return np.empty(0)
    return predict_block(theta, subject, X_new, Z_new, t_new).mean


# ---------------------------------------------------------------------------
# Mahalanobis distances
# ---------------------------------------------------------------------------


def mahalanobis(theta, data, level=OUTLIER_LEVEL):
    """Distances, their error/random-effect split and outlier flags.

    Returns a DataFrame with one row per subject.
    """
    rows = []
    D = theta.D
    q = theta.q
    D_inv = np.linalg.inv(D) if q else np.zeros((0, 0))
    for s in data:
        R = build_corr(theta.dependence, s.t)
        Sigma = theta.sigma2 * R
        Z = s.Z
        Psi = Sigma + Z @ D @ Z.T
        Psi_inv = np.linalg.inv(Psi)
        cD = theta.c * theta.Delta if q else np.zeros(0)
        r = s.y - s.X @ theta.beta - Z @ cD
        d = float(r @ Psi_inv @ r)
        mu_b = cD + D @ Z.T @ Psi_inv @ r
        e = s.y - s.X @ theta.beta - Z @ mu_b
        d_e = float(e @ np.linalg.solve(Sigma, e))
        g = mu_b - cD
        d_b = float(g @ D_inv @ g) if q else 0.0
        cdf = float(mahalanobis_cdf(theta.family, s.n, d))
        rows.append({"id": s.id, "n": s.n, "d": d, "d_e": d_e, "d_b": d_b, "cdf": cdf,
                     "outlier": cdf > level})
    out = pd.DataFrame(rows)
    # quantile of the reference law at the flagging level, per subject size
    out["q_level"] = [_cdf_quantile(theta.family, n, level) for n in out["n"]]
    return out


def _cdf_quantile(family, p, level):
    hi = max(10.0, 4.0 * p)
    while mahalanobis_cdf(family, p, hi) < level:
        hi *= 2.0
    return optimize.brentq(lambda r: mahalanobis_cdf(family, p, r) - level, 0.0, hi, xtol=1e-10)


@dataclass
class HealyResult:
    nominal: np.ndarray
    theoretical: np.ndarray
    ks_statistic: float
    band: float

    @property
    def within_band(self):
        return self.ks_statistic <= self.band

    def to_frame(self):
        return pd.DataFrame({"nominal": self.nominal, "theoretical": self.theoretical,
                             "lower": np.clip(self.nominal - self.band, 0, 1),
                             "upper": np.clip(self.nominal + self.band, 0, 1)})


def healy_from_distances(family, p, d, alpha=0.05):
    """Healy pairs ``(k/n, F(d_(k)))`` with a KS band of level ``1 - alpha``."""
    d = np.sort(np.asarray(d, float))
    n = d.size
    F = np.asarray(mahalanobis_cdf(family, p, d), float)
    k = np.arange(1, n + 1)
    ks = float(max(np.max(k / n - F), np.max(F - (k - 1) / n)))
    band = float(stats.kstwo.ppf(1.0 - alpha, n))
    return HealyResult(k / n, F, ks, band)


def healy_coordinates(theta, data, alpha=0.05):
    """Healy plot data for a fitted model (equal ``n_i`` required)."""
    sizes = data.sizes
    if np.unique(sizes).size != 1:
        raise UnequalLengths("Healy coordinates need equal numbers of measurements per subject")
    md = mahalanobis(theta, data)
    return healy_from_distances(theta.family, int(sizes[0]), md["d"].to_numpy(), alpha)


# ---------------------------------------------------------------------------
# residual autocorrelation
# ---------------------------------------------------------------------------


def standardized_residuals(theta, data):
    """``Upsilon_i^{-1/2} (y_i - X_i beta)`` for every subject."""
    k2 = theta.family.k2
    c = theta.c
    out = []
    for s in data:
        R = build_corr(theta.dependence, s.t)
        Z = s.Z
        Psi = theta.sigma2 * R + Z @ theta.D @ Z.T
        ZD = Z @ theta.Delta if theta.q else np.zeros(s.n)
        U = k2 * Psi - c**2 * np.outer(ZD, ZD)
        out.append(sym_sqrt(U, inverse=True) @ (s.y - s.X @ theta.beta))
    return out


def _acf_parts(resid, times, max_lag):
    # resid, times: (B, n) arrays sharing a size
    ti = np.rint(times).astype(int)
    diff = ti[:, None, :] - ti[:, :, None]
    prod = resid[:, :, None] * resid[:, None, :]
    num = np.zeros(max_lag + 1)
    cnt = np.zeros(max_lag + 1)
    for lag in range(max_lag + 1):
        mask = diff == lag
        num[lag] = prod[mask].sum()
        cnt[lag] = mask.sum()
    return num, cnt


def _acf(groups, max_lag):
    num = np.zeros(max_lag + 1)
    cnt = np.zeros(max_lag + 1)
    for resid, times in groups:
        a, b = _acf_parts(resid, times, max_lag)
        num += a
        cnt += b
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = num / cnt
    return avg / avg[0], cnt.astype(int)


def _check_discrete(data):
    for s in data:
        if not np.allclose(s.t, np.round(s.t), atol=1e-9, rtol=0):
            raise InvalidGrid("residual autocorrelations need discrete (integer) times")


def _default_lag(data):
    return int(max(np.ptp(s.t) for s in data))


def _residual_groups(theta, data):
    res = standardized_residuals(theta, data)
    out = []
    for batch in data.batches:
        out.append((np.array([res[i] for i in batch.index]), batch.T))
    return out


def residual_acf(theta, data, max_lag=None):
    """Empirical autocorrelation of standardized marginal residuals.

    Returns ``(rho, pair_counts)`` for lags ``0..max_lag``.
    """
    _check_discrete(data)
    if max_lag is None:
        max_lag = _default_lag(data)
    return _acf(_residual_groups(theta, data), max_lag)


def mc_envelope(theta, data, M=200, alpha=0.05, max_lag=None, seed=0):
    """Per-lag percentile envelope of the residual ACF under a CI analogue of ``theta``.

    Replicates reuse the fitted parameters with ``R_i = I`` and are not refitted.
    Returns ``(lower, upper)`` arrays for lags ``0..max_lag``.
    """
    _check_discrete(data)
    if max_lag is None:
        max_lag = _default_lag(data)
    ci = theta.replace(dependence=DependenceSpec.ci())
    rng = np.random.default_rng(seed)
    k2, c = ci.family.k2, ci.c
    prepared = []
    for batch in data.batches:
        Z = batch.Z
        Psi = ci.sigma2 * np.eye(batch.n) + Z @ ci.D @ np.swapaxes(Z, 1, 2)
        ZD = Z @ ci.Delta if ci.q else np.zeros((batch.size, batch.n))
        W = sym_sqrt(k2 * Psi - c**2 * ZD[:, :, None] * ZD[:, None, :], inverse=True)
        prepared.append((batch, W, batch.X @ ci.beta))
    sims = np.empty((M, max_lag + 1))
    for m in range(M):
        groups = []
        for batch, W, mean in prepared:
            # R = I, so the draw itself does not depend on the time values
            y = draw_hierarchical(ci, batch.X, batch.Z, np.arange(batch.n), rng)[-1]
            groups.append((np.einsum("bij,bj->bi", W, y - mean), batch.T))
        sims[m] = _acf(groups, max_lag)[0]
    lo = np.nanpercentile(sims, 100 * alpha / 2, axis=0)
    hi = np.nanpercentile(sims, 100 * (1 - alpha / 2), axis=0)
    return lo, hi


def acf_table(theta, data, M=200, alpha=0.05, max_lag=None, seed=0):
    """ACF with pair counts and envelope as a DataFrame."""
    rho, cnt = residual_acf(theta, data, max_lag)
    lo, hi = mc_envelope(theta, data, M, alpha, rho.size - 1, seed)
    out = pd.DataFrame({"lag": np.arange(rho.size), "acf": rho, "pairs": cnt, "lower": lo, "upper": hi})
    out["outside"] = (out["lag"] > 0) & ((out["acf"] < out["lower"]) | (out["acf"] > out["upper"]))
    return out
