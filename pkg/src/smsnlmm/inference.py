"""Score vector, observed information, standard errors and likelihood-ratio tests.

The subject log-likelihood is

    l_i = log 2 - (n_i/2) log 2 pi - log|Psi_i| / 2 + log I^Phi(n_i/2; d_i, A_i),

so every score component follows from the derivatives of ``log|Psi_i|``,
``d_i`` and ``A_i``:

    s_i = -dlog|Psi_i| / 2 + [I^phi((n_i+1)/2) dA_i - I^Phi(n_i/2+1) dd_i / 2] / I^Phi(n_i/2).

Parameters are ordered ``theta* = (beta, sigma2, phi, alpha, lambda)`` with
``alpha`` the row-major upper triangle of ``F = D^{1/2}``. ``nu`` is not part
of ``theta*``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from ._linalg import vech_basis
from .dependence import corr_derivatives
from .estimate import FitOptions, fit, information_criteria
from .exceptions import NotNested, SingularInformation
from .mixing import log_iphi_cdf, log_iphi_pdf
from .model import LongitudinalDataset, batch_marginal, corr_stack

LRT_SLACK = 1e-6


@dataclass
class _Direction:
    # derivative of (Psi, r, v = F lambda, lambda) along one coordinate of theta*
    dPsi: np.ndarray | None
    dr: np.ndarray | None
    dv: np.ndarray | None
    dlam: np.ndarray | None


def _directions(theta, batch, R):
    """Derivative directions for every coordinate of ``theta*`` on one batch."""
    B, n = batch.y.shape
    q = theta.q
    Z = batch.Z
    Zt = np.swapaxes(Z, 1, 2)
    F = theta.F
    lam = theta.lam
    c = theta.c
    out = []
    for j in range(theta.beta.size):
        out.append(_Direction(None, -batch.X[:, :, j], None, None))
    out.append(_Direction(R, None, None, None))
    if theta.dependence.kind != "CI":
        dR_grid = [corr_derivatives(theta.dependence, t) for t in batch.times]
        for s_ in range(theta.dependence.n_phi):
            dR = np.array([g[s_] for g in dR_grid])[batch.inverse]
            out.append(_Direction(theta.sigma2 * dR, None, None, None))
    if q:
        s = math.sqrt(1.0 + lam @ lam)
        delta = lam / s
        for E in vech_basis(q):
            dD = E @ F + F @ E
            out.append(_Direction(Z @ dD @ Zt, -c * (Z @ (E @ delta)), E @ lam, None))
        for j in range(q):
            e = np.zeros(q)
            e[j] = 1.0
            ddelta = e / s - lam * lam[j] / s**3
            out.append(_Direction(None, -c * (Z @ (F @ ddelta)), F @ e, e))
    return out


def score_components(theta, data):
    """Per-subject score vectors, shape ``(n_subjects, dim theta*)``."""
    k = theta.theta_star().size
    S = np.empty((data.n_subjects, k))
    for batch in data.batches:
        corr = corr_stack(theta.dependence, batch)
        m = batch_marginal(theta, batch, corr)
        n = batch.n
        fam = theta.family
        lPhi = log_iphi_cdf(fam, 0.5 * n, m.d, m.A)
        u = np.exp(log_iphi_cdf(fam, 0.5 * n + 1.0, m.d, m.A) - lPhi)
        tau1 = np.exp(log_iphi_pdf(fam, 0.5 * (n + 1), m.d, m.A) - lPhi)
        Pinv = m.Psi_inv
        Pr = np.einsum("bij,bj->bi", Pinv, m.resid)
        PZv = np.einsum("bij,bj->bi", Pinv, m.Zv)
        Nnum = m.A * m.a
        a2 = m.a**2
        cols = []
        for dirn in _directions(theta, batch, m.R):
            dd = np.zeros(batch.size)
            dN = np.zeros(batch.size)
            da2 = np.zeros(batch.size)
            tr = np.zeros(batch.size)
            if dirn.dPsi is not None:
                dP = np.broadcast_to(dirn.dPsi, Pinv.shape)
                tr = np.einsum("bij,bji->b", Pinv, dP)
                dd -= np.einsum("bi,bij,bj->b", Pr, dP, Pr)
                dN -= np.einsum("bi,bij,bj->b", PZv, dP, Pr)
                da2 += np.einsum("bi,bij,bj->b", PZv, dP, PZv)
            if dirn.dr is not None:
                dr = np.broadcast_to(dirn.dr, Pr.shape)
                dd += 2.0 * np.einsum("bi,bi->b", dr, Pr)
                dN += np.einsum("bi,bi->b", PZv, dr)
            if dirn.dv is not None:
                Zdv = batch.Z @ dirn.dv
                dN += np.einsum("bi,bi->b", Zdv, Pr)
                da2 -= 2.0 * np.einsum("bi,bi->b", Zdv, PZv)
            if dirn.dlam is not None:
                da2 += 2.0 * theta.lam @ dirn.dlam
            dA = dN / m.a - Nnum * da2 / (2.0 * a2 * m.a)
            cols.append(-0.5 * tr + tau1 * dA - 0.5 * u * dd)
        S[batch.index] = np.column_stack(cols)
    return S


def score(theta, subject_or_data):
    """Score vector of ``theta*`` for one subject or summed over a dataset."""
    if isinstance(subject_or_data, LongitudinalDataset):
        return score_components(theta, subject_or_data).sum(axis=0)
    return score_components(theta, LongitudinalDataset([subject_or_data]))[0]


def observed_information(theta, data):
    """Outer-product-of-scores information ``sum_i s_i s_i'``."""
    S = score_components(theta, data)
    info = S.T @ S
    return 0.5 * (info + info.T)


def covariance(theta, data):
    """Inverse observed information, raising :class:`SingularInformation`."""
    info = observed_information(theta, data)
    w = np.linalg.eigvalsh(info)
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise SingularInformation("observed information is singular")
    return np.linalg.inv(info)


def standard_errors(theta, data):
    """Square roots of the diagonal of the inverse observed information."""
    cov = covariance(theta, data)
    return np.sqrt(np.clip(np.diag(cov), 0.0, None))


@dataclass
class InferenceReport:
    """Standard errors and Wald intervals for ``theta*``."""

    names: list
    estimates: np.ndarray
    se: np.ndarray | None
    information: np.ndarray
    warnings: list

    def wald_ci(self, level=0.95):
        if self.se is None:
            return None
        z = stats.norm.ppf(0.5 + 0.5 * level)
        return np.column_stack([self.estimates - z * self.se, self.estimates + z * self.se])


def inference_report(theta, data, fixed_names=None, fixed_lambda=False):
    """SEs for ``theta*``; the lambda entries are flagged as unreliable.

    With ``fixed_lambda`` the lambda coordinates are dropped before inversion.
    """
    names = theta.theta_star_names(fixed_names)
    est = theta.theta_star()
    S = score_components(theta, data)
    keep = np.ones(est.size, bool)
    if fixed_lambda and theta.q:
        keep[-theta.q :] = False
    info = S[:, keep].T @ S[:, keep]
    notes = []
    se = None
    try:
        w = np.linalg.eigvalsh(info)
        if w.min() <= 1e-12 * max(w.max(), 1e-300):
            raise SingularInformation("observed information is singular")
        se = np.full(est.size, np.nan)
        se[keep] = np.sqrt(np.clip(np.diag(np.linalg.inv(info)), 0.0, None))
    except SingularInformation as exc:
        notes.append(f"standard errors unavailable: {exc}")
    if theta.q and not fixed_lambda:
        notes.append("standard errors of the skewness parameters are not reliable and are not reported; use lr_test")
    return InferenceReport(names, est, se, info, notes)


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    df: int
    p_value: float


def lr_test(full, restricted):
    """Likelihood-ratio test of a nested restricted fit against a full fit."""
    stat = 2.0 * (full.loglik - restricted.loglik)
    if stat < -LRT_SLACK:
        raise NotNested(f"restricted log-likelihood exceeds the full one by {-stat / 2:.3g}")
    stat = max(stat, 0.0)
    df = int(full.n_params - restricted.n_params)
    if df < 0:
        raise NotNested("restricted model has more parameters than the full one")
    if df == 0:
        # identical models: the statistic is zero up to the slack
        return LRTResult(0.0, 0, 1.0)
    return LRTResult(stat, df, float(stats.chi2.sf(stat, df)))


def skewness_lrt(data, family, dependence, options=None, starts=(0.5, -0.5)):
    """Test ``lambda = 0`` by fitting the symmetric and the skew model.

    EM does not move away from ``lambda = 0``, so the full model is fitted from
    the data-driven start and from the restricted optimum with each ``lambda``
    entry set to every value in ``starts``; the best full fit is kept. The
    restricted optimum is itself a point of the full model, so the full
    log-likelihood is never taken below it.

    Returns
    -------
    (LRTResult, full FitResult, restricted FitResult)
    """
    options = options or FitOptions()
    restricted = fit(data, family, dependence, replace(options, fix_lambda_zero=True))
    free = replace(options, fix_lambda_zero=False)
    fits = [fit(data, family, dependence, free)]
    for lam0 in starts:
        th0 = restricted.theta.replace(lam=np.full(restricted.theta.q, float(lam0)))
        fits.append(fit(data, family, dependence, free, theta0=th0))
    full = max(fits, key=lambda r: r.loglik)
    if full.loglik < restricted.loglik:
        m = restricted.n_params + restricted.theta.q
        aic, bic = information_criteria(restricted.loglik, m, restricted.n_obs)
        full = replace(restricted, n_params=m, aic=aic, bic=bic, fixed_lambda=False)
    return lr_test(full, restricted), full, restricted
