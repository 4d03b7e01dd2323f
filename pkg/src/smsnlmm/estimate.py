"""ECME estimation for the SMSN linear mixed model.

One iteration consists of

1. the E-step, giving the conditional moments of ``U``, ``UT``, ``UT^2``,
   ``Ub``, ``UTb`` and ``Ubb'`` under the hierarchical representation;
2. closed-form CM updates of ``beta``, ``sigma2``, ``Delta`` and ``Gamma``;
3. a numerical CM update of the correlation parameters ``phi``;
4. a CML update of ``nu`` on the actual marginal likelihood.

The E-step weights are ratios of mixing integrals at shifted exponents, so the
same code path serves all four families.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from ._linalg import chol_logdet_inv, sym_sqrt
from .dependence import DependenceSpec, build_corr, corr_batch_from_unconstrained
from .exceptions import NonPSD, SingularDispersion, SmsnLmmError
from .mixing import MixingFamily, log_iphi_cdf, log_iphi_pdf
from .model import LongitudinalDataset, ThetaParams, batch_marginal, corr_stack, marginal_loglik

log = logging.getLogger(__name__)

NU_BOUNDS = {"ST": (2.01, 100.0), "SSL": (1.01, 50.0), "SCN": (0.01, 0.99)}
NU_START = {"ST": (10.0,), "SSL": (5.0,), "SCN": (0.05, 0.8)}
GAMMA_CLIP = -1e-8
GAMMA_FLOOR = 1e-10


@dataclass
class FitOptions:
    """Controls for :func:`fit`.

    Parameters
    ----------
    tol : float
        Relative log-likelihood change that stops the iteration.
    abs_tol : float
        Absolute fallback used when the log-likelihood is near zero.
    max_iter : int
    fix_lambda_zero : bool
        Fit the symmetric (``lambda = 0``) submodel.
    update_phi, update_nu : bool
        Switch the numerical CM steps on or off.
    nu_bounds : dict, optional
        Per-family search box for ``nu``.
    """

    tol: float = 1e-9
    abs_tol: float = 1e-10
    max_iter: int = 300
    fix_lambda_zero: bool = False
    update_phi: bool = True
    update_nu: bool = True
    nu_bounds: dict = field(default_factory=lambda: dict(NU_BOUNDS))
    phi_maxiter: int = 400


@dataclass
class EStepQuantities:
    """Conditional expectations for every subject, in dataset order."""

    u: np.ndarray
    tau1: np.ndarray
    ut: np.ndarray
    ut2: np.ndarray
    ub: np.ndarray
    utb: np.ndarray
    ub2: np.ndarray
    M: np.ndarray
    mu: np.ndarray
    A: np.ndarray
    d: np.ndarray


@dataclass
class FitResult:
    """Outcome of :func:`fit`."""

    theta: ThetaParams
    loglik: float
    aic: float
    bic: float
    n_params: int
    n_obs: int
    converged: bool
    iterations: int
    trace: list
    u_hat: np.ndarray
    estep: EStepQuantities | None = None
    warnings: list = field(default_factory=list)
    fixed_lambda: bool = False
    se: np.ndarray | None = None
    se_names: list | None = None
    eb_effects: np.ndarray | None = None

    def summary(self):
        return {
            "family": str(self.theta.family),
            "dependence": str(self.theta.dependence),
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def information_criteria(loglik, m, n_obs):
    """Return ``(AIC, BIC)``."""
    return -2.0 * loglik + 2.0 * m, -2.0 * loglik + m * math.log(n_obs)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _estep_batch(theta, batch, corr):
    m = batch_marginal(theta, batch, corr)
    fam = theta.family
    n = batch.n
    B, q = batch.size, theta.q
    Z = batch.Z
    Sigma = theta.sigma2 * m.R
    lPhi = log_iphi_cdf(fam, 0.5 * n, m.d, m.A)
    u = np.exp(log_iphi_cdf(fam, 0.5 * n + 1.0, m.d, m.A) - lPhi)
    tau1 = np.exp(log_iphi_pdf(fam, 0.5 * (n + 1), m.d, m.A) - lPhi)
    if q == 0:
        zq = np.zeros((B, 0))
        return u, tau1, np.zeros(B), np.zeros(B), zq, zq, np.zeros((B, 0, 0)), np.ones(B), np.zeros(B), m.A, m.d
    c = theta.c
    Dl = theta.Delta
    G = theta.Gamma
    Zt = np.swapaxes(Z, 1, 2)
    _, Om_inv = chol_logdet_inv(Sigma + Z @ G @ Zt)
    ZD = Z @ Dl
    OZD = np.einsum("bij,bj->bi", Om_inv, ZD)
    M2 = 1.0 / (1.0 + np.einsum("bi,bi->b", ZD, OZD))
    M = np.sqrt(M2)
    mu = M2 * np.einsum("bi,bi->b", OZD, m.resid)
    # Woodbury forms avoid inverting Gamma and Sigma
    GZtO = G @ Zt @ Om_inv
    ey = batch.y - batch.X @ theta.beta
    r = np.einsum("bij,bj->bi", GZtO, ey)
    s = Dl - np.einsum("bij,bj->bi", GZtO, ZD)
    Bm = G - GZtO @ Z @ G
    ut = (mu + c) * u + M * tau1
    ut2 = M2 + (mu + c) ** 2 * u + M * (mu + 2 * c) * tau1
    ub = r * u[:, None] + s * ut[:, None]
    utb = r * ut[:, None] + s * ut2[:, None]
    rs = np.einsum("bi,bj->bij", s, r)
    ub2 = (Bm + u[:, None, None] * np.einsum("bi,bj->bij", r, r)
           + ut[:, None, None] * (rs + np.swapaxes(rs, 1, 2))
           + ut2[:, None, None] * np.einsum("bi,bj->bij", s, s))
    ub2 = 0.5 * (ub2 + np.swapaxes(ub2, 1, 2))
    return u, tau1, ut, ut2, ub, utb, ub2, M, mu, m.A, m.d


def estep_all(theta, data, corr_cache=None):
    """E-step for every subject of ``data``."""
    ns, q = data.n_subjects, theta.q
    out = dict(u=np.empty(ns), tau1=np.empty(ns), ut=np.empty(ns), ut2=np.empty(ns),
               ub=np.empty((ns, q)), utb=np.empty((ns, q)), ub2=np.empty((ns, q, q)),
               M=np.empty(ns), mu=np.empty(ns), A=np.empty(ns), d=np.empty(ns))
    keys = ["u", "tau1", "ut", "ut2", "ub", "utb", "ub2", "M", "mu", "A", "d"]
    for k, batch in enumerate(data.batches):
        corr = corr_stack(theta.dependence, batch) if corr_cache is None else corr_cache[k]
        vals = _estep_batch(theta, batch, corr)
        for key, v in zip(keys, vals):
            out[key][batch.index] = v
    return EStepQuantities(**out)


def estep(theta, subject):
    """E-step quantities of a single subject (scalars, vectors and a matrix)."""
    res = estep_all(theta, LongitudinalDataset([subject]))
    return EStepQuantities(**{k: v[0] for k, v in res.__dict__.items()})


# ---------------------------------------------------------------------------
# CM steps
# ---------------------------------------------------------------------------


def _gather(es, batch):
    idx = batch.index
    return es.u[idx], es.ub[idx], es.ub2[idx]


def update_beta(theta, data, es, corr_cache):
    l = theta.beta.size
    lhs = np.zeros((l, l))
    rhs = np.zeros(l)
    for batch, (R, _, Rinv) in zip(data.batches, corr_cache):
        u, ub, _ = _gather(es, batch)
        XtRi = np.swapaxes(batch.X, 1, 2) @ Rinv
        lhs += np.einsum("b,bij->ij", u, XtRi @ batch.X)
        target = u[:, None] * batch.y
        if theta.q:
            target = target - np.einsum("bij,bj->bi", batch.Z, ub)
        rhs += np.einsum("bij,bj->i", XtRi, target)
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularDispersion("weighted normal equations are singular") from exc


def _s_matrices(theta, batch, es, beta):
    """``S_i`` of the expected complete-data error quadratic form."""
    u, ub, ub2 = _gather(es, batch)
    e = batch.y - batch.X @ beta
    S = u[:, None, None] * np.einsum("bi,bj->bij", e, e)
    if theta.q:
        Zub = np.einsum("bij,bj->bi", batch.Z, ub)
        cross = np.einsum("bi,bj->bij", e, Zub)
        S = S - cross - np.swapaxes(cross, 1, 2) + batch.Z @ ub2 @ np.swapaxes(batch.Z, 1, 2)
    return S


def _grouped_s(theta, data, es, beta):
    """Sum of ``S_i`` over subjects sharing a time grid, batch by batch."""
    out = []
    for batch in data.batches:
        S = _s_matrices(theta, batch, es, beta)
        G = np.zeros((batch.times.shape[0],) + S.shape[1:])
        np.add.at(G, batch.inverse, S)
        counts = np.bincount(batch.inverse, minlength=batch.times.shape[0])
        out.append((G, counts))
    return out


def update_sigma2(theta, data, es, beta, corr_cache):
    total = 0.0
    for batch, (_, _, Rinv) in zip(data.batches, corr_cache):
        S = _s_matrices(theta, batch, es, beta)
        total += np.einsum("bij,bji->", Rinv, S)
    return max(total / data.n_obs, 1e-12)


def q1_phi_objective(dependence, data, grouped, sigma2):
    """``sum_i [-log|R_i|/2 - tr(R_i^{-1} S_i) / (2 sigma2)]`` at ``dependence``."""
    val = 0.0
    for batch, (G, counts) in zip(data.batches, grouped):
        Ru = np.array([build_corr(dependence, t) for t in batch.times])
        logdet, Rinv = chol_logdet_inv(Ru)
        val += -0.5 * counts @ logdet - 0.5 * np.einsum("gij,gji->", Rinv, G) / sigma2
    return float(val)


def _q1_fast(dep, eta, grids, grouped, sigma2):
    val = 0.0
    for Ru, (G, counts) in zip(corr_batch_from_unconstrained(dep, eta, grids), grouped):
        L = np.linalg.cholesky(Ru)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        # tr(R^-1 G) = ||L^-1 G^{1/2}||^2 is avoided; solve R X = G directly
        X = np.linalg.solve(Ru, G)
        val += -0.5 * counts @ logdet - 0.5 * np.trace(X, axis1=1, axis2=2).sum() / sigma2
    return float(val)


def _nelder_mead(fun, x0, maxiter, step=0.05):
    # small starting simplex: successive ECME iterations move phi only slightly
    x0 = np.asarray(x0, float)
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(x0.size)])
    with np.errstate(all="ignore"):
        return optimize.minimize(fun, x0, method="Nelder-Mead",
                                 options={"xatol": 1e-8, "fatol": 1e-11, "maxiter": maxiter,
                                          "initial_simplex": simplex})


def cm_update_phi(theta, data, es, beta, sigma2, maxiter=400, step=0.05):
    """Numerical CM step for the correlation parameters.

    Returns the updated :class:`DependenceSpec`; the current value is kept
    unless the objective strictly improves. ``step`` is the size of the
    starting simplex in the unconstrained space.
    """
    dep = theta.dependence
    if dep.kind == "CI":
        return dep
    grouped = _grouped_s(theta, data, es, beta)
    grids = [b.times for b in data.batches]

    def negobj(eta):
        try:
            v = -_q1_fast(dep, eta, grids, grouped, sigma2)
        except (SmsnLmmError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf
        return v if np.isfinite(v) else np.inf

    eta0 = dep.to_unconstrained()
    f0 = negobj(eta0)
    res = _nelder_mead(negobj, eta0, maxiter, step)
    if np.isfinite(res.fun) and res.fun < f0:
        return dep.from_unconstrained(res.x)
    return dep


def cm_update_sigma_phi(theta, data, es, beta, maxiter=400):
    """Joint variant: profile ``sigma2`` out of the Q1 objective and search ``phi``."""
    dep = theta.dependence
    N = data.n_obs
    grouped = _grouped_s(theta, data, es, beta)

    def profile(spec):
        halfld, tr = 0.0, 0.0
        for batch, (G, counts) in zip(data.batches, grouped):
            Ru = np.array([build_corr(spec, t) for t in batch.times])
            logdet, Rinv = chol_logdet_inv(Ru)
            halfld += 0.5 * counts @ logdet
            tr += np.einsum("gij,gji->", Rinv, G)
        s2 = max(tr / N, 1e-12)
        return -0.5 * N * math.log(s2) - halfld - 0.5 * N, s2

    if dep.kind == "CI":
        return dep, profile(dep)[1]

    def negobj(eta):
        try:
            return -profile(dep.from_unconstrained(eta))[0]
        except (SmsnLmmError, np.linalg.LinAlgError):
            return np.inf

    eta0 = dep.to_unconstrained()
    f0 = negobj(eta0)
    with np.errstate(all="ignore"):
        res = optimize.minimize(negobj, eta0, method="Nelder-Mead",
                                options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": maxiter})
    best = dep.from_unconstrained(res.x) if res.fun < f0 else dep
    return best, profile(best)[1]


def update_delta_gamma(es, fix_lambda_zero=False):
    """Closed-form ``(Delta, Gamma)`` update."""
    n = es.u.size
    q = es.ub.shape[1]
    if fix_lambda_zero:
        Dl = np.zeros(q)
    else:
        Dl = es.utb.sum(axis=0) / es.ut2.sum()
    outer = np.einsum("bi,j->ij", es.utb, Dl)
    G = (es.ub2.sum(axis=0) - outer - outer.T + es.ut2.sum() * np.outer(Dl, Dl)) / n
    G = 0.5 * (G + G.T)
    w, V = np.linalg.eigh(G)
    if np.any(w < GAMMA_CLIP):
        raise NonPSD(f"updated Gamma has eigenvalue {w.min():.3g}")
    if np.any(w <= 0):
        w = np.where(w <= 0, GAMMA_FLOOR, w)
        G = (V * w) @ V.T
    return Dl, G


def delta_gamma_to_F_lambda(Delta, Gamma):
    """Recover ``(F, lambda)`` from ``D = Gamma + Delta Delta'``."""
    D = Gamma + np.outer(Delta, Delta)
    F = sym_sqrt(D)
    Fi = np.linalg.inv(F)
    w = Fi @ Delta
    denom = 1.0 - w @ w
    if denom <= 0:
        raise SingularDispersion("skewness recovery failed (Delta' D^-1 Delta >= 1)")
    return F, w / math.sqrt(denom)


def cm_update_closed(theta, data, es, corr_cache=None, fix_lambda_zero=False):
    """``(beta, sigma2, Delta, Gamma)`` from one E-step."""
    corr_cache = corr_cache or [corr_stack(theta.dependence, b) for b in data.batches]
    beta = update_beta(theta, data, es, corr_cache)
    sigma2 = update_sigma2(theta, data, es, beta, corr_cache)
    if theta.q:
        Dl, G = update_delta_gamma(es, fix_lambda_zero)
    else:
        Dl, G = np.zeros(0), np.zeros((0, 0))
    return beta, sigma2, Dl, G


def cml_update_nu(theta, data, corr_cache=None, bounds=None):
    """Maximise the marginal log-likelihood over ``nu`` with everything else fixed."""
    fam = theta.family
    if fam.n_nu == 0:
        return fam
    lo, hi = (bounds or NU_BOUNDS)[fam.name]
    corr_cache = corr_cache or [corr_stack(theta.dependence, b) for b in data.batches]

    def negll(nu):
        try:
            f = fam.with_nu(np.atleast_1d(nu))
            val = marginal_loglik(theta.replace(family=f), data, corr_cache=corr_cache)
        except (SmsnLmmError, ValueError):
            return np.inf
        return -val if np.isfinite(val) else np.inf

    f0 = negll(fam.nu)
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if fam.n_nu == 1:
            res = optimize.minimize_scalar(negll, bounds=(lo, hi), method="bounded",
                                           options={"xatol": 1e-7})
            x, fx = np.atleast_1d(res.x), res.fun
        else:
            x0 = np.clip(np.array(fam.nu), lo + 1e-9, hi - 1e-9)
            res = optimize.minimize(negll, x0, method="Nelder-Mead", bounds=[(lo, hi)] * 2,
                                    options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 400})
            x, fx = res.x, res.fun
    if np.isfinite(fx) and fx < f0:
        return fam.with_nu(x)
    return fam


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _ar_start(data, resid_within, p):
    """Yule-Walker AR(p) fit to pooled within-subject residual autocovariances."""
    num = np.zeros(p + 1)
    cnt = np.zeros(p + 1)
    for s, e in zip(data, resid_within):
        t = np.rint(s.t).astype(int)
        pos = {tt: k for k, tt in enumerate(t)}
        for k, tt in enumerate(t):
            for lag in range(p + 1):
                j = pos.get(tt + lag)
                if j is not None:
                    num[lag] += e[k] * e[j]
                    cnt[lag] += 1
    if np.any(cnt == 0) or num[0] <= 0:
        return np.zeros(p)
    gamma = num / cnt
    rho = gamma / gamma[0]
    T = np.array([[rho[abs(i - j)] for j in range(p)] for i in range(p)])
    phi = np.linalg.solve(T, rho[1:])
    try:
        DependenceSpec.ar(phi)
    except SmsnLmmError:
        return np.zeros(p)
    return phi


def initialize(data, family, dependence, options=None):
    """Data-driven starting value for :func:`fit`."""
    y, X = data.stacked()
    q = data.n_random
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    e_all = y - X @ beta
    sigma2 = max(0.5 * float(np.var(e_all)), 1e-6)
    offsets = np.cumsum([0] + [s.n for s in data])
    resid = [e_all[offsets[k] : offsets[k + 1]] for k in range(data.n_subjects)]
    within = []
    bs = []
    for s, e in zip(data, resid):
        if q and s.n > q and np.linalg.matrix_rank(s.Z) == q:
            b = np.linalg.lstsq(s.Z, e, rcond=None)[0]
            bs.append(b)
            within.append(e - s.Z @ b)
        else:
            within.append(e)
    lam = np.zeros(q)
    D = np.eye(q) * sigma2
    if q:
        try:
            if len(bs) > q + 1:
                B = np.array(bs)
                D = np.cov(B.T).reshape(q, q) + 1e-6 * np.eye(q)
                sk = stats.skew(B, axis=0)
                lam = np.where(np.sign(sk) < 0, -1.0, 1.0)
            else:
                lam = 0.1 * np.ones(q)
            sym_sqrt(D)
        except (SmsnLmmError, ValueError, np.linalg.LinAlgError):
            D, lam = np.eye(q) * sigma2, 0.1 * np.ones(q)
    if options is not None and options.fix_lambda_zero:
        lam = np.zeros(q)
    fam = family.with_nu(NU_START[family.name]) if family.n_nu else family
    if dependence.kind == "AR":
        try:
            phi = _ar_start(data, within, dependence.order)
        except (np.linalg.LinAlgError, ValueError):
            phi = np.zeros(dependence.order)
        dep = dependence.with_phi(phi)
    elif dependence.kind == "DEC":
        dep = dependence.with_phi((0.5, 1.0))
        theta = ThetaParams.from_D(beta, sigma2, D, lam, fam, dep)
        best = -np.inf
        for p1 in np.arange(0.1, 0.95, 0.1):
            for p2 in (0.5, 1.0, 2.0):
                cand = dependence.with_phi((p1, p2))
                try:
                    ll = marginal_loglik(theta.replace(dependence=cand), data)
                except SmsnLmmError:
                    continue
                if ll > best:
                    best, dep = ll, cand
    else:
        dep = dependence
    return ThetaParams.from_D(beta, sigma2, D, lam, fam, dep)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def ecme_step(theta, data, options, corr_cache=None, phi_step=0.05):
    """One full ECME iteration; returns ``(theta_new, estep)``."""
    corr_cache = corr_cache or [corr_stack(theta.dependence, b) for b in data.batches]
    es = estep_all(theta, data, corr_cache)
    beta, sigma2, Dl, G = cm_update_closed(theta, data, es, corr_cache, options.fix_lambda_zero)
    dep = theta.dependence
    if options.update_phi and dep.kind != "CI":
        dep = cm_update_phi(theta, data, es, beta, sigma2, options.phi_maxiter, phi_step)
    if theta.q:
        F, lam = delta_gamma_to_F_lambda(Dl, G)
        if options.fix_lambda_zero:
            lam = np.zeros_like(lam)
    else:
        F, lam = theta.F, theta.lam
    new = ThetaParams(beta, sigma2, F, lam, theta.family, dep)
    if options.update_nu and new.family.n_nu:
        new = new.replace(family=cml_update_nu(new, data, None, options.nu_bounds))
    return new, es


def fit(data, family=None, dependence=None, options=None, theta0=None):
    """Fit the model by ECME.

    Parameters
    ----------
    data : LongitudinalDataset
    family : MixingFamily
    dependence : DependenceSpec
    options : FitOptions, optional
    theta0 : ThetaParams, optional
        Starting value; :func:`initialize` is used when omitted.

    Returns
    -------
    FitResult
    """
    options = options or FitOptions()
    family = family or (theta0.family if theta0 is not None else MixingFamily.sn())
    dependence = dependence or (theta0.dependence if theta0 is not None else DependenceSpec.ci())
    theta = theta0 if theta0 is not None else initialize(data, family, dependence, options)
    if options.fix_lambda_zero and theta.q:
        theta = theta.replace(lam=np.zeros(theta.q))
    notes = []
    ll = marginal_loglik(theta, data)
    trace = [ll]
    converged = False
    es = None
    it = 0
    phi_step = 0.05
    for it in range(1, options.max_iter + 1):
        new, es = ecme_step(theta, data, options, phi_step=phi_step)
        if theta.dependence.kind != "CI":
            moved = np.max(np.abs(new.dependence.to_unconstrained() - theta.dependence.to_unconstrained()))
            phi_step = float(np.clip(10.0 * moved, 1e-5, 0.05))
        ll_new = marginal_loglik(new, data)
        if not np.isfinite(ll_new):
            notes.append(f"non-finite log-likelihood at iteration {it}; stopped")
            break
        if ll_new < ll - 1e-8:
            log.debug("log-likelihood decreased by %.3g at iteration %d", ll - ll_new, it)
        theta, ll_old, ll = new, ll, ll_new
        trace.append(ll)
        rel = abs(ll / ll_old - 1.0) if ll_old != 0 else np.inf
        if rel < options.tol or abs(ll - ll_old) < options.abs_tol:
            converged = True
            break
    if not converged:
        notes.append(f"not converged after {it} iterations")
    es = estep_all(theta, data)
    m = theta.n_params() - (theta.q if options.fix_lambda_zero else 0)
    aic, bic = information_criteria(ll, m, data.n_obs)
    return FitResult(theta=theta, loglik=ll, aic=aic, bic=bic, n_params=m, n_obs=data.n_obs,
                     converged=converged, iterations=it, trace=trace, u_hat=es.u, estep=es,
                     warnings=notes, fixed_lambda=options.fix_lambda_zero)
