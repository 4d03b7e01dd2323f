"""Scale mixtures of skew-normal distributions.

Four mixing laws for the scale variable ``U`` are supported:

========  =======================  =================
family    law of ``U``             parameters
========  =======================  =================
``SN``    degenerate at 1          none
``ST``    Gamma(nu/2, rate nu/2)   ``nu > 0``
``SSL``   Beta(nu, 1)              ``nu > 0``
``SCN``   nu2 w.p. nu1, else 1     ``nu1, nu2 in (0, 1)``
========  =======================  =================

The computational kernel is the pair of mixing integrals

.. math::

    I^\\Phi(w) = \\int u^w e^{-ud/2} \\Phi(u^{1/2} A)\\, dH(u), \\qquad
    I^\\phi(w) = \\int u^w e^{-ud/2} \\phi(u^{1/2} A)\\, dH(u),

which give the marginal density, the E-step weights and the score vector.
Everything is evaluated on the log scale. The skew-slash ``I^\\Phi`` needs
one-dimensional adaptive quadrature; its tolerances are engineering choices
(see ``SSL_EPSABS``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from ._linalg import sym_sqrt
from .exceptions import MomentUndefined, NumericalUnderflow, QuadratureFailure, ValidationError

LOG2PI = math.log(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

#: absolute tolerance of the skew-slash quadrature (on a [0, 1]-bounded integrand)
SSL_EPSABS = 1e-10
SSL_EPSREL = 1e-10
# below this the vectorised rule loses relative accuracy and a scalar rule is used
_SSL_SMALL = 1e-6

_N_NU = {"SN": 0, "ST": 1, "SSL": 1, "SCN": 2}


@dataclass(frozen=True)
class MixingFamily:
    """A scale-mixing law together with its ``nu`` parameters.

    Parameters
    ----------
    name : {"SN", "ST", "SSL", "SCN"}
    nu : tuple of float
        Empty for SN, ``(nu,)`` for ST and SSL, ``(nu1, nu2)`` for SCN.
    """

    name: str
    nu: tuple = ()

    def __post_init__(self):
        name = str(self.name).upper()
        if name not in _N_NU:
            raise ValidationError(f"unknown mixing family {self.name!r}")
        nu = () if self.nu is None else tuple(float(v) for v in np.atleast_1d(self.nu))
        if len(nu) != _N_NU[name]:
            raise ValidationError(f"{name} takes {_N_NU[name]} nu parameter(s), got {len(nu)}")
        if name in ("ST", "SSL") and not nu[0] > 0:
            raise ValidationError(f"{name} requires nu > 0")
        if name == "SCN" and not all(0.0 < v < 1.0 for v in nu):
            raise ValidationError("SCN requires nu1, nu2 strictly inside (0, 1)")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "nu", nu)

    # constructors -------------------------------------------------------
    @classmethod
    def sn(cls):
        return cls("SN")

    @classmethod
    def st(cls, nu):
        return cls("ST", (nu,))

    @classmethod
    def ssl(cls, nu):
        return cls("SSL", (nu,))

    @classmethod
    def scn(cls, nu1, nu2):
        return cls("SCN", (nu1, nu2))

    @property
    def n_nu(self):
        return len(self.nu)

    def with_nu(self, nu):
        return MixingFamily(self.name, tuple(np.atleast_1d(nu)))

    def __str__(self):
        if not self.nu:
            return self.name
        return f"{self.name}({', '.join(f'{v:g}' for v in self.nu)})"

    # moments --------------------------------------------------------------
    @property
    def k1(self):
        return k1(self)

    @property
    def k2(self):
        return k2(self)

    @property
    def c(self):
        return centering_c(self)

    # sampling -------------------------------------------------------------
    def sample_u(self, rng, size):
        """Draw the scale variable ``U``."""
        if self.name == "SN":
            return np.ones(size)
        if self.name == "ST":
            nu = self.nu[0]
            return rng.gamma(nu / 2.0, 2.0 / nu, size=size)
        if self.name == "SSL":
            return rng.beta(self.nu[0], 1.0, size=size)
        nu1, nu2 = self.nu
        return np.where(rng.random(size) < nu1, nu2, 1.0)

    def mixing_pdf(self, u):
        """Density of ``U`` for the continuous laws (ST, SSL)."""
        if self.name == "ST":
            nu = self.nu[0]
            return stats.gamma.pdf(u, nu / 2.0, scale=2.0 / nu)
        if self.name == "SSL":
            return stats.beta.pdf(u, self.nu[0], 1.0)
        raise ValueError(f"{self.name} has a discrete mixing law")

    def atoms(self):
        """Support points and probabilities for the discrete laws (SN, SCN)."""
        if self.name == "SN":
            return np.array([1.0]), np.array([1.0])
        if self.name == "SCN":
            nu1, nu2 = self.nu
            return np.array([nu2, 1.0]), np.array([nu1, 1.0 - nu1])
        raise ValueError(f"{self.name} has a continuous mixing law")


def k1(family):
    """``E{U^{-1/2}}``."""
    name, nu = family.name, family.nu
    if name == "SN":
        return 1.0
    if name == "ST":
        if nu[0] <= 1:
            raise MomentUndefined("ST k1 requires nu > 1")
        v = nu[0]
        return math.sqrt(v / 2.0) * math.exp(special.gammaln((v - 1) / 2.0) - special.gammaln(v / 2.0))
    if name == "SSL":
        if nu[0] <= 0.5:
            raise MomentUndefined("SSL k1 requires nu > 1/2")
        return nu[0] / (nu[0] - 0.5)
    return 1.0 + nu[0] * (nu[1] ** -0.5 - 1.0)


def k2(family):
    """``E{U^{-1}}``."""
    name, nu = family.name, family.nu
    if name == "SN":
        return 1.0
    if name == "ST":
        if nu[0] <= 2:
            raise MomentUndefined("ST k2 requires nu > 2")
        return nu[0] / (nu[0] - 2.0)
    if name == "SSL":
        if nu[0] <= 1:
            raise MomentUndefined("SSL k2 requires nu > 1")
        return nu[0] / (nu[0] - 1.0)
    return 1.0 + nu[0] * (1.0 / nu[1] - 1.0)


def centering_c(family):
    """Location constant ``-sqrt(2/pi) k1`` that gives the random effects mean zero."""
    return -SQRT_2_OVER_PI * k1(family)


# ---------------------------------------------------------------------------
# mixing integrals
# ---------------------------------------------------------------------------


def _log_trunc_gamma_norm(a, b):
    """``log int_0^1 s^(a-1) e^(-b s) ds`` (elementwise, ``a > 0``, ``b >= 0``)."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty(a.shape)
    small = b < 1.0
    if np.any(~small):
        aa, bb = a[~small], b[~small]
        out[~small] = special.gammaln(aa) - aa * np.log(bb) + np.log(special.gammainc(aa, bb))
    if np.any(small):
        # alternating series; |b| < 1 so 40 terms are far beyond double precision
        aa, bb = a[small], b[small]
        k = np.arange(40)[:, None]
        terms = np.exp(k * np.log(np.maximum(bb, 1e-300)) - special.gammaln(k + 1)) / (aa + k)
        terms[0] = 1.0 / aa
        signs = np.where(k % 2 == 0, 1.0, -1.0)
        out[small] = np.log((signs * terms).sum(axis=0))
    return out


def _ssl_expected_cdf(a, b, A):
    """``E{Phi(S^{1/2} A)}`` for S ~ Gamma(a, rate b) truncated to (0, 1).

    The expectation is written as an integral over the truncated-gamma
    probability scale, so the integrand is monotone and bounded by one and a
    single vectorised adaptive Gauss-Kronrod rule serves every element.
    """
    a, b, A = (np.ravel(x).astype(float) for x in np.broadcast_arrays(a, b, A))
    if a.size == 0:
        return np.empty(0)
    with np.errstate(under="ignore"):
        P = special.gammainc(a, np.maximum(b, 1e-300))
    beta_like = (b < 1e-12) | (P <= 1e-280)

    def f(v):
        s = np.where(beta_like, v ** (1.0 / a), special.gammaincinv(a, v * P) / np.where(beta_like, 1.0, b))
        return special.ndtr(np.sqrt(np.minimum(s, 1.0)) * A)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res, err, info = integrate.quad_vec(
            f, 0.0, 1.0, epsabs=SSL_EPSABS * 1e-2, epsrel=SSL_EPSREL, norm="max",
            limit=2000, full_output=True,
        )
    if not info.success or not np.all(np.isfinite(res)):
        raise QuadratureFailure(f"skew-slash quadrature did not converge (err={err:.2e})")
    res = np.asarray(res, float)
    for i in np.flatnonzero(res < _SSL_SMALL):
        res[i] = math.exp(_ssl_scalar_log_expected_cdf(a[i], b[i], A[i]))
    return res


def _gl_log_ratio(a, b, A, n):
    x, wt = _gauss_legendre(n)
    # s = x^2 removes the square root from the cdf argument
    base = np.log(wt) + (2.0 * a[:, None] - 1.0) * np.log(x) - b[:, None] * x**2
    num = special.logsumexp(base + special.log_ndtr(x * A[:, None]), axis=1)
    return num - special.logsumexp(base, axis=1)


_GL_CACHE: dict = {}


def _gauss_legendre(n):
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


def _ssl_log_expected_cdf(a, b, A):
    """``log E{Phi(S^{1/2} A)}``, truncated-gamma ``S`` on (0, 1).

    A Gauss-Legendre ratio rule is tried at two orders; elements where the
    orders disagree are recomputed with adaptive quadrature.
    """
    a, b, A = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(A, float))
    shape = a.shape
    a, b, A = a.ravel(), b.ravel(), A.ravel()
    lo = _gl_log_ratio(a, b, A, 96)
    hi = _gl_log_ratio(a, b, A, 192)
    out = hi
    bad = ~(np.abs(hi - lo) < 1e-12) | (a < 1.0)
    if np.any(bad):
        out = out.copy()
        out[bad] = np.log(_ssl_expected_cdf(a[bad], b[bad], A[bad]))
    return out.reshape(shape)


def _ssl_scalar_log_expected_cdf(a, b, A):
    """Scalar fallback with explicit peak scaling, for tiny expectations."""

    def logg(s):
        return (a - 1.0) * math.log(s) - b * s + special.log_ndtr(math.sqrt(s) * A)

    grid = np.linspace(1e-6, 1.0, 401)
    vals = (a - 1.0) * np.log(grid) - b * grid + special.log_ndtr(np.sqrt(grid) * A)
    k = int(np.argmax(vals))
    peak, top = grid[k], vals[k]
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    val, err, *rest = integrate.quad(
        lambda s: math.exp(logg(s) - top) if s > 0 else 0.0,
        0.0, 1.0, points=sorted({lo, peak, hi} - {0.0, 1.0}), epsabs=0.0, epsrel=1e-11,
        limit=500, full_output=1,
    )
    if len(rest) > 1 or val <= 0:
        raise QuadratureFailure("skew-slash scalar quadrature did not converge")
    return math.log(val) + top - float(_log_trunc_gamma_norm(a, b))


def log_iphi_cdf(family, w, d, A):
    """``log I^Phi(w)`` elementwise over broadcast ``(w, d, A)``."""
    w, d, A = np.broadcast_arrays(np.asarray(w, float), np.asarray(d, float), np.asarray(A, float))
    name, nu = family.name, family.nu
    if name == "SN":
        out = -0.5 * d + special.log_ndtr(A)
    elif name == "ST":
        v = nu[0]
        dof = v + 2.0 * w
        out = (w * math.log(2.0) + 0.5 * v * math.log(v) + special.gammaln(w + 0.5 * v)
               - special.gammaln(0.5 * v) - (0.5 * v + w) * np.log(v + d)
               + stats.t.logcdf(np.sqrt(dof / (d + v)) * A, dof))
    elif name == "SSL":
        v = nu[0]
        a = v + w
        out = (math.log(v) + _log_trunc_gamma_norm(a, 0.5 * d)
               + _ssl_log_expected_cdf(a, 0.5 * d, A))
    else:
        nu1, nu2 = nu
        t1 = math.log(nu1) + w * math.log(nu2) - 0.5 * nu2 * d + special.log_ndtr(math.sqrt(nu2) * A)
        t2 = math.log1p(-nu1) - 0.5 * d + special.log_ndtr(A)
        out = np.logaddexp(t1, t2)
    return out


def log_iphi_pdf(family, w, d, A):
    """``log I^phi(w)`` elementwise over broadcast ``(w, d, A)``."""
    w, d, A = np.broadcast_arrays(np.asarray(w, float), np.asarray(d, float), np.asarray(A, float))
    name, nu = family.name, family.nu
    if name == "SN":
        out = -0.5 * d - 0.5 * LOG2PI - 0.5 * A**2
    elif name == "ST":
        v = nu[0]
        out = (w * math.log(2.0) + 0.5 * v * math.log(v) + special.gammaln(0.5 * v + w)
               - 0.5 * LOG2PI - special.gammaln(0.5 * v) - (0.5 * v + w) * np.log(d + A**2 + v))
    elif name == "SSL":
        v = nu[0]
        out = math.log(v) + _log_trunc_gamma_norm(v + w, 0.5 * (d + A**2)) - 0.5 * LOG2PI
    else:
        nu1, nu2 = nu
        t1 = math.log(nu1) + w * math.log(nu2) - 0.5 * nu2 * (d + A**2)
        t2 = math.log1p(-nu1) - 0.5 * (d + A**2)
        out = np.logaddexp(t1, t2) - 0.5 * LOG2PI
    return out


def iphi_integrals(family, w, d, A):
    """Return ``(I^Phi(w), I^phi(w))`` on the natural scale."""
    return np.exp(log_iphi_cdf(family, w, d, A)), np.exp(log_iphi_pdf(family, w, d, A))


# ---------------------------------------------------------------------------
# multivariate SMSN law
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmsnParams:
    """Location, dispersion and skewness of a p-variate SMSN law."""

    mu: np.ndarray
    Sigma: np.ndarray
    lam: np.ndarray
    family: MixingFamily

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, float))
        lam = np.atleast_1d(np.asarray(self.lam, float))
        p = mu.size
        if Sigma.shape != (p, p) or lam.size != p:
            raise ValidationError("inconsistent SMSN parameter dimensions")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", 0.5 * (Sigma + Sigma.T))
        object.__setattr__(self, "lam", lam)
        sym_sqrt(self.Sigma)  # positive-definiteness check

    @property
    def dim(self):
        return self.mu.size

    @property
    def delta(self):
        return self.lam / math.sqrt(1.0 + self.lam @ self.lam)


def smsn_logpdf(params, y):
    """Log density of ``SMSN_p(mu, Sigma, lambda; H)`` at ``y`` (shape ``(p,)`` or ``(m, p)``)."""
    y = np.asarray(y, float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    p = params.dim
    if Y.shape[-1] != p:
        raise ValidationError("dimension of y does not match the law")
    S_ih = sym_sqrt(params.Sigma, inverse=True)
    z = (Y - params.mu) @ S_ih
    d = np.einsum("ij,ij->i", z, z)
    A = z @ params.lam
    _, logdet = np.linalg.slogdet(params.Sigma)
    out = math.log(2.0) - 0.5 * p * LOG2PI - 0.5 * logdet + log_iphi_cdf(params.family, 0.5 * p, d, A)
    if not np.all(np.isfinite(out)):
        raise NumericalUnderflow("log density is not finite")
    return float(out[0]) if single else out


def smsn_sample(params, count, rng_seed=None):
    """Draw ``count`` vectors through the stochastic representation.

    ``Y = mu + U^{-1/2} Sigma^{1/2} (delta |T0| + (I - delta delta')^{1/2} T1)``.
    """
    if count < 1:
        raise ValidationError("count must be at least 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p = params.dim
    delta = params.delta
    u = params.family.sample_u(rng, count)
    t0 = np.abs(rng.standard_normal(count))
    t1 = rng.standard_normal((count, p))
    C = np.eye(p) - np.outer(delta, delta)
    C_half = sym_sqrt(C) if p > 1 or C[0, 0] > 0 else np.zeros((1, 1))
    core = t0[:, None] * delta + t1 @ C_half
    return params.mu + (core @ sym_sqrt(params.Sigma)) / np.sqrt(u)[:, None]


def mahalanobis_cdf(family, p, r):
    """``P(d <= r)`` for ``d = (Y - mu)' Sigma^{-1} (Y - mu)`` under the family."""
    r = np.asarray(r, float)
    rr = np.maximum(r, 0.0)
    name, nu = family.name, family.nu
    if name == "SN":
        out = stats.chi2.cdf(rr, p)
    elif name == "ST":
        out = stats.f.cdf(rr / p, p, nu[0])
    elif name == "SSL":
        v = nu[0]
        # r = 0 gives inf - inf inside the masked branch
        with np.errstate(divide="ignore", invalid="ignore"):
            logcoef = v * math.log(2.0) + special.gammaln(0.5 * p + v) - v * np.log(rr) - special.gammaln(0.5 * p)
            corr = np.where(rr > 0, np.exp(logcoef + stats.chi2.logcdf(rr, p + 2 * v)), 0.0)
        out = np.clip(stats.chi2.cdf(rr, p) - corr, 0.0, 1.0)
    else:
        nu1, nu2 = nu
        out = nu1 * stats.chi2.cdf(nu2 * rr, p) + (1 - nu1) * stats.chi2.cdf(rr, p)
    return np.where(r > 0, out, 0.0) if out.ndim else (float(out) if r > 0 else 0.0)
