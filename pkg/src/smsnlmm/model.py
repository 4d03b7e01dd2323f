"""Data containers, parameters and the marginal likelihood of the SMSN linear mixed model.

The model for subject ``i`` is

    y_i = X_i beta + Z_i b_i + e_i,

with ``b_i`` a centred skew SMSN vector (scale ``D``, skewness ``lambda``) and
``e_i`` a symmetric SMN vector with dispersion ``sigma2 * R_i(phi)``. Marginally
``y_i`` is SMSN with location ``X_i beta + c Z_i Delta`` and dispersion
``Psi_i = sigma2 R_i + Z_i D Z_i'``.

Subjects are processed in batches of equal ``n_i`` so most linear algebra is
done on stacked arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from ._linalg import chol_logdet_inv, sym_sqrt, unvech, vech
from .dependence import DependenceSpec, build_corr
from .exceptions import DesignRankError, InvalidGrid, SingularDispersion, ValidationError
from .mixing import LOG2PI, MixingFamily, log_iphi_cdf


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectBlock:
    """Responses, designs and measurement times of one subject."""

    id: object
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, float).ravel()
        n = y.size
        X = np.asarray(self.X, float).reshape(n, -1) if n else np.asarray(self.X, float)
        Z = np.asarray(self.Z, float)
        Z = Z.reshape(n, -1) if Z.size else np.zeros((n, 0))
        t = np.asarray(self.t, float).ravel()
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "t", t)

    @property
    def n(self):
        return self.y.size


@dataclass
class _Batch:
    # subjects sharing the same n_i, stacked
    index: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    T: np.ndarray
    times: np.ndarray  # unique time rows
    inverse: np.ndarray  # subject -> unique time row

    @property
    def n(self):
        return self.y.shape[1]

    @property
    def size(self):
        return self.y.shape[0]


class LongitudinalDataset:
    """A collection of :class:`SubjectBlock` with consistent dimensions."""

    def __init__(self, subjects):
        self.subjects = list(subjects)
        if not self.subjects:
            raise ValidationError("dataset has no subjects")
        l = {s.X.shape[1] for s in self.subjects}
        q = {s.Z.shape[1] for s in self.subjects}
        if len(l) != 1 or len(q) != 1:
            raise ValidationError("inconsistent numbers of fixed or random-effect columns")
        self._l = l.pop()
        self._q = q.pop()

    @classmethod
    def from_long(cls, y, X, Z, ids, times):
        """Build a dataset from long-format arrays (one row per measurement)."""
        y = np.asarray(y, float).ravel()
        X = np.asarray(X, float).reshape(y.size, -1)
        Z = np.asarray(Z, float).reshape(y.size, -1) if np.size(Z) else np.zeros((y.size, 0))
        ids = np.asarray(ids)
        times = np.asarray(times, float).ravel()
        if not (X.shape[0] == Z.shape[0] == ids.size == times.size == y.size):
            raise ValidationError("long-format columns have different lengths")
        _, first = np.unique(ids, return_index=True)
        subjects = []
        for sid in ids[np.sort(first)]:
            rows = np.flatnonzero(ids == sid)
            rows = rows[np.argsort(times[rows], kind="stable")]
            subjects.append(SubjectBlock(sid, y[rows], X[rows], Z[rows], times[rows]))
        return cls(subjects)

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, k):
        return self.subjects[k]

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def n_fixed(self):
        return self._l

    @property
    def n_random(self):
        return self._q

    @cached_property
    def n_obs(self):
        return int(sum(s.n for s in self.subjects))

    @cached_property
    def sizes(self):
        return np.array([s.n for s in self.subjects])

    def stacked(self):
        """Concatenated ``(y, X)`` over subjects."""
        return (np.concatenate([s.y for s in self.subjects]),
                np.vstack([s.X for s in self.subjects]))

    @cached_property
    def batches(self):
        out = []
        for n in np.unique(self.sizes):
            idx = np.flatnonzero(self.sizes == n)
            subs = [self.subjects[k] for k in idx]
            T = np.array([s.t for s in subs]).reshape(len(subs), n)
            times, inverse = np.unique(T, axis=0, return_inverse=True)
            out.append(_Batch(
                index=idx,
                y=np.array([s.y for s in subs]).reshape(len(subs), n),
                X=np.array([s.X for s in subs]).reshape(len(subs), n, self._l),
                Z=np.array([s.Z for s in subs]).reshape(len(subs), n, self._q),
                T=T, times=times, inverse=np.ravel(inverse),
            ))
        return out

    def subset(self, index):
        return LongitudinalDataset([self.subjects[k] for k in index])


def validate(data, dependence=None):
    """Check the dataset invariants; return the dataset unchanged if they hold."""
    if not isinstance(data, LongitudinalDataset):
        data = LongitudinalDataset(data)
    for s in data:
        if s.n < 1:
            raise ValidationError(f"subject {s.id!r} has no observations")
        if s.X.shape[0] != s.n or s.Z.shape[0] != s.n or s.t.size != s.n:
            raise ValidationError(f"subject {s.id!r} has inconsistent row counts")
        for arr in (s.y, s.X, s.Z, s.t):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"subject {s.id!r} has missing or non-finite values")
        if np.unique(s.t).size != s.n:
            raise InvalidGrid(f"subject {s.id!r} has duplicate measurement times")
        if s.n > 1 and np.any(np.diff(s.t) <= 0):
            raise InvalidGrid(f"subject {s.id!r}: times are not increasing")
        if dependence is not None and dependence.needs_integer_times:
            if not np.allclose(s.t, np.round(s.t), atol=1e-9, rtol=0):
                raise InvalidGrid(f"subject {s.id!r}: AR structures need integer times")
    _, X = data.stacked()
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignRankError("stacked fixed-effects design is rank deficient")
    return data


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaParams:
    """Full parameter vector ``(beta, sigma2, phi, F, lambda, nu)``.

    ``F`` is the symmetric square root of ``D``; ``phi`` lives in ``dependence``
    and ``nu`` in ``family``.
    """

    beta: np.ndarray
    sigma2: float
    F: np.ndarray
    lam: np.ndarray
    family: MixingFamily = field(default_factory=MixingFamily.sn)
    dependence: DependenceSpec = field(default_factory=DependenceSpec.ci)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, float)).ravel()
        lam = np.asarray(self.lam, float).ravel()
        q = lam.size
        F = np.asarray(self.F, float).reshape(q, q)
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValidationError("sigma2 must be positive")
        if q and not np.allclose(F, F.T, atol=1e-12 * max(1.0, np.abs(F).max())):
            raise ValidationError("F must be symmetric")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "F", 0.5 * (F + F.T))
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_D(cls, beta, sigma2, D, lam, family=None, dependence=None):
        """Construct from ``D`` instead of its square root."""
        D = np.atleast_2d(np.asarray(D, float))
        F = sym_sqrt(D) if D.size else np.zeros((0, 0))
        return cls(beta, sigma2, F, lam, family or MixingFamily.sn(), dependence or DependenceSpec.ci())

    @property
    def q(self):
        return self.lam.size

    @property
    def phi(self):
        return np.array(self.dependence.phi)

    @property
    def nu(self):
        return np.array(self.family.nu)

    @property
    def alpha(self):
        return vech(self.F)

    @property
    def D(self):
        return self.F @ self.F

    @property
    def delta(self):
        return self.lam / math.sqrt(1.0 + self.lam @ self.lam)

    @property
    def Delta(self):
        return self.F @ self.delta

    @property
    def Gamma(self):
        Dl = self.Delta
        return self.D - np.outer(Dl, Dl)

    @property
    def c(self):
        return self.family.c

    def replace(self, **kw):
        return replace(self, **kw)

    def n_params(self):
        """Free-parameter count used by AIC and BIC."""
        q = self.q
        return self.beta.size + 1 + self.dependence.n_phi + q * (q + 1) // 2 + q + self.family.n_nu

    def theta_star(self):
        """Stacked ``(beta, sigma2, phi, alpha, lambda)``."""
        return np.concatenate([self.beta, [self.sigma2], self.phi, self.alpha, self.lam])

    def with_theta_star(self, vec):
        vec = np.asarray(vec, float)
        l, p, q = self.beta.size, self.dependence.n_phi, self.q
        k = q * (q + 1) // 2
        beta = vec[:l]
        sigma2 = vec[l]
        phi = vec[l + 1 : l + 1 + p]
        alpha = vec[l + 1 + p : l + 1 + p + k]
        lam = vec[l + 1 + p + k :]
        return ThetaParams(beta, sigma2, unvech(alpha, q), lam, self.family,
                           self.dependence.with_phi(phi) if p else self.dependence)

    def theta_star_names(self, fixed_names=None):
        l, q = self.beta.size, self.q
        fixed_names = list(fixed_names) if fixed_names is not None else [f"beta{j}" for j in range(l)]
        names = [f"beta[{n}]" for n in fixed_names] + ["sigma2"]
        names += [f"phi{j + 1}" for j in range(self.dependence.n_phi)]
        names += [f"F[{i},{j}]" for i in range(q) for j in range(i, q)]
        names += [f"lambda{j + 1}" for j in range(q)]
        return names


# ---------------------------------------------------------------------------
# marginal quantities
# ---------------------------------------------------------------------------


def corr_stack(dependence, batch):
    """``(R, log|R|, R^{-1})`` for every subject of a batch (shared per time grid)."""
    Ru = np.array([build_corr(dependence, t) for t in batch.times])
    logdet, Rinv = chol_logdet_inv(Ru)
    return Ru[batch.inverse], logdet[batch.inverse], Rinv[batch.inverse]


@dataclass
class BatchMarginal:
    """Stacked marginal quantities for one batch."""

    R: np.ndarray
    logdetR: np.ndarray
    Rinv: np.ndarray
    Psi: np.ndarray
    Psi_inv: np.ndarray
    logdet_psi: np.ndarray
    resid: np.ndarray  # y - X beta - c Z Delta
    d: np.ndarray
    A: np.ndarray
    a: np.ndarray  # sqrt(1 + zeta' Lambda zeta)
    Zv: np.ndarray  # Z F lambda


def batch_marginal(theta, batch, corr=None):
    """Marginal quantities of all subjects in ``batch``."""
    R, logdetR, Rinv = corr if corr is not None else corr_stack(theta.dependence, batch)
    Z = batch.Z
    q = theta.q
    Sigma = theta.sigma2 * R
    if q:
        Psi = Sigma + Z @ theta.D @ np.swapaxes(Z, 1, 2)
        Zv = Z @ (theta.F @ theta.lam)
        loc = batch.X @ theta.beta + theta.c * (Z @ theta.Delta)
    else:
        Psi = Sigma
        Zv = np.zeros(batch.y.shape)
        loc = batch.X @ theta.beta
    logdet, Psi_inv = chol_logdet_inv(Psi)
    r = batch.y - loc
    Pr = np.einsum("bij,bj->bi", Psi_inv, r)
    d = np.einsum("bi,bi->b", r, Pr)
    a2 = 1.0 + theta.lam @ theta.lam - np.einsum("bi,bij,bj->b", Zv, Psi_inv, Zv)
    if np.any(a2 <= 0):
        raise SingularDispersion("non-positive skewness normaliser")
    a = np.sqrt(a2)
    A = np.einsum("bi,bi->b", Zv, Pr) / a
    return BatchMarginal(R, logdetR, Rinv, Psi, Psi_inv, logdet, r, d, A, a, Zv)


def marginal_loglik(theta, data, per_subject=False, corr_cache=None):
    """Observed-data log-likelihood ``sum_i log f(y_i; theta)``.

    Parameters
    ----------
    theta : ThetaParams
    data : LongitudinalDataset
    per_subject : bool
        Return the vector of subject contributions instead of the sum.
    corr_cache : list, optional
        Precomputed :func:`corr_stack` output per batch.
    """
    out = np.empty(data.n_subjects)
    for k, batch in enumerate(data.batches):
        m = batch_marginal(theta, batch, None if corr_cache is None else corr_cache[k])
        n = batch.n
        out[batch.index] = (math.log(2.0) - 0.5 * n * LOG2PI - 0.5 * m.logdet_psi
                            + log_iphi_cdf(theta.family, 0.5 * n, m.d, m.A))
    return out if per_subject else float(out.sum())


@dataclass(frozen=True)
class MarginalMoments:
    """Marginal law quantities of one subject."""

    Sigma: np.ndarray
    Psi: np.ndarray
    Lambda: np.ndarray
    zeta: np.ndarray
    lam_bar: np.ndarray
    Upsilon: np.ndarray | None
    resid: np.ndarray
    d: float
    A: float


def marginal_moments(theta, subject):
    """All marginal quantities of one subject, including ``lambda_bar`` and ``Upsilon``."""
    R = build_corr(theta.dependence, subject.t)
    Sigma = theta.sigma2 * R
    Z = subject.Z
    q = theta.q
    if q:
        D = theta.D
        Psi = Sigma + Z @ D @ Z.T
        Sigma_inv = np.linalg.inv(Sigma)
        Lambda = np.linalg.inv(np.linalg.inv(D) + Z.T @ Sigma_inv @ Z)
        zeta = np.linalg.solve(theta.F, theta.lam)
        lam_bar = sym_sqrt(Psi, inverse=True) @ Z @ D @ zeta / math.sqrt(1.0 + zeta @ Lambda @ zeta)
        loc = subject.X @ theta.beta + theta.c * Z @ theta.Delta
    else:
        Psi, Lambda, zeta = Sigma, np.zeros((0, 0)), np.zeros(0)
        lam_bar = np.zeros(subject.n)
        loc = subject.X @ theta.beta
    try:
        k2 = theta.family.k2
        ZD = Z @ theta.Delta
        Upsilon = k2 * Psi - theta.c**2 * np.outer(ZD, ZD)
    except ValueError:
        Upsilon = None
    r = subject.y - loc
    Pir = sym_sqrt(Psi, inverse=True) @ r
    return MarginalMoments(Sigma, Psi, Lambda, zeta, lam_bar, Upsilon, r, float(Pir @ Pir), float(lam_bar @ Pir))
