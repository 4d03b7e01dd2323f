"""Within-subject correlation structures.

Three structures are available: conditional independence (``CI``), a
stationary autoregression of order ``p`` (``AR``) and the damped exponential
correlation (``DEC``) ``phi1 ** (|t_j - t_k| ** phi2)``.

Optimisation works on an unconstrained vector ``eta``. For AR the map goes
through partial autocorrelations (``tanh`` link plus the Durbin-Levinson
recursion); for DEC it is ``(logit(phi1), log(phi2))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .exceptions import InvalidGrid, NonStationary, ValidationError

DEC_PHI1_FLOOR = 1e-10
DEC_PHI2_CAP = 50.0
AR_FD_STEP = 1e-7
# partial autocorrelations are kept this far inside (-1, 1)
PACF_BOUND = 1 - 1e-6


@dataclass(frozen=True)
class DependenceSpec:
    """Declarative correlation structure.

    Parameters
    ----------
    kind : {"CI", "AR", "DEC"}
    order : int
        AR order ``p``. Ignored otherwise.
    phi : tuple of float
        Current parameter values. Length ``p`` for AR, 2 for DEC, 0 for CI.
    """

    kind: str = "CI"
    order: int = 0
    phi: tuple = field(default=())

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in ("CI", "AR", "DEC"):
            raise ValidationError(f"unknown dependence structure {self.kind!r}")
        order = int(self.order)
        phi = tuple(float(v) for v in np.atleast_1d(self.phi)) if len(np.atleast_1d(self.phi)) else ()
        if kind == "CI":
            order, phi = 0, ()
        elif kind == "AR":
            if order < 1:
                order = len(phi)
            if order < 1:
                raise ValidationError("AR order must be at least 1")
            if not phi:
                phi = (0.0,) * order
            if len(phi) != order:
                raise ValidationError(f"AR({order}) needs {order} coefficients")
            check_stationary(phi)
        else:
            order = 0
            if not phi:
                phi = (0.5, 1.0)
            if len(phi) != 2:
                raise ValidationError("DEC needs (phi1, phi2)")
            if not (0.0 <= phi[0] < 1.0) or phi[1] < 0:
                raise ValidationError("DEC requires 0 <= phi1 < 1 and phi2 >= 0")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def ci(cls):
        return cls("CI")

    @classmethod
    def ar(cls, phi):
        phi = tuple(np.atleast_1d(phi))
        return cls("AR", len(phi), phi)

    @classmethod
    def dec(cls, phi1, phi2):
        return cls("DEC", 0, (phi1, phi2))

    @classmethod
    def parse(cls, text):
        """Parse ``ci``, ``ar:p`` or ``dec``."""
        text = text.strip().lower()
        if text == "ci":
            return cls.ci()
        if text == "dec":
            return cls("DEC")
        if text == "ar" or text.startswith("ar:"):
            _, _, p = text.partition(":")
            try:
                return cls("AR", int(p) if p else 1)
            except ValueError as exc:
                raise ValidationError(f"bad AR order in {text!r}") from exc
        raise ValidationError(f"unknown dependence structure {text!r}")

    @property
    def n_phi(self):
        return len(self.phi)

    @property
    def needs_integer_times(self):
        return self.kind == "AR"

    def with_phi(self, phi):
        return DependenceSpec(self.kind, self.order, tuple(np.atleast_1d(phi)) if self.kind != "CI" else ())

    def __str__(self):
        return {"CI": "CI", "AR": f"AR({self.order})", "DEC": "DEC"}[self.kind]

    # unconstrained parameterisation ----------------------------------------
    def to_unconstrained(self):
        if self.kind == "AR":
            return pacf_transform(self.phi)
        if self.kind == "DEC":
            p1 = min(max(self.phi[0], DEC_PHI1_FLOOR), 1 - 1e-12)
            p2 = min(max(self.phi[1], 1e-10), DEC_PHI2_CAP)
            return np.array([special.logit(p1), np.log(p2)])
        return np.empty(0)

    def from_unconstrained(self, eta):
        eta = np.asarray(eta, float)
        if self.kind == "AR":
            return self.with_phi(pacf_inverse(eta))
        if self.kind == "DEC":
            p1 = max(float(special.expit(eta[0])), DEC_PHI1_FLOOR)
            p1 = min(p1, 1 - 1e-12)
            p2 = min(float(np.exp(eta[1])), DEC_PHI2_CAP)
            return self.with_phi((p1, p2))
        return self


def check_stationary(phi):
    """Raise :class:`NonStationary` unless all AR roots lie outside the unit circle.

    Uses the step-down recursion: the process is stationary exactly when every
    partial autocorrelation lies in (-1, 1).
    """
    phi = np.asarray(phi, float)
    if phi.size == 0:
        return
    if not np.all(np.isfinite(phi)):
        raise NonStationary("non-finite AR coefficients")
    try:
        _phi_to_pacf(phi)
    except NonStationary:
        raise NonStationary(f"AR coefficients {tuple(phi.tolist())} are not stationary") from None


def yule_walker_acf(phi, max_lag):
    """Autocorrelations ``rho_0..rho_max_lag`` of a stationary AR process."""
    phi = np.asarray(phi, float)
    check_stationary(phi)
    rho = _acf_fast(phi, max_lag) if phi.size else np.ones(1 + max_lag) * (np.arange(max_lag + 1) == 0)
    return rho[: max_lag + 1]


def _ar_variance_factor(phi, rho):
    return 1.0 / (1.0 - np.dot(phi, rho[1 : len(phi) + 1]))


def _check_times(times, spec):
    t = np.asarray(times, float)
    if t.ndim != 1:
        raise InvalidGrid("times must be one-dimensional")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise InvalidGrid("times must be strictly increasing")
    if spec.needs_integer_times and not np.allclose(t, np.round(t), atol=1e-9, rtol=0):
        raise InvalidGrid("AR structures need integer-valued times")
    return t


def build_corr(spec, times):
    """The ``n x n`` correlation (AR: scaled autocovariance) matrix on ``times``."""
    t = _check_times(times, spec)
    n = t.size
    if spec.kind == "CI":
        return np.eye(n)
    lags = np.abs(t[:, None] - t[None, :])
    if spec.kind == "AR":
        lag_int = np.rint(lags).astype(int)
        rho = yule_walker_acf(spec.phi, max(int(lag_int.max()) if n else 0, spec.order))
        return rho[lag_int] * _ar_variance_factor(spec.phi, rho)
    phi1, phi2 = spec.phi
    # phi2 > 2 can give indefinite matrices; the likelihood then rejects them
    with np.errstate(divide="ignore", over="ignore"):
        R = np.power(phi1, np.power(lags, phi2))
    np.fill_diagonal(R, 1.0)
    return R


def corr_derivatives(spec, times):
    """List of ``dR/dphi_s`` for each dependence parameter (natural scale)."""
    t = _check_times(times, spec)
    n = t.size
    if spec.kind == "CI":
        return []
    if spec.kind == "AR":
        out = []
        phi = np.array(spec.phi)
        for s in range(phi.size):
            e = np.zeros(phi.size)
            e[s] = AR_FD_STEP
            up = build_corr(spec.with_phi(phi + e), t)
            dn = build_corr(spec.with_phi(phi - e), t)
            out.append((up - dn) / (2 * AR_FD_STEP))
        return out
    phi1, phi2 = spec.phi
    lags = np.abs(t[:, None] - t[None, :])
    off = ~np.eye(n, dtype=bool)
    g = np.ones((n, n))
    g[off] = lags[off] ** phi2
    d1 = np.zeros((n, n))
    d2 = np.zeros((n, n))
    d1[off] = g[off] * phi1 ** (g[off] - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2[off] = phi1 ** g[off] * np.log(phi1) * g[off] * np.log(lags[off])
    d2[~np.isfinite(d2)] = 0.0
    return [d1, d2]


# ---------------------------------------------------------------------------
# AR stationarity bijection
# ---------------------------------------------------------------------------


def _pacf_to_phi(pacf):
    phi = np.zeros(0)
    for k, pk in enumerate(pacf, start=1):
        new = np.empty(k)
        new[: k - 1] = phi - pk * phi[::-1]
        new[k - 1] = pk
        phi = new
    return phi


def _phi_to_pacf(phi):
    phi = np.asarray(phi, float).copy()
    p = phi.size
    pacf = np.empty(p)
    for k in range(p, 0, -1):
        pk = phi[k - 1]
        if abs(pk) >= 1.0:
            raise NonStationary("partial autocorrelation outside (-1, 1)")
        pacf[k - 1] = pk
        phi = (phi[: k - 1] + pk * phi[: k - 1][::-1]) / (1.0 - pk * pk)
    return pacf


def pacf_transform(phi):
    """Map stationary AR coefficients to an unconstrained vector."""
    check_stationary(phi)
    return np.arctanh(_phi_to_pacf(phi))


def pacf_inverse(eta):
    """Map any real vector to stationary AR coefficients."""
    eta = np.asarray(eta, float)
    # keep partial autocorrelations strictly inside (-1, 1) in floating point
    pacf = np.clip(np.tanh(eta), -PACF_BOUND, PACF_BOUND)
    return _pacf_to_phi(pacf)


def corr_batch_from_unconstrained(spec, eta, grids):
    """Correlation matrices on several time grids straight from ``eta``.

    A validation-free fast path for optimisers. ``grids`` is a list of 2-D
    arrays of unique time rows; returns one stacked array per grid.
    """
    if spec.kind == "AR":
        phi = pacf_inverse(eta)
        maxlag = max(int(np.rint(g.max() - g.min())) if g.size else 0 for g in grids)
        rho = _acf_fast(phi, maxlag)
        scale = _ar_variance_factor(phi, rho)
        out = []
        for g in grids:
            lags = np.rint(np.abs(g[:, :, None] - g[:, None, :])).astype(int)
            out.append(rho[lags] * scale)
        return out
    if spec.kind == "DEC":
        p1 = min(max(float(special.expit(eta[0])), DEC_PHI1_FLOOR), 1 - 1e-12)
        p2 = min(float(np.exp(eta[1])), DEC_PHI2_CAP)
        out = []
        for g in grids:
            lags = np.abs(g[:, :, None] - g[:, None, :])
            with np.errstate(divide="ignore", over="ignore"):
                R = np.power(p1, np.power(lags, p2))
            idx = np.arange(g.shape[1])
            R[:, idx, idx] = 1.0
            out.append(R)
        return out
    return [np.broadcast_to(np.eye(g.shape[1]), (g.shape[0], g.shape[1], g.shape[1])).copy() for g in grids]


def _acf_fast(phi, max_lag):
    p = phi.size
    rho = np.zeros(max(max_lag, p) + 1)
    rho[0] = 1.0
    M = np.eye(p)
    rhs = np.zeros(p)
    for k in range(1, p + 1):
        for j in range(1, p + 1):
            lag = abs(k - j)
            if lag == 0:
                rhs[k - 1] += phi[j - 1]
            else:
                M[k - 1, lag - 1] -= phi[j - 1]
    rho[1 : p + 1] = np.linalg.solve(M, rhs)
    for k in range(p + 1, rho.size):
        rho[k] = phi @ rho[k - p : k][::-1]
    return rho
