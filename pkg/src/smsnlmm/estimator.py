"""scikit-learn compatible wrapper around :func:`smsnlmm.estimate.fit`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import posthoc
from .dependence import DependenceSpec
from .estimate import NU_START, FitOptions, fit
from .exceptions import ValidationError
from .inference import inference_report
from .mixing import MixingFamily
from .model import LongitudinalDataset, validate


def _family(name):
    name = str(name).upper()
    if name == "SN":
        return MixingFamily.sn()
    if name not in NU_START:
        raise ValidationError(f"unknown family {name!r}")
    return MixingFamily(name, NU_START[name])


class SmsnLmmRegressor(RegressorMixin, BaseEstimator):
    """Skew scale-mixture linear mixed model.

    Parameters
    ----------
    family : {"sn", "st", "ssl", "scn"}
    dependence : str
        ``"ci"``, ``"ar:p"`` or ``"dec"``.
    random_intercept : bool
        Prepend a column of ones to the random-effects design.
    tol, max_iter : float, int
        Stopping controls of the ECME iteration.
    compute_se : bool
        Compute standard errors after fitting.

    Notes
    -----
    ``X`` is the fixed-effects design including any intercept column. Subjects
    are identified through ``groups``; ``times`` default to ``1..n_i`` in row
    order and ``Z`` to a random intercept.
    """

    def __init__(self, family="sn", dependence="ci", random_intercept=True, tol=1e-9, max_iter=300,
                 compute_se=True):
        self.family = family
        self.dependence = dependence
        self.random_intercept = random_intercept
        self.tol = tol
        self.max_iter = max_iter
        self.compute_se = compute_se

    def _dataset(self, X, y, groups, times, Z):
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValidationError("groups must have one entry per row")
        Z = self._random_design(X.shape[0], Z)
        times = self._times(groups, times)
        return LongitudinalDataset.from_long(y, X, Z, groups, times)

    def _random_design(self, n, Z):
        parts = [np.ones((n, 1))] if self.random_intercept else []
        if Z is not None:
            parts.append(check_array(Z, ensure_2d=True).reshape(n, -1))
        if not parts:
            return np.zeros((n, 0))
        return np.hstack(parts)

    @staticmethod
    def _times(groups, times):
        if times is not None:
            return np.asarray(times, float).ravel()
        out = np.empty(groups.shape[0])
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            out[idx] = np.arange(1, idx.size + 1)
        return out

    def fit(self, X, y, groups, times=None, Z=None):
        """Fit from long-format arrays."""
        X, y = check_X_y(X, y, y_numeric=True)
        dep = DependenceSpec.parse(self.dependence)
        data = validate(self._dataset(X, y, groups, times, Z), dep)
        res = fit(data, _family(self.family), dep, FitOptions(tol=self.tol, max_iter=self.max_iter))
        self.result_ = res
        self.theta_ = res.theta
        self.coef_ = res.theta.beta.copy()
        self.loglik_ = res.loglik
        self.aic_, self.bic_ = res.aic, res.bic
        self.converged_ = res.converged
        self.n_features_in_ = X.shape[1]
        self.data_ = data
        self.random_effects_ = {s.id: b for s, b in zip(data, posthoc.eb_all(res.theta, data))}
        self.inference_ = inference_report(res.theta, data) if self.compute_se else None
        return self

    def predict(self, X, groups=None, Z=None):
        """Subject-specific mean ``X beta + Z b_hat`` (population mean for unseen groups)."""
        check_is_fitted(self, "theta_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        yhat = X @ self.theta_.beta
        if groups is None:
            return yhat
        groups = np.asarray(groups)
        Zr = self._random_design(X.shape[0], Z)
        for k, g in enumerate(groups):
            b = self.random_effects_.get(g.item() if hasattr(g, "item") else g)
            if b is not None:
                yhat[k] += Zr[k] @ b
        return yhat

    def predict_future(self, group, X_new, times_new, Z_new=None):
        """Conditional mean of future responses of a fitted subject."""
        check_is_fitted(self, "theta_")
        key = {s.id: s for s in self.data_}
        if group not in key:
            raise ValidationError(f"unknown group {group!r}")
        X_new = check_array(X_new)
        return posthoc.predict_future(self.theta_, key[group], X_new,
                                      self._random_design(X_new.shape[0], Z_new), times_new)
