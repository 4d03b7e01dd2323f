"""Data generation and Monte Carlo studies.

Datasets are drawn through the hierarchical representation

    U ~ H(nu),  T | U ~ TN(c, 1/U; (c, inf)),
    b | T, U ~ N(Delta T, Gamma / U),  e | U ~ N(0, sigma2 R / U),

and replicate ``k`` of a scenario always uses the RNG stream
``default_rng([seed, k])``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from ._linalg import sym_sqrt
from .dependence import DependenceSpec, build_corr
from .estimate import FitOptions, fit, initialize
from .exceptions import SmsnLmmError, ValidationError
from .inference import standard_errors
from .mixing import MixingFamily
from .model import LongitudinalDataset, SubjectBlock, ThetaParams

log = logging.getLogger(__name__)

DESIGNS = ("uniform_x", "time_group")


@dataclass
class Scenario:
    """A data-generating recipe.

    Parameters
    ----------
    name : str
    n_subjects : int
    n_times : int
        Measurements per subject at times ``1..n_times``.
    design : {"uniform_x", "time_group"}
        ``uniform_x``: ``X = [1, x]`` with ``x ~ U(0, 2)`` and a random
        intercept. ``time_group``: ``X = [1, t, w]`` with ``w = 1`` for the
        second half of the subjects and ``Z = [1, t]``.
    theta : ThetaParams
        True parameters, including family and dependence.
    centered : bool
        If false the latent ``T`` is truncated at zero rather than at ``c``.
    replicates, seed : int
    """

    name: str
    n_subjects: int
    n_times: int
    design: str
    theta: ThetaParams
    centered: bool = True
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValidationError(f"unknown design {self.design!r}")
        if self.n_subjects < 1 or self.n_times < 1 or self.replicates < 1:
            raise ValidationError("subject, time and replicate counts must be positive")
        q = 1 if self.design == "uniform_x" else 2
        l = 2 if self.design == "uniform_x" else 3
        if self.theta.q != q or self.theta.beta.size != l:
            raise ValidationError(f"design {self.design} needs q={q} and {l} fixed effects")

    # serialisation ------------------------------------------------------
    def to_dict(self):
        th = self.theta
        return {
            "name": self.name, "n_subjects": self.n_subjects, "n_times": self.n_times,
            "design": self.design, "centered": self.centered, "replicates": self.replicates,
            "seed": self.seed, "beta": th.beta.tolist(), "sigma2": th.sigma2,
            "D": th.D.tolist(), "F": th.F.tolist(), "lambda": th.lam.tolist(),
            "family": th.family.name, "nu": list(th.family.nu),
            "dependence": th.dependence.kind, "phi": list(th.dependence.phi),
        }

    @classmethod
    def from_dict(cls, doc):
        fam = MixingFamily(doc.get("family", "SN"), tuple(doc.get("nu", ())))
        kind = doc.get("dependence", "CI").upper()
        phi = tuple(doc.get("phi", ()))
        dep = DependenceSpec(kind, len(phi) if kind == "AR" else 0, phi)
        if "F" in doc:
            # the exact square root keeps reloaded scenarios bit-identical
            theta = ThetaParams(doc["beta"], doc["sigma2"], doc["F"], doc["lambda"], fam, dep)
        else:
            theta = ThetaParams.from_D(doc["beta"], doc["sigma2"], doc["D"], doc["lambda"], fam, dep)
        return cls(doc["name"], int(doc["n_subjects"]), int(doc["n_times"]), doc["design"], theta,
                   bool(doc.get("centered", True)), int(doc.get("replicates", 1)), int(doc.get("seed", 0)))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def with_(self, **kw):
        doc = self.to_dict()
        theta = kw.pop("theta", None)
        if "D" in kw:
            doc.pop("F")
        out = Scenario.from_dict({**doc, **kw})
        if theta is not None:
            out.theta = theta
        return out


# ---------------------------------------------------------------------------
# built-in scenarios
# ---------------------------------------------------------------------------

_FAMILIES = {
    "SN": MixingFamily.sn(),
    "ST": MixingFamily.st(6.0),
    "SSL": MixingFamily.ssl(1.7),
    "SCN": MixingFamily.scn(0.25, 0.3),
}
AR2 = DependenceSpec.ar((0.6, -0.2))


def study1(family="SN", n_subjects=100, replicates=50, seed=1):
    theta = ThetaParams.from_D([1.0, 2.0], 0.25, [[2.0]], [3.0], _FAMILIES[family], AR2)
    return Scenario(f"study1-{family.lower()}-n{n_subjects}", n_subjects, 10, "uniform_x", theta,
                    True, replicates, seed)


def study2(family="SN", replicates=50, seed=2):
    theta = ThetaParams.from_D([1.0, 2.0, 1.5], 0.25, [[2.0, 0.2], [0.2, 1.0]], [2.0, 5.0],
                               _FAMILIES[family], AR2)
    return Scenario(f"study2-{family.lower()}", 100, 10, "time_group", theta, True, replicates, seed)


def study3(n_times=10, replicates=50, seed=3):
    theta = ThetaParams.from_D([1.0, 2.0], 0.25, [[2.0]], [3.0], _FAMILIES["ST"], AR2)
    return Scenario(f"study3-nj{n_times}", 100, n_times, "uniform_x", theta, True, replicates, seed)


def study_uncentered(family="ST", replicates=50, seed=4):
    theta = ThetaParams.from_D([1.0, 2.0], 0.25, [[2.0]], [3.0], _FAMILIES[family], AR2)
    return Scenario(f"uncentered-{family.lower()}", 100, 10, "uniform_x", theta, False, replicates, seed)


SCENARIOS = {
    "study1": study1,
    "study2": study2,
    "study3": study3,
    "uncentered": study_uncentered,
}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def replicate_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _design(scenario, rng):
    n, m = scenario.n_subjects, scenario.n_times
    t = np.arange(1.0, m + 1.0)
    if scenario.design == "uniform_x":
        x = rng.uniform(0.0, 2.0, size=(n, m))
        X = np.stack([np.ones((n, m)), x], axis=2)
        Z = np.ones((n, m, 1))
    else:
        w = (np.arange(n) >= n // 2).astype(float)
        X = np.stack([np.ones((n, m)), np.broadcast_to(t, (n, m)), np.repeat(w[:, None], m, 1)], axis=2)
        Z = np.stack([np.ones((n, m)), np.broadcast_to(t, (n, m))], axis=2)
    return t, X, Z


def draw_hierarchical(theta, X, Z, times, rng, centered=True):
    """Draw ``(u, T, b, e, y)`` for stacked subjects on a common time grid.

    Parameters
    ----------
    theta : ThetaParams
    X, Z : ndarray of shape (n, m, l) and (n, m, q)
    times : ndarray of shape (m,)
    rng : numpy.random.Generator
    centered : bool
        Truncate ``T`` at ``c`` (true model) or at zero.
    """
    n, m = X.shape[:2]
    q = theta.q
    u = theta.family.sample_u(rng, n)
    loc = theta.c if centered else 0.0
    # inverse-cdf draw from the normal truncated to (loc, inf)
    v = rng.random(n)
    T = loc + special.ndtri(0.5 + 0.5 * v) / np.sqrt(u)
    G = theta.Gamma
    if q:
        w, V = np.linalg.eigh(0.5 * (G + G.T))
        Gh = (V * np.sqrt(np.clip(w, 0, None))) @ V.T
        b = T[:, None] * theta.Delta + (rng.standard_normal((n, q)) @ Gh) / np.sqrt(u)[:, None]
    else:
        b = np.zeros((n, 0))
    R = build_corr(theta.dependence, times)
    L = np.linalg.cholesky(theta.sigma2 * R)
    e = (rng.standard_normal((n, m)) @ L.T) / np.sqrt(u)[:, None]
    y = X @ theta.beta + np.einsum("bij,bj->bi", Z, b) + e
    return u, T, b, e, y


def generate(scenario, replicate_index=0, return_latent=False):
    """Dataset of one replicate (deterministic in ``(seed, replicate_index)``)."""
    rng = replicate_rng(scenario.seed, replicate_index)
    t, X, Z = _design(scenario, rng)
    u, T, b, e, y = draw_hierarchical(scenario.theta, X, Z, t, rng, scenario.centered)
    subjects = [SubjectBlock(i + 1, y[i], X[i], Z[i], t) for i in range(scenario.n_subjects)]
    data = LongitudinalDataset(subjects)
    if return_latent:
        return data, {"u": u, "T": T, "b": b, "e": e}
    return data


def perturbed_start(theta, rng, data, dependence=None, family=None):
    """Truth plus ``N(0, (0.1 |truth| + 0.01)^2)`` noise on ``beta, sigma2, F, lambda``.

    ``phi`` comes from the data-driven initialiser and ``nu`` from the default starts.
    """
    family = family or theta.family
    dependence = dependence or theta.dependence

    def jitter(x):
        x = np.asarray(x, float)
        return x + rng.normal(0.0, 0.1 * np.abs(x) + 0.01, size=x.shape)

    base = initialize(data, family, dependence)
    D = theta.D
    F = sym_sqrt(D)
    Fj = jitter(F)
    Fj = 0.5 * (Fj + Fj.T)
    try:
        sym_sqrt(Fj @ Fj)
    except SmsnLmmError:
        Fj = F
    return ThetaParams(jitter(theta.beta), abs(float(jitter(theta.sigma2))) + 1e-6, Fj,
                       jitter(theta.lam), base.family, base.dependence)


# ---------------------------------------------------------------------------
# study runner
# ---------------------------------------------------------------------------


@dataclass
class StudyReport:
    """Per-replicate estimates, aggregated summaries and selection counts."""

    scenario: str
    estimates: pd.DataFrame
    summary: pd.DataFrame
    selection: pd.DataFrame
    failures: int = 0
    failure_messages: list = field(default_factory=list)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "failures": self.failures,
            "failure_messages": self.failure_messages,
            "summary": self.summary.to_dict(orient="records"),
            "selection": self.selection.to_dict(orient="records"),
        }


def _candidate_label(family, dependence):
    return f"{family.name}-{dependence}"


def run_study(scenario, candidates=None, options=None, start="perturbed", with_se=True,
              replicates=None, traces=None, callback=None):
    """Fit every replicate of ``scenario`` with each candidate model.

    Parameters
    ----------
    scenario : Scenario
    candidates : list of (MixingFamily, DependenceSpec), optional
        Defaults to the generating model only.
    options : FitOptions, optional
    start : {"perturbed", "data"}
        ``perturbed`` starts from the truth plus small noise, ``data`` from
        :func:`initialize`.
    with_se : bool
        Compute standard errors (needed for ML-SE averages).
    replicates : int, optional
        Override the scenario replicate count.
    traces : list, optional
        If given, every fit's log-likelihood trace is appended to it.
    callback : callable, optional
        Called as ``callback(replicate, label, data, result)`` after every fit.
    """
    options = options or FitOptions()
    truth = scenario.theta
    candidates = candidates or [(truth.family, truth.dependence)]
    reps = replicates or scenario.replicates
    rows = []
    failures, messages = 0, []
    for k in range(reps):
        data = generate(scenario, k)
        rng = np.random.default_rng([scenario.seed, k, 1])
        for fam, dep in candidates:
            label = _candidate_label(fam, dep)
            try:
                if start == "perturbed" and truth.q:
                    theta0 = perturbed_start(truth, rng, data, dep, fam)
                else:
                    theta0 = initialize(data, fam, dep, options)
                res = fit(data, fam, dep, options, theta0=theta0)
            except (SmsnLmmError, np.linalg.LinAlgError, FloatingPointError) as exc:
                failures += 1
                messages.append(f"replicate {k} {label}: {exc}")
                continue
            if traces is not None:
                traces.append(res.trace)
            if callback is not None:
                callback(k, label, data, res)
            th = res.theta
            se = None
            if with_se:
                try:
                    se = standard_errors(th, data)
                except SmsnLmmError:
                    se = None
            names = th.theta_star_names([str(j) for j in range(th.beta.size)])
            values = th.theta_star()
            extra = {f"nu{j + 1}": v for j, v in enumerate(th.family.nu)}
            row = {"replicate": k, "model": label, "loglik": res.loglik, "aic": res.aic, "bic": res.bic,
                   "converged": res.converged, "iterations": res.iterations}
            for j, (nm, v) in enumerate(zip(names, values)):
                row[nm] = v
                row[f"se:{nm}"] = np.nan if se is None else se[j]
            row.update(extra)
            rows.append(row)
    est = pd.DataFrame(rows)
    summary = _summarise(est, truth)
    selection = _selection(est)
    return StudyReport(scenario.name, est, summary, selection, failures, messages)


def _true_values(truth):
    names = truth.theta_star_names([str(j) for j in range(truth.beta.size)])
    vals = dict(zip(names, truth.theta_star()))
    vals.update({f"nu{j + 1}": v for j, v in enumerate(truth.family.nu)})
    return vals


def _summarise(est, truth):
    if est.empty:
        return pd.DataFrame(columns=["model", "parameter", "true", "mc_av", "mc_sd", "ml_se", "bias", "rel_bias"])
    tv = _true_values(truth)
    out = []
    skip = {"replicate", "model", "loglik", "aic", "bic", "converged", "iterations"}
    for model, grp in est.groupby("model", sort=False):
        for col in grp.columns:
            if col in skip or col.startswith("se:") or grp[col].isna().all():
                continue
            vals = grp[col].to_numpy(float)
            true = tv.get(col, np.nan)
            se_col = f"se:{col}"
            ml_se = float(np.nanmean(grp[se_col])) if se_col in grp and grp[se_col].notna().any() else np.nan
            bias = vals - true
            out.append({
                "model": model, "parameter": col, "true": true,
                "mc_av": float(np.mean(vals)), "mc_sd": float(np.std(vals, ddof=1)) if vals.size > 1 else np.nan,
                "ml_se": ml_se, "bias": float(np.mean(bias)),
                "rel_bias": float(np.mean(bias / true)) if np.isfinite(true) and true != 0 else np.nan,
            })
    return pd.DataFrame(out)


def _selection(est):
    if est.empty or est["model"].nunique() < 2:
        return pd.DataFrame(columns=["criterion", "model", "selected"])
    out = []
    for crit in ("aic", "bic"):
        winners = est.loc[est.groupby("replicate")[crit].idxmin(), "model"]
        counts = winners.value_counts()
        for model in est["model"].unique():
            out.append({"criterion": crit.upper(), "model": model, "selected": int(counts.get(model, 0))})
    return pd.DataFrame(out)
