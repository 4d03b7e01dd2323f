"""Command-line interface.

Subcommands ``fit``, ``predict``, ``diagnose``, ``simulate`` and ``study``.
Exit status is 0 on success, 2 on invalid input and 3 when ``--strict`` is
given and the fit did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import io, posthoc, simkit
from .dependence import DependenceSpec
from .estimate import NU_START, FitOptions, fit
from .exceptions import SmsnLmmError, UnequalLengths, ValidationError
from .inference import inference_report
from .mixing import MixingFamily

DEFAULT_SEED = 20240601
EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("smsnlmm")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; keep messages on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _family_factory(text):
    # families carry their default starting nu; the fit re-estimates it
    name = text.strip().upper()
    if name == "SN":
        return MixingFamily.sn()
    if name not in NU_START:
        raise ValidationError(f"unknown family {text!r}")
    return MixingFamily(name, NU_START[name])


def _bindings(args, require_response=True):
    if args.formula:
        b = io.Bindings.from_formula(args.formula, id=args.id, time=args.time)
    else:
        b = io.Bindings(args.response, _split(args.fixed), _split(args.random), args.id, args.time,
                        not args.no_intercept, not args.no_random_intercept)
    if require_response and not b.response:
        raise ValidationError("a response column is required")
    return b


def _split(text):
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def _options(args):
    return FitOptions(tol=args.tol, max_iter=args.max_iter)


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--family", choices=["sn", "st", "ssl", "scn"], default="sn", type=str.lower)
    g.add_argument("--dep", default="ci", help="ci, ar:p or dec")
    g.add_argument("--tol", type=float, default=1e-9)
    g.add_argument("--max-iter", type=int, default=300)
    g.add_argument("--strict", action="store_true", help="exit with status 3 if the fit does not converge")


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("data", help="long-format CSV file")
    g.add_argument("--formula", help='e.g. "y ~ x1 + x2 | 1 + x1" (random terms after |)')
    g.add_argument("--response", default="y")
    g.add_argument("--fixed", default="", help="comma-separated fixed-effect columns")
    g.add_argument("--random", default="", help="comma-separated random-effect columns")
    g.add_argument("--id", default="id")
    g.add_argument("--time", default="time")
    g.add_argument("--no-intercept", action="store_true")
    g.add_argument("--no-random-intercept", action="store_true")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (default {DEFAULT_SEED}, or the scenario's own seed)")
    p.add_argument("--out", default=None, help="output .json file or directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="smsnlmm", description="Skew scale-mixture linear mixed models")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model to a CSV file")
    _add_data_args(p)
    _add_model_args(p)
    _add_common(p)
    p.add_argument("--no-se", action="store_true", help="skip standard errors")

    p = sub.add_parser("predict", help="EB effects and predictions of future responses")
    _add_data_args(p)
    _add_model_args(p)
    _add_common(p)
    p.add_argument("--model", help="fit JSON to reuse instead of refitting")
    p.add_argument("--newdata", required=True, help="CSV of future rows (response column optional)")

    p = sub.add_parser("diagnose", help="Mahalanobis, Healy and residual ACF tables")
    _add_data_args(p)
    _add_model_args(p)
    _add_common(p)
    p.add_argument("--model", help="fit JSON to reuse instead of refitting")
    p.add_argument("--envelope-m", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--max-lag", type=int, default=None)

    p = sub.add_parser("simulate", help="draw one dataset from a scenario")
    p.add_argument("--scenario", default="study1", help="study1[:fam], study2[:fam], study3[:n_j], uncentered[:fam] or a JSON file")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--n-subjects", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("study", help="run a Monte Carlo study")
    p.add_argument("--scenario", default="study1")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--candidates", default=None,
                   help="comma-separated family/dep pairs like sn/ci,sn/ar:2 (default: generating model)")
    p.add_argument("--start", choices=["perturbed", "data"], default="perturbed")
    p.add_argument("--no-se", action="store_true")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=300)
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _fit_or_load(args, data, bindings):
    if getattr(args, "model", None):
        doc = json.loads(Path(args.model).read_text())
        theta = io.theta_from_dict(doc["theta"])
        return theta, None, doc
    family = _family_factory(args.family)
    dep = DependenceSpec.parse(args.dep)
    res = fit(data, family, dep, _options(args))
    return res.theta, res, None


def _fitted_table(theta, data, eb):
    rows = []
    for s, b in zip(data, eb):
        marg = s.X @ theta.beta
        cond = marg + s.Z @ b
        for j in range(s.n):
            rows.append({"id": s.id, "time": s.t[j], "y": s.y[j], "marginal": marg[j], "fitted": cond[j]})
    return pd.DataFrame(rows)


def _eb_table(data, eb, names):
    frame = pd.DataFrame(eb, columns=[f"b[{n}]" for n in names])
    frame.insert(0, "id", [s.id for s in data])
    return frame


def _default_out(args, name):
    return Path(args.out) if args.out else Path(f"{name}.json")


def cmd_fit(args):
    bindings = _bindings(args)
    dep = DependenceSpec.parse(args.dep)
    data = io.load_csv(args.data, bindings, dep)
    res = fit(data, _family_factory(args.family), dep, _options(args))
    report = None if args.no_se else inference_report(res.theta, data, bindings.fixed_names(), res.fixed_lambda)
    eb = posthoc.eb_all(res.theta, data)
    doc = io.fit_document(res, bindings.fixed_names(), report)
    doc["bindings"] = bindings.to_dict()
    tables = {
        "eb_effects": _eb_table(data, eb, bindings.random_names()),
        "fitted": _fitted_table(res.theta, data, eb),
        "mahalanobis": posthoc.mahalanobis(res.theta, data),
    }
    written = io.emit_report(_default_out(args, "fit"), doc, tables)
    print(f"loglik={res.loglik:.6f} aic={res.aic:.4f} bic={res.bic:.4f} "
          f"converged={res.converged} iterations={res.iterations}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_NOT_CONVERGED if args.strict and not res.converged else EXIT_OK


def cmd_predict(args):
    bindings = _bindings(args)
    dep = DependenceSpec.parse(args.dep)
    data = io.load_csv(args.data, bindings, dep)
    theta, res, _ = _fit_or_load(args, data, bindings)
    ids, times, _, X, Z = io.read_rows(args.newdata, bindings, require_response=False)
    key = {str(s.id): s for s in data}
    rows = []
    for sid in dict.fromkeys(ids):
        if str(sid) not in key:
            raise ValidationError(f"newdata subject {sid!r} is not in the fitted data")
        sel = np.flatnonzero(ids == sid)
        sel = sel[np.argsort(times[sel])]
        yhat = posthoc.predict_future(theta, key[str(sid)], X[sel], Z[sel], times[sel])
        for k, j in enumerate(sel):
            rows.append({"id": key[str(sid)].id, "time": times[j], "predicted": yhat[k]})
    eb = posthoc.eb_all(theta, data)
    doc = {"n_predictions": len(rows), "warnings": list(res.warnings) if res else []}
    if res is not None:
        doc["fit"] = io.fit_document(res, bindings.fixed_names())
    written = io.emit_report(_default_out(args, "predict"), doc,
                             {"predicted": pd.DataFrame(rows, columns=["id", "time", "predicted"]),
                              "eb_effects": _eb_table(data, eb, bindings.random_names())})
    for p in written:
        print(f"wrote {p}")
    if args.strict and res is not None and not res.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_diagnose(args, seed):
    bindings = _bindings(args)
    dep = DependenceSpec.parse(args.dep)
    data = io.load_csv(args.data, bindings, dep)
    theta, res, _ = _fit_or_load(args, data, bindings)
    notes = list(res.warnings) if res else []
    tables = {"mahalanobis": posthoc.mahalanobis(theta, data)}
    doc = {"family": theta.family.name, "dependence": io.dependence_token(theta.dependence), "warnings": notes}
    try:
        h = posthoc.healy_coordinates(theta, data, args.alpha)
        tables["healy"] = h.to_frame()
        doc["healy"] = {"ks_statistic": h.ks_statistic, "band": h.band, "within_band": bool(h.within_band)}
    except UnequalLengths as exc:
        notes.append(f"Healy coordinates skipped: {exc}")
    try:
        acf = posthoc.acf_table(theta, data, args.envelope_m, args.alpha, args.max_lag, seed)
        tables["acf"] = acf
        doc["acf_lags_outside"] = acf.loc[acf["outside"], "lag"].tolist()
    except ValidationError as exc:
        notes.append(f"residual ACF skipped: {exc}")
    doc["outliers"] = tables["mahalanobis"].loc[tables["mahalanobis"]["outlier"], "id"].tolist()
    if res is not None:
        doc["fit"] = io.fit_document(res, bindings.fixed_names())
    written = io.emit_report(_default_out(args, "diagnose"), doc, tables)
    for p in written:
        print(f"wrote {p}")
    if args.strict and res is not None and not res.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def resolve_scenario(text, seed=None, n_subjects=None, replicates=None):
    """Built-in scenario token (``study3:15``) or a JSON scenario file."""
    if text.endswith(".json") or Path(text).is_file():
        sc = simkit.Scenario.load(text)
    else:
        name, _, arg = text.partition(":")
        if name not in simkit.SCENARIOS:
            raise ValidationError(f"unknown scenario {name!r}; choose from {', '.join(simkit.SCENARIOS)}")
        maker = simkit.SCENARIOS[name]
        if not arg:
            sc = maker()
        elif name == "study3":
            try:
                sc = maker(int(arg))
            except ValueError as exc:
                raise ValidationError(f"study3 needs an integer n_j, got {arg!r}") from exc
        else:
            if arg.upper() not in ("SN", "ST", "SSL", "SCN"):
                raise ValidationError(f"unknown family {arg!r}")
            sc = maker(arg.upper())
    kw = {}
    if seed is not None:
        kw["seed"] = seed
    if n_subjects is not None:
        kw["n_subjects"] = n_subjects
    if replicates is not None:
        kw["replicates"] = replicates
    return sc.with_(**kw) if kw else sc


def cmd_simulate(args, seed):
    sc = resolve_scenario(args.scenario, seed, args.n_subjects)
    print(f"seed={sc.seed}")
    data = simkit.generate(sc, args.replicate)
    fixed = [f"x{j}" for j in range(1, data.n_fixed)]
    random = [f"z{j}" for j in range(1, data.n_random)]
    bindings = io.Bindings("y", fixed, random, "id", "time", True, True)
    out = Path(args.out) if args.out else Path(f"{sc.name}-rep{args.replicate}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(data, out, bindings)
    print(f"wrote {out} ({data.n_subjects} subjects, {data.n_obs} rows)")
    return EXIT_OK


def _parse_candidates(text):
    out = []
    for token in _split(text):
        fam, _, dep = token.partition("/")
        out.append((_family_factory(fam), DependenceSpec.parse(dep or "ci")))
    return out


def cmd_study(args, seed):
    sc = resolve_scenario(args.scenario, seed, args.n_subjects, args.replicates)
    print(f"seed={sc.seed}")
    cands = _parse_candidates(args.candidates) if args.candidates else None
    opts = FitOptions(tol=args.tol, max_iter=args.max_iter)
    rep = simkit.run_study(sc, cands, opts, start=args.start, with_se=not args.no_se)
    out = Path(args.out) if args.out else Path(f"{sc.name}-study")
    written = io.emit_report(out, {**rep.to_dict(), "scenario_definition": sc.to_dict()},
                             {"estimates": rep.estimates, "summary": rep.summary, "selection": rep.selection})
    print(rep.summary.to_string(index=False))
    if not rep.selection.empty:
        print(rep.selection.to_string(index=False))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        # scenarios carry their own default seed; the other commands use DEFAULT_SEED
        if args.command == "simulate":
            return cmd_simulate(args, args.seed)
        if args.command == "study":
            return cmd_study(args, args.seed)
        seed = DEFAULT_SEED if args.seed is None else args.seed
        print(f"seed={seed}")
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "predict":
            return cmd_predict(args)
        return cmd_diagnose(args, seed)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SmsnLmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
