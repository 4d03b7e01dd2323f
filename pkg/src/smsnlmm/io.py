"""Long-format CSV ingestion and report emission."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dependence import DependenceSpec
from .exceptions import ValidationError
from .mixing import MixingFamily
from .model import LongitudinalDataset, ThetaParams, validate


class ParseError(ValidationError):
    """Malformed CSV content; the message names the offending line."""


@dataclass
class Bindings:
    """Map CSV columns onto the model.

    ``fixed``/``random`` list the covariate columns; ``intercept`` and
    ``random_intercept`` prepend a column of ones to ``X`` and ``Z``.
    """

    response: str | None = "y"
    fixed: list = field(default_factory=list)
    random: list = field(default_factory=list)
    id: str = "id"
    time: str = "time"
    intercept: bool = True
    random_intercept: bool = True

    @classmethod
    def from_formula(cls, formula, id="id", time="time"):
        """Parse ``"y ~ 1 + x1 + x2 | 1 + x1"``.

        The part after ``|`` lists random-effect terms; ``0`` or ``-1`` drops an
        intercept. Without ``|`` a random intercept is used.
        """
        if "~" not in formula:
            raise ValidationError(f"formula {formula!r} has no '~'")
        lhs, rhs = formula.split("~", 1)
        fixed_part, _, random_part = rhs.partition("|")
        fixed, icpt = _terms(fixed_part)
        if random_part.strip():
            random, ricpt = _terms(random_part)
        else:
            random, ricpt = [], True
        return cls(lhs.strip() or None, fixed, random, id, time, icpt, ricpt)

    def fixed_names(self):
        return (["(Intercept)"] if self.intercept else []) + list(self.fixed)

    def random_names(self):
        return (["(Intercept)"] if self.random_intercept else []) + list(self.random)

    def to_dict(self):
        return dict(response=self.response, fixed=list(self.fixed), random=list(self.random), id=self.id,
                    time=self.time, intercept=self.intercept, random_intercept=self.random_intercept)


def _terms(text):
    names = [t.strip() for t in re.split(r"\+", text) if t.strip()]
    icpt = True
    out = []
    for t in names:
        if t == "1":
            icpt = True
        elif t in ("0", "-1"):
            icpt = False
        else:
            out.append(t)
    return out, icpt


def _parse_float(text, line, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"line {line}: column {column!r} has non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"line {line}: column {column!r} is not finite")
    return value


def read_rows(path, bindings, require_response=True):
    """Parse the CSV into ``(ids, times, y, X, Z)`` arrays with line-numbered errors."""
    cols = [bindings.id, bindings.time, *bindings.fixed, *bindings.random]
    if require_response:
        cols.insert(0, bindings.response)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in dict.fromkeys(cols) if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        ids, times, ys, xs, zs = [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if None in row:
                raise ParseError(f"line {line}: more fields than header columns")
            sid = (row[bindings.id] or "").strip()
            if not sid:
                raise ParseError(f"line {line}: missing subject id")
            ids.append(sid)
            times.append(_parse_float(row[bindings.time], line, bindings.time))
            if require_response:
                ys.append(_parse_float(row[bindings.response], line, bindings.response))
            xs.append([_parse_float(row[c], line, c) for c in bindings.fixed])
            zs.append([_parse_float(row[c], line, c) for c in bindings.random])
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    n = len(ids)
    X = np.array(xs, float).reshape(n, len(bindings.fixed))
    Z = np.array(zs, float).reshape(n, len(bindings.random))
    if bindings.intercept:
        X = np.column_stack([np.ones(n), X])
    if bindings.random_intercept:
        Z = np.column_stack([np.ones(n), Z])
    y = np.array(ys, float) if require_response else np.full(n, np.nan)
    return np.array(ids, dtype=object), np.array(times), y, X, Z


def _numeric_ids(ids):
    try:
        return [int(s) for s in ids]
    except ValueError:
        return list(ids)


def load_csv(path, bindings, dependence=None):
    """Load a long-format CSV into a validated :class:`LongitudinalDataset`.

    Rows are grouped by subject id (first-appearance order) and sorted by time.
    """
    ids, times, y, X, Z = read_rows(path, bindings)
    data = LongitudinalDataset.from_long(y, X, Z, _numeric_ids(ids), times)
    return validate(data, dependence)


def write_csv(data, path, bindings):
    """Write ``data`` back out as long-format CSV under ``bindings``."""
    rows = []
    off_x = 1 if bindings.intercept else 0
    off_z = 1 if bindings.random_intercept else 0
    for s in data:
        for j in range(s.n):
            row = {bindings.id: s.id, bindings.time: s.t[j], bindings.response: s.y[j]}
            for k, c in enumerate(bindings.fixed):
                row[c] = s.X[j, off_x + k]
            for k, c in enumerate(bindings.random):
                row[c] = s.Z[j, off_z + k]
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# parameter (de)serialization
# ---------------------------------------------------------------------------


def dependence_token(dep):
    """CLI-style token (``ci``, ``ar:p``, ``dec``) of a dependence spec."""
    return f"ar:{dep.order}" if dep.kind == "AR" else dep.kind.lower()


def theta_to_dict(theta):
    return {
        "beta": theta.beta.tolist(),
        "sigma2": float(theta.sigma2),
        "F": np.asarray(theta.F).tolist(),
        "lambda": theta.lam.tolist(),
        "family": theta.family.name,
        "nu": list(theta.family.nu),
        "dependence": dependence_token(theta.dependence),
        "phi": list(theta.phi),
    }


def theta_from_dict(doc):
    fam = MixingFamily(doc["family"], tuple(doc.get("nu", ())))
    dep = DependenceSpec.parse(doc["dependence"]).with_phi(doc.get("phi", ()))
    q = len(doc["lambda"])
    return ThetaParams(np.asarray(doc["beta"], float), float(doc["sigma2"]),
                       np.asarray(doc["F"], float).reshape(q, q), np.asarray(doc["lambda"], float), fam, dep)


def fit_document(result, fixed_names=None, report=None):
    """JSON-ready dict describing a fit."""
    theta = result.theta
    names = theta.theta_star_names(fixed_names)
    values = theta.theta_star()
    se = report.se if report is not None else None
    skew = {f"lambda{j + 1}" for j in range(theta.q)}
    estimates = []
    for k, (name, value) in enumerate(zip(names, values)):
        entry = {"name": name, "value": float(value)}
        if se is not None and name not in skew and np.isfinite(se[k]):
            entry["se"] = float(se[k])
        estimates.append(entry)
    for k, v in enumerate(theta.family.nu):
        estimates.append({"name": f"nu{k + 1}", "value": float(v)})
    warnings = list(result.warnings) + (list(report.warnings) if report is not None else [])
    return {
        "family": theta.family.name,
        "dependence": dependence_token(theta.dependence),
        "estimates": estimates,
        "loglik": float(result.loglik),
        "aic": float(result.aic),
        "bic": float(result.bic),
        "n_params": int(result.n_params),
        "n_obs": int(result.n_obs),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "warnings": warnings,
        "theta": theta_to_dict(theta),
    }


def emit_report(path, document=None, tables=None):
    """Write a JSON document and CSV companions.

    ``path`` ending in ``.json`` names the document and prefixes the CSVs
    (``<stem>_<table>.csv``); otherwise it is a directory.

    Returns the list of written paths.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.parent.mkdir(parents=True, exist_ok=True)
        doc_path = path
        stem = path.with_suffix("")

        def table_path(name):
            return stem.parent / f"{stem.name}_{name}.csv"
    else:
        path.mkdir(parents=True, exist_ok=True)
        doc_path = path / "report.json"

        def table_path(name):
            return path / f"{name}.csv"
    written = []
    if document is not None:
        doc_path.write_text(json.dumps(document, indent=2, default=_json_default))
        written.append(doc_path)
    for name, frame in (tables or {}).items():
        p = table_path(name)
        frame.to_csv(p, index=False)
        written.append(p)
    return written


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
