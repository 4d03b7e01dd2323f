import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from smsnlmm import io
from smsnlmm.cli import DEFAULT_SEED, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, main, resolve_scenario
from smsnlmm.dependence import DependenceSpec
from smsnlmm.estimate import FitOptions, fit
from smsnlmm.exceptions import InvalidGrid, ValidationError
from smsnlmm.mixing import MixingFamily, mahalanobis_cdf
from smsnlmm.simkit import generate, study1, study2

TOY = "id,time,y,x\n1,1,1.0,0.1\n1,2,2.0,0.4\n1,3,2.5,0.2\n2,1,0.5,0.9\n2,3,1.5,0.3\n2,2,1.1,0.5\n"


@pytest.fixture
def toy_csv(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text(TOY)
    return p


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    p = d / "sim.csv"
    assert main(["simulate", "--scenario", "study1:sn", "--n-subjects", "40", "--out", str(p)]) == EXIT_OK
    return p


def test_load_two_by_three(toy_csv):
    data = io.load_csv(toy_csv, io.Bindings("y", ["x"]))
    assert data.n_subjects == 2 and list(data.sizes) == [3, 3]
    np.testing.assert_array_equal(data[1].t, [1, 2, 3])
    np.testing.assert_array_equal(data[1].y, [0.5, 1.1, 1.5])
    np.testing.assert_array_equal(data[0].X[:, 0], 1.0)
    assert data[0].id == 1


def test_missing_time_cell_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,time,y\n1,1,2.0\n1,,3.0\n")
    with pytest.raises(io.ParseError, match="line 3"):
        io.load_csv(p, io.Bindings())


def test_missing_column_and_ragged_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,time,y\n1,1,2.0,9\n")
    with pytest.raises(io.ParseError, match="line 2"):
        io.load_csv(p, io.Bindings())
    with pytest.raises(ValidationError, match="x9"):
        io.load_csv(p, io.Bindings("y", ["x9"]))


def test_duplicate_times_rejected(tmp_path):
    p = tmp_path / "dup.csv"
    p.write_text("id,time,y\n1,1,2.0\n1,1,3.0\n")
    with pytest.raises(InvalidGrid):
        io.load_csv(p, io.Bindings())


def test_formula_parsing():
    b = io.Bindings.from_formula("bprs ~ x + grp | 1 + x", id="subj", time="week")
    assert (b.response, b.fixed, b.random, b.id, b.time) == ("bprs", ["x", "grp"], ["x"], "subj", "week")
    assert b.intercept and b.random_intercept
    b = io.Bindings.from_formula("y ~ 0 + x | -1 + x")
    assert not b.intercept and not b.random_intercept
    assert b.fixed_names() == ["x"]
    assert io.Bindings.from_formula("y ~ x").random_names() == ["(Intercept)"]
    with pytest.raises(ValidationError):
        io.Bindings.from_formula("y x")


def test_schizophrenia_shaped_file(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(118):
        grp = int(i >= 59)
        for week in range(7):
            if week > 2 and rng.random() < 0.1:
                continue
            rows.append({"id": i + 1, "week": week, "bprs": rng.normal(4.5, 1), "x": (week - 3) / 10, "group": grp})
    p = tmp_path / "schiz.csv"
    pd.DataFrame(rows).to_csv(p, index=False)
    data = io.load_csv(p, io.Bindings.from_formula("bprs ~ x + group | 1 + x", time="week"), DependenceSpec.ar((0.1,)))
    assert data.n_subjects == 118 and data.n_fixed == 3 and data.n_random == 2


def test_theta_dict_round_trip():
    th = study2("SCN").theta
    back = io.theta_from_dict(json.loads(json.dumps(io.theta_to_dict(th))))
    np.testing.assert_array_equal(back.theta_star(), th.theta_star())
    assert back.family == th.family and back.dependence == th.dependence


# --- CLI ----------------------------------------------------------------------


def test_fit_document_consistency(sim_csv, tmp_path, capsys):
    out = tmp_path / "fit.json"
    rc = main(["fit", str(sim_csv), "--fixed", "x1", "--dep", "ar:2", "--max-iter", "60", "--out", str(out)])
    assert rc == EXIT_OK
    assert f"seed={DEFAULT_SEED}" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    for key in ("estimates", "loglik", "aic", "bic", "converged", "iterations", "warnings"):
        assert key in doc
    assert doc["aic"] == pytest.approx(-2 * doc["loglik"] + 2 * doc["n_params"], rel=1e-12)
    assert doc["bic"] == pytest.approx(-2 * doc["loglik"] + doc["n_params"] * math.log(doc["n_obs"]), rel=1e-12)
    names = [e["name"] for e in doc["estimates"]]
    assert names[:2] == ["beta[(Intercept)]", "beta[x1]"]
    by = {e["name"]: e for e in doc["estimates"]}
    assert "se" in by["beta[x1]"] and "se" not in by["lambda1"]
    assert any("skewness" in w for w in doc["warnings"])
    for table in ("eb_effects", "fitted", "mahalanobis"):
        assert (tmp_path / f"fit_{table}.csv").exists()
    md = pd.read_csv(tmp_path / "fit_mahalanobis.csv")
    assert {"d", "d_e", "d_b", "cdf", "outlier", "q_level"} <= set(md.columns)
    assert mahalanobis_cdf(MixingFamily.sn(), 10, md["q_level"][0]) == pytest.approx(0.99, abs=1e-9)


def test_round_trip_reproduces_fit(tmp_path):
    sc = study1("SN", 30)
    data = generate(sc, 0)
    p = tmp_path / "rt.csv"
    b = io.Bindings("y", ["x1"])
    io.write_csv(data, p, b)
    back = io.load_csv(p, b)
    opts = FitOptions(max_iter=40)
    a = fit(data, MixingFamily.sn(), DependenceSpec.ci(), opts)
    c = fit(back, MixingFamily.sn(), DependenceSpec.ci(), opts)
    assert a.loglik == c.loglik
    np.testing.assert_array_equal(a.theta.theta_star(), c.theta.theta_star())


def test_simulate_is_seeded(tmp_path, capsys):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--scenario", "study2:st", "--n-subjects", "5", "--out", str(p1)]) == 0
    assert main(["simulate", "--scenario", "study2:st", "--n-subjects", "5", "--out", str(p2)]) == 0
    assert p1.read_text() == p2.read_text()
    assert "seed=2" in capsys.readouterr().out
    frame = pd.read_csv(p1)
    assert list(frame.columns) == ["id", "time", "y", "x1", "x2", "z1"]
    main(["simulate", "--scenario", "study2:st", "--n-subjects", "5", "--seed", "99", "--out", str(p2)])
    assert p1.read_text() != p2.read_text()


def test_predict_and_diagnose(sim_csv, tmp_path):
    fit_out = tmp_path / "m.json"
    assert main(["fit", str(sim_csv), "--fixed", "x1", "--dep", "ar:2", "--max-iter", "40", "--no-se",
                 "--out", str(fit_out)]) == EXIT_OK
    new = tmp_path / "new.csv"
    new.write_text("id,time,x1\n1,11,0.5\n1,12,1.5\n3,11,0.2\n")
    pred_out = tmp_path / "pred"
    assert main(["predict", str(sim_csv), "--fixed", "x1", "--dep", "ar:2", "--model", str(fit_out),
                 "--newdata", str(new), "--out", str(pred_out)]) == EXIT_OK
    pred = pd.read_csv(pred_out / "predicted.csv")
    assert len(pred) == 3 and np.isfinite(pred["predicted"]).all()
    diag = tmp_path / "diag.json"
    assert main(["diagnose", str(sim_csv), "--fixed", "x1", "--dep", "ar:2", "--model", str(fit_out),
                 "--envelope-m", "30", "--out", str(diag)]) == EXIT_OK
    doc = json.loads(diag.read_text())
    assert {"healy", "acf_lags_outside", "outliers"} <= set(doc)
    acf = pd.read_csv(tmp_path / "diag_acf.csv")
    assert list(acf.columns) == ["lag", "acf", "pairs", "lower", "upper", "outside"]
    healy = pd.read_csv(tmp_path / "diag_healy.csv")
    assert len(healy) == 40


def test_predict_unknown_subject(sim_csv, tmp_path):
    new = tmp_path / "new.csv"
    new.write_text("id,time,x1\n999,11,0.5\n")
    rc = main(["predict", str(sim_csv), "--fixed", "x1", "--max-iter", "5", "--newdata", str(new),
               "--out", str(tmp_path / "p")])
    assert rc == EXIT_INVALID


def test_exit_codes(sim_csv, tmp_path, toy_csv):
    assert main(["fit", str(tmp_path / "nope.csv")]) == EXIT_INVALID
    assert main(["fit", str(toy_csv), "--fixed", "nope"]) == EXIT_INVALID
    assert main(["fit", str(sim_csv), "--dep", "arma"]) == EXIT_INVALID
    with pytest.raises(SystemExit) as exc:
        main(["fit", str(sim_csv), "--family", "gauss"])
    assert exc.value.code == EXIT_INVALID
    rc = main(["fit", str(sim_csv), "--fixed", "x1", "--max-iter", "2", "--strict", "--no-se",
               "--out", str(tmp_path / "s.json")])
    assert rc == EXIT_NOT_CONVERGED
    rc = main(["fit", str(sim_csv), "--fixed", "x1", "--max-iter", "2", "--no-se", "--out", str(tmp_path / "s.json")])
    assert rc == EXIT_OK


def test_study_command(tmp_path, capsys):
    out = tmp_path / "study"
    rc = main(["study", "--scenario", "study1:sn", "--replicates", "2", "--n-subjects", "30",
               "--candidates", "sn/ar:2,sn/ci", "--max-iter", "40", "--no-se", "--out", str(out)])
    assert rc == EXIT_OK
    summary = pd.read_csv(out / "summary.csv")
    assert {"mc_av", "mc_sd", "ml_se", "bias", "rel_bias"} <= set(summary.columns)
    sel = pd.read_csv(out / "selection.csv")
    assert sel.groupby("criterion")["selected"].sum().tolist() == [2, 2]
    doc = json.loads((out / "report.json").read_text())
    assert doc["scenario_definition"]["n_subjects"] == 30
    assert "seed=1" in capsys.readouterr().out


def test_resolve_scenario(tmp_path):
    assert resolve_scenario("study3:15").n_times == 15
    assert resolve_scenario("study2:scn").theta.family.name == "SCN"
    p = tmp_path / "sc.json"
    study1("SSL", 12).save(p)
    assert resolve_scenario(str(p)).n_subjects == 12
    with pytest.raises(ValidationError):
        resolve_scenario("study9")
    with pytest.raises(ValidationError):
        resolve_scenario("study3:x")


@pytest.mark.skipif(shutil.which("smsnlmm") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["smsnlmm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("fit", "predict", "diagnose", "simulate", "study"):
        assert cmd in proc.stdout


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "smsnlmm.cli", "fit", "/nonexistent.csv"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_INVALID
    assert "error:" in proc.stderr
