import json
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cluster_keeper import cli, crve, data, inference
from cluster_keeper.config import RunConfig, THREADS_ENV, parse_config
from cluster_keeper.errors import ConfigError, DegreesOfFreedomTooSmall, NumericalWarning
from cluster_keeper.estimator import absorb, fit_wls
from cluster_keeper.model_frame import ModelSpec, WorkingModel, build_design, working_covariance

import oracles

TOY = Path(__file__).parent / "data" / "toy.csv"
MODEL = {"outcome": "y", "covariates": ["x", "treat"], "cluster": "school",
         "absorb_between": ["year"], "absorb_within": ["school"]}


def write_config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def stderr_records(err):
    return [json.loads(line) for line in err.splitlines() if line.startswith("{")]


def error_record(err):
    return next(r for r in stderr_records(err) if r["level"] == "error")


def test_toy_panel_identified_without_each_school():
    design = build_design(data.read_table(TOY), ModelSpec("y", ("x", "treat"), "school", ("year",), ("school",)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalWarning)
        fit = fit_wls(absorb(design))
    crve.check_cluster_identification(fit)


def test_fit_report_matches_library(tmp_path, capsys):
    config = write_config(tmp_path, {"data": str(TOY), "model": MODEL})
    assert cli.main(["fit", "--config", config]) == 0
    out, err = capsys.readouterr()
    report = json.loads(out)

    design = build_design(data.read_table(TOY), ModelSpec("y", ("x", "treat"), "school", ("year",), ("school",)))
    fit = fit_wls(absorb(design))
    phi = working_covariance(WorkingModel.identity(), design)
    V = crve.vcov(fit, crve.AdjustmentKind.cr2(WorkingModel.identity()))
    expected = inference.coefficient_table(fit, V, phi)

    assert report["n_obs"] == 12 and report["n_clusters"] == 3
    assert report["vcov"] == "CR2"
    assert report["dropped"] == ["year[4]"]
    for got, want in zip(report["coefficients"], expected):
        assert got["name"] == want["name"]
        for key in ("estimate", "std_error", "df", "p_value", "conf_low", "conf_high"):
            assert got[key] == pytest.approx(want[key], rel=1e-12)
    beta, _, _ = oracles.direct_fit(design)
    assert [c["estimate"] for c in report["coefficients"]] == pytest.approx(beta, rel=1e-10)
    _, brute_V = oracles.brute_cr2(design, phi)
    assert [c["std_error"] for c in report["coefficients"]] == pytest.approx(np.sqrt(np.diag(brute_V)), rel=1e-8)
    assert any(r["level"] == "warning" and "year[4]" in r["message"] for r in stderr_records(err))


def test_fit_table_and_csv_formats(tmp_path, capsys):
    config = write_config(tmp_path, {"data": str(TOY), "model": MODEL, "output": "csv"})
    assert cli.main(["fit", "--config", config]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(cli.FIT_COLUMNS)
    assert cli.main(["fit", "--config", config, "--format", "table"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == cli.FIT_COLUMNS
    assert lines[2].startswith("x ")


@pytest.mark.parametrize("method,df", [("AHT", None), ("Standard", 2.0), ("Chi2", "inf")])
def test_test_report_always_has_df(tmp_path, capsys, method, df):
    doc = {"data": str(TOY), "model": MODEL, "method": method,
           "tests": [{"name": "treat_zero", "constraints": [{"coefficients": {"treat": 1}}]}]}
    assert cli.main(["test", "--config", write_config(tmp_path, doc)]) == 0
    row = json.loads(capsys.readouterr().out)["tests"][0]
    assert row["name"] == "treat_zero" and row["method"] == method and row["q"] == 1
    assert row["df_denom"] is not None
    if df is None:
        assert row["df_denom"] == pytest.approx(row["eta"])
    else:
        assert row["df_denom"] == df
    assert 0.0 <= row["p_value"] <= 1.0


def test_relative_data_path_resolves_against_config(tmp_path, capsys):
    (tmp_path / "toy.csv").write_bytes(TOY.read_bytes())
    config = write_config(tmp_path, {"data": "toy.csv", "model": MODEL})
    assert cli.main(["fit", "--config", config]) == 0


def test_missing_data_file_exits_3(tmp_path, capsys):
    config = write_config(tmp_path, {"data": str(tmp_path / "absent.csv"), "model": MODEL})
    assert cli.main(["fit", "--config", config]) == 3
    record = error_record(capsys.readouterr().err)
    assert record["level"] == "error" and record["error"] == "DataError" and record["exit_code"] == 3


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["fit", "--config", write_config(tmp_path, {"data": str(TOY), "modle": MODEL})]) == 2
    assert "modle" in error_record(capsys.readouterr().err)["message"]
    assert cli.main(["fit", "--config", str(tmp_path / "none.json")]) == 2
    doc = {"command": "simulate", "data": str(TOY), "model": MODEL}
    assert cli.main(["fit", "--config", write_config(tmp_path, doc)]) == 2


def test_numerical_failure_exits_4_with_context(tmp_path, capsys):
    table = data.read_table(TOY)
    table["size"] = table["school"].map({"A": 1.0, "B": 2.0, "C": 5.0})
    path = tmp_path / "sized.csv"
    data.write_table(table, path)
    doc = {"data": str(path), "model": {**MODEL, "covariates": ["x", "size"]}}
    assert cli.main(["fit", "--config", write_config(tmp_path, doc)]) == 4
    record = error_record(capsys.readouterr().err)
    assert record["error"] == "CollinearFocal"
    assert record["columns"] == ["size"]


SIM = {"command": "simulate", "seed": 1,
       "simulate": {"designs": [1], "reps": 50, "hypotheses": ["q1_trt2", "q3_trt3"], "alphas": [0.05]}}


def test_simulate_is_reproducible(tmp_path, capsys):
    config = write_config(tmp_path, SIM)
    first, second, pooled = (tmp_path / name for name in ("a.csv", "b.csv", "c.csv"))
    assert cli.main(["simulate", "--config", config, "--out", str(first), "--quiet"]) == 0
    assert cli.main(["simulate", "--config", config, "--out", str(second), "--quiet"]) == 0
    assert cli.main(["simulate", "--config", config, "--out", str(pooled), "--threads", "2", "--quiet"]) == 0
    assert first.read_bytes() == second.read_bytes() == pooled.read_bytes()
    table = pd.read_csv(first)
    assert list(table.columns) == ["design", "m", "n", "tau2", "rho", "sigma_delta2", "hypothesis", "q",
                                   "method", "alpha", "reps", "failures", "reject_rate", "mc_se"]
    assert cli.main(["simulate", "--config", config, "--seed", "2", "--quiet"]) == 0
    assert capsys.readouterr().out != first.read_text(encoding="utf-8")


def test_simulated_dataset_reingests_through_fit(tmp_path, capsys):
    dataset = tmp_path / "sim.csv"
    doc = {**SIM, "simulate": {**SIM["simulate"], "reps": 2, "dataset_out": str(dataset)}}
    assert cli.main(["simulate", "--config", write_config(tmp_path, doc), "--quiet"]) == 0
    capsys.readouterr()
    fit_doc = {"data": str(dataset),
               "model": {"outcome": "y1", "covariates": ["condition"], "cluster": "cluster", "absorb_within": ["cluster"]}}
    assert cli.main(["fit", "--config", write_config(tmp_path, fit_doc, "fit.json")]) == 0
    assert json.loads(capsys.readouterr().out)["n_obs"] == 15 * 18


def test_estimated_rho_and_inverse_working_weights(tmp_path, capsys):
    pooled = {"outcome": "y", "covariates": ["x", "treat"], "cluster": "school", "absorb_between": ["year"]}
    doc = {"data": str(TOY), "model": pooled, "weighting": "inverse_working", "absorbed_shortcut": True,
           "working_model": {"kind": "compound_symmetric", "rho": "estimate"}}
    assert cli.main(["fit", "--config", write_config(tmp_path, doc)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["working_model"]["kind"] == "compound_symmetric"
    assert -1.0 / 3.0 < report["working_model"]["rho"] < 1.0


def test_thread_precedence(monkeypatch):
    config = RunConfig(threads=3)
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert cli.resolve_threads(None, RunConfig()) == 1
    assert cli.resolve_threads(None, config) == 3
    monkeypatch.setenv(THREADS_ENV, "5")
    assert cli.resolve_threads(None, config) == 5
    assert cli.resolve_threads(2, config) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        cli.resolve_threads(None, config)


def test_run_returns_code_and_text(capsys):
    code, text = cli.run(parse_config({"data": str(TOY), "model": MODEL}), "fit", "csv")
    assert code == 0 and text.startswith("name,")
    code, text = cli.run(RunConfig(), "test")
    assert code == 2 and text == ""


def test_small_df_exits_4_naming_constraint(tmp_path, capsys, monkeypatch):
    def too_small(fit, constraint, method, V, phi, gram=None):
        raise DegreesOfFreedomTooSmall(0.5, constraint.q, constraint.name)

    monkeypatch.setattr(cli.inference, "hypothesis_test", too_small)
    doc = {"data": str(TOY), "model": MODEL,
           "tests": [{"name": "joint", "constraints": [{"coefficients": {"x": 1}}, {"coefficients": {"treat": 1}}]}]}
    assert cli.main(["test", "--config", write_config(tmp_path, doc)]) == 4
    record = error_record(capsys.readouterr().err)
    assert record["error"] == "DegreesOfFreedomTooSmall"
    assert record["constraint"] == "joint" and record["q"] == 2
