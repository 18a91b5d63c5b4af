import json

import pytest

from cluster_keeper import simlab
from cluster_keeper.config import RunConfig, parse_config, require, serialize_config
from cluster_keeper.errors import ConfigError

MINIMAL = {"command": "fit", "data": "panel.csv", "model": {"outcome": "y", "covariates": ["x"], "cluster": "id"}}


def test_minimal_config_defaults():
    config = parse_config(MINIMAL)
    assert config.vcov == "CR2"
    assert config.method == "AHT"
    assert config.working_model.kind == "identity"
    assert config.output == "json"
    assert config.level == 0.95
    assert config.model.covariates == ("x",)
    assert config.model.absorb_within == ()
    assert config.simulate is None


def test_parse_from_json_text():
    assert parse_config(json.dumps(MINIMAL)) == parse_config(MINIMAL)
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config("{oops")


@pytest.mark.parametrize("doc,path", [
    ({**MINIMAL, "colour": "red"}, "colour"),
    ({**MINIMAL, "model": {**MINIMAL["model"], "extra": 1}}, "model.extra"),
    ({**MINIMAL, "working_model": {"kind": "identity", "sigma": 2}}, "working_model.sigma"),
    ({**MINIMAL, "simulate": {"replicates": 10}}, "simulate.replicates"),
])
def test_unknown_keys_name_their_path(doc, path):
    with pytest.raises(ConfigError, match=f"unknown key {path}"):
        parse_config(doc)


@pytest.mark.parametrize("doc,path", [
    ({**MINIMAL, "model": {**MINIMAL["model"], "covariates": "x"}}, "model.covariates"),
    ({**MINIMAL, "level": "high"}, "level"),
    ({**MINIMAL, "absorbed_shortcut": 1}, "absorbed_shortcut"),
    ({**MINIMAL, "seed": 1.5}, "seed"),
    ({**MINIMAL, "vcov": "HC3"}, "vcov"),
])
def test_type_mismatch(doc, path):
    with pytest.raises(ConfigError, match=path):
        parse_config(doc)


@pytest.mark.parametrize("doc", [
    {**MINIMAL, "level": 1.0},
    {**MINIMAL, "threads": 0},
    {**MINIMAL, "seed": -1},
    {**MINIMAL, "working_model": {"kind": "compound_symmetric"}},
    {**MINIMAL, "working_model": {"kind": "user"}},
    {**MINIMAL, "working_model": {"scale": 0}},
    {**MINIMAL, "tests": [{"name": "empty", "constraints": []}]},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_unknown_coefficient_is_named():
    doc = {**MINIMAL, "tests": [{"name": "t", "constraints": [{"coefficients": {"z": 1}}]}]}
    with pytest.raises(ConfigError, match="'z'"):
        parse_config(doc)


def test_within_deviation_coefficients_are_known():
    doc = {
        **MINIMAL,
        "model": {**MINIMAL["model"], "within_deviations": ["x"]},
        "tests": [{"name": "hausman", "constraints": [{"coefficients": {"x_within": 1}}]}],
    }
    config = parse_config(doc)
    constraint = config.tests[0].to_constraint(config.model.focal_names())
    assert constraint.C.tolist() == [[0.0, 1.0]]


def test_simulate_section():
    config = parse_config({"command": "simulate", "seed": 9, "simulate": {"designs": 4, "reps": 50, "tau2": [0.05, 0.25]}})
    sim = config.simulate
    assert sim.designs == (4,)
    assert sim.tau2 == (0.05, 0.25)
    assert sim.reps == 50 and sim.seed == 9
    assert sim.methods == simlab.METHODS
    assert parse_config({"simulate": {}}).simulate.seed == 1
    with pytest.raises(ConfigError):
        parse_config({"simulate": {"methods": ["Wild"]}})
    with pytest.raises(ConfigError):
        parse_config({"simulate": {"reps": 0}})


def test_round_trip():
    doc = {
        "command": "test",
        "data": "/tmp/panel.csv",
        "model": {
            "outcome": "y", "covariates": ["x", "treat"], "cluster": "id", "absorb_between": ["year"],
            "absorb_within": ["id"], "weights": "w", "intercept": False, "within_deviations": ["x"],
        },
        "working_model": {"kind": "compound_symmetric", "rho": "estimate", "scale": 2.0},
        "weighting": "inverse_working",
        "vcov": "CR1S",
        "absorbed_shortcut": True,
        "cr1s_absorbed_p": True,
        "tests": [
            {"name": "joint", "constraints": [{"coefficients": {"x": 1, "treat": -1}, "value": 0.5},
                                              {"coefficients": {"x_within": 1}}]},
        ],
        "method": "Standard",
        "level": 0.9,
        "output": "csv",
        "seed": 3,
        "threads": 2,
        "simulate": {"designs": [1, 2], "m": [15], "n": [18, 30], "reps": 100, "period_effects": "by_outcome",
                     "dataset_out": "sim.csv", "full_grid": False},
    }
    config = parse_config(doc)
    assert parse_config(serialize_config(config)) == config
    assert parse_config(json.loads(json.dumps(serialize_config(config)))) == config


def test_round_trip_user_blocks():
    doc = {**MINIMAL, "working_model": {"kind": "user", "blocks": {"1": [[1, 0.5], [0.5, 1]], "2": [[2]]}}}
    config = parse_config(doc)
    assert config.working_model.blocks[0] == ("1", ((1.0, 0.5), (0.5, 1.0)))
    assert parse_config(serialize_config(config)) == config


def test_require_sections():
    with pytest.raises(ConfigError, match="data"):
        require(RunConfig(), "fit")
    with pytest.raises(ConfigError, match="tests"):
        require(parse_config(MINIMAL), "test")
    require(RunConfig(), "simulate")
