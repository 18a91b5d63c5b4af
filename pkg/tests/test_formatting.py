import json

import numpy as np
import pytest

from cluster_keeper.formatting import dumps_json, format_number, render_table, to_jsonable


def test_floats_carry_seventeen_significant_digits():
    assert dumps_json(0.1) == "0.10000000000000001"
    assert dumps_json([np.float64(1.0) / 3.0]) == "[0.33333333333333331]"
    assert json.loads(dumps_json({"x": 0.95}))["x"] == 0.95


@pytest.mark.parametrize("value", [1e-300, -2.5e17, 123456.789, np.pi])
def test_float_text_parses_back_exactly(value):
    assert json.loads(dumps_json(value)) == value


def test_non_finite_values_stay_strict_json():
    text = dumps_json({"a": float("inf"), "b": float("-inf"), "c": float("nan")})
    assert json.loads(text) == {"a": "inf", "b": "-inf", "c": None}


def test_layout_matches_stdlib_without_floats():
    doc = {"name": "treat", "q": 1, "ok": True, "rows": [[1, 2], []], "empty": {}, "note": None}
    assert dumps_json(doc) == json.dumps(doc)
    assert dumps_json(doc, indent=2) == json.dumps(doc, indent=2)


def test_to_jsonable_unwraps_numpy():
    out = to_jsonable({"v": np.arange(3), "b": np.bool_(True), "k": np.int64(4)})
    assert out == {"v": [0, 1, 2], "b": True, "k": 4}


def test_human_numbers_use_ten_digits():
    assert format_number(np.pi) == "3.141592654"
    assert format_number(None) == "-"
    assert format_number(float("inf")) == "inf"
    lines = render_table(["name", "value"], [["x", 0.5]]).splitlines()
    assert lines[0] == "name  value"
    assert lines[2] == "x     0.5"
