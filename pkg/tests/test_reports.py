import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibra import plotting
from calibra.core import Discretization, RandomStream, ValidationError
from calibra.fixtures import pop4, random_instance
from calibra.metrics import ma_error, mc_full_error
from calibra.reports import (
    ArtifactSet,
    audit_csv,
    audit_to_dict,
    canonical_float,
    canonical_json,
    canonical_line,
    csv_text,
    emit_report,
    instance_from_dict,
    plotdata_text,
    predictor_csv,
)

P = pop4()


@pytest.mark.parametrize(
    "x,expected",
    [
        (0.1 + 0.2, 0.3),
        (1 / 3, 0.333333333333),
        (-0.0, 0.0),
        (1e-20, 1e-20),
        (math.inf, "inf"),
        (-math.inf, "-inf"),
        (math.nan, "nan"),
    ],
)
def test_canonical_float(x, expected):
    assert canonical_float(x) == expected


def test_canonical_json_sorts_and_handles_numpy():
    doc = {"b": np.float64(0.1 + 0.2), "a": np.arange(3), "c": (True, None, math.inf)}
    text = canonical_json(doc)
    assert text.endswith("\n")
    assert list(json.loads(text)) == ["a", "b", "c"]
    assert json.loads(text) == {"a": [0, 1, 2], "b": 0.3, "c": [True, None, "inf"]}
    assert "\n" not in canonical_line(doc)
    assert json.loads(canonical_line(doc)) == json.loads(text)


def test_canonical_json_rejects_unknown_objects():
    with pytest.raises(TypeError):
        canonical_json({"x": object()})


@given(st.floats(allow_nan=False, allow_infinity=False))
@settings(max_examples=200)
def test_canonical_float_is_idempotent(x):
    once = canonical_float(x)
    assert canonical_float(once) == once
    assert once == pytest.approx(x, rel=1e-11, abs=0)


def test_same_report_gives_same_bytes():
    inst = random_instance(RandomStream(3, "bytes"), 40, 3, 4)
    d = Discretization(0.25)
    a = canonical_json(audit_to_dict(mc_full_error(inst.pop, inst.nature, inst.predictor, inst.groups, d)))
    b = canonical_json(audit_to_dict(mc_full_error(inst.pop, inst.nature, inst.predictor, inst.groups, d)))
    assert a == b


def test_audit_csv_has_one_row_per_constraint():
    rep = ma_error(P.pop, P.nature, P.predictor, P.groups)
    lines = audit_csv(rep).strip().split("\n")
    assert lines[0] == "group,index,center,gap,group_mass"
    assert len(lines) - 1 == len(rep)
    doc = audit_to_dict(rep)
    assert doc["max_gap"] == pytest.approx(0.25)
    assert doc["witness"]["group"] == "{0,1}"


def test_csv_text_formats_cells():
    text = csv_text([{"a": None, "b": 0.5, "c": [1, 2]}], ("a", "b", "c"))
    assert text == 'a,b,c\n,0.5,"[1, 2]"\n'


def test_instance_round_trip():
    inst = random_instance(RandomStream(9, "doc"), 25, 3, 3, grid=0.25)
    doc = json.loads(canonical_json(inst.to_dict()))
    back = instance_from_dict(doc)
    np.testing.assert_array_equal(back.pop.weights, inst.pop.weights)
    np.testing.assert_array_equal(back.nature.probs, inst.nature.probs)
    np.testing.assert_array_equal(back.predictor.probs, inst.predictor.probs)
    np.testing.assert_array_equal(back.loss.table, inst.loss.table)
    np.testing.assert_array_equal(back.groups.masks, inst.groups.masks)
    assert back.groups.ids == inst.groups.ids


@pytest.mark.parametrize(
    "patch",
    [
        {"schema": "other"},
        {"version": 2},
        {"nature": [["0.5", "0.5"]]},
        {"predictor": [["x", "1"]] * 4},
    ],
)
def test_instance_document_validation(patch):
    doc = {**P.to_dict(), **patch}
    with pytest.raises(ValidationError):
        instance_from_dict(doc)


def test_predictor_csv():
    text = predictor_csv(P.predictor)
    assert text.split("\n")[:2] == ["element,p0,p1", "0,0.5,0.5"]


def test_plotdata_sorted_by_series():
    text = plotdata_text({"b": [(0.0, 1.0)], "a": [(1.0, 2.0), (2.0, 3.0)]})
    assert text.strip().split("\n") == ["series,x,y", "a,1.0,2.0", "a,2.0,3.0", "b,0.0,1.0"]


def test_emit_report_respects_formats(tmp_path):
    arts = emit_report({"x": 1}, ("json",), "r", [{"x": 1}], ("x",), {"s": [(0.0, 1.0)]})
    assert sorted(arts.files) == ["r.json"]
    arts = emit_report({"x": 1}, ("json", "csv", "plotdata"), "r", [{"x": 1}], ("x",), {"s": [(0.0, 1.0)]})
    paths = arts.write(tmp_path / "out")
    assert [p.name for p in paths] == ["r.csv", "r.json", "r.plot.csv"]
    assert (tmp_path / "out" / "r.json").read_text() == canonical_json({"x": 1})


def test_artifact_write_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    arts = ArtifactSet()
    arts.add_text("a.json", "{}")
    with pytest.raises(ValidationError):
        arts.write(blocker / "sub")


def test_figures_are_png_and_reproducible():
    a = plotting.line_figure({"gap": [(0, 0.3), (1, 0.1)]}, "iteration", "gap", hlines={"alpha": 0.1})
    b = plotting.line_figure({"gap": [(0, 0.3), (1, 0.1)]}, "iteration", "gap", hlines={"alpha": 0.1})
    assert a[:8] == b"\x89PNG\r\n\x1a\n"
    assert a == b
    bar = plotting.bar_figure(["X", "{0,1}"], [0.0, 0.25], "gap", limit=0.1)
    assert bar[:8] == b"\x89PNG\r\n\x1a\n"
