import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynspca import io
from dynspca.errors import DataError, DuplicateTriple, InconsistentDimensions, ParseError
from dynspca.estimator import DpcaConfig, fit_trajectory
from dynspca.panel import Design, PanelDataset
from dynspca.simbench import SimDesign, generate_panel

WIDE = """subject,time,var_1,var_2,var_3,var_4
s2,0.5,1,2,3,4
s1,0.0,5,6,7,8
s1,0.5,9,10,11,12
s2,0.0,13,14,15,16
s1,1.0,17,18,19,20
s2,1.0,21,22,23,24
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def wide_to_long(text):
    lines = text.strip().splitlines()
    out = ["subject,time,variable,value"]
    for line in reversed(lines[1:]):
        sid, t, *vals = line.split(",")
        for j, v in enumerate(vals, 1):
            out.append(f"{sid},{t},{j},{v}")
    return "\n".join(out) + "\n"


def test_wide_common_design(tmp_path):
    data = io.ingest(write(tmp_path, "w.csv", WIDE))
    assert data.design is Design.COMMON
    assert (data.p, data.n) == (4, 2)
    assert all(t.size == 3 for t in data.times)
    assert data.subject_ids == ["s1", "s2"]
    assert np.array_equal(data.values[0][1], [9, 10, 11, 12])
    assert data.metadata["time_map"] == {"offset": 0.0, "scale": 1.0}


def test_long_equals_wide(tmp_path):
    wide = io.ingest(write(tmp_path, "w.csv", WIDE))
    long = io.ingest(write(tmp_path, "l.csv", wide_to_long(WIDE)))
    assert long.metadata["format"] == "long"
    assert wide.equals(long)


def test_duplicate_long_triple_names_row(tmp_path):
    text = "subject,time,variable,value\na,0.1,1,1.0\na,0.1,2,1.0\na,0.1,1,3.0\n"
    with pytest.raises(DuplicateTriple, match="line 4.*variable=1.*line 2"):
        io.ingest(write(tmp_path, "d.csv", text))


def test_duplicate_wide_row(tmp_path):
    text = "subject,time,var_1\na,0.1,1\nb,0.1,2\na,0.1,3\n"
    with pytest.raises(DuplicateTriple, match="line 4"):
        io.ingest(write(tmp_path, "d.csv", text))


def test_parse_error_location(tmp_path):
    text = "subject,time,var_1,var_2\na,0.1,1,x\n"
    with pytest.raises(ParseError) as exc:
        io.ingest(write(tmp_path, "p.csv", text))
    assert (exc.value.line, exc.value.column) == (2, 4)


@pytest.mark.parametrize("text", [
    "", "a,b,c\n1,2,3\n", "subject,time,var_2\na,0,1\n", "subject,time,variable,value\na,0,one,1\n",
    "subject,time,variable,value\na,0,0,1\n", "subject,time,variable,value\na,nan,1,1\n",
])
def test_parse_errors(tmp_path, text):
    with pytest.raises(ParseError):
        io.ingest(write(tmp_path, "bad.csv", text))


def test_inconsistent_dimensions(tmp_path):
    with pytest.raises(InconsistentDimensions):
        io.ingest(write(tmp_path, "a.csv", "subject,time,var_1,var_2\na,0,1\n"))
    with pytest.raises(InconsistentDimensions):
        io.ingest(write(tmp_path, "b.csv", "subject,time,variable,value\na,0,1,1\na,0,2,1\nb,0,1,1\n"))


def test_normalization_map(tmp_path):
    text = "subject,time,var_1\na,10,1\na,30,2\nb,20,3\nb,50,4\n"
    data = io.ingest(write(tmp_path, "n.csv", text))
    assert data.metadata["time_map"] == {"offset": 10.0, "scale": 40.0}
    assert np.allclose(data.times[0], [0.0, 0.5])
    assert np.allclose(data.times[1], [0.25, 1.0])
    with pytest.raises(DataError):
        io.ingest(write(tmp_path, "n.csv", text), normalize="never")
    forced = io.ingest(write(tmp_path, "w.csv", WIDE.replace("1.0,", "0.8,")), normalize="always")
    assert forced.metadata["time_map"]["scale"] == pytest.approx(0.8)


def test_natural_subject_order(tmp_path):
    text = "subject,time,var_1\ns10,0,1\ns9,0,2\ns1,0,3\n"
    assert io.ingest(write(tmp_path, "o.csv", text)).subject_ids == ["s1", "s9", "s10"]


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(io.fmt(x)) == x


@pytest.mark.parametrize("fmt", ["wide", "long"])
def test_export_ingest_round_trip(tmp_path, fmt):
    data, _ = generate_panel(SimDesign(p=50, n=5, design="irregular", m_support=(2, 3, 4), seed=3))
    path = write(tmp_path, "rt.csv", io.csv_text(io.panel_rows(data, fmt)))
    back = io.ingest(path)
    assert back.design is Design.IRREGULAR
    assert data.equals(back)
    for a, b in zip(data.values, back.values):
        assert np.array_equal(a, b)


def test_sparse_encoding_round_trip(rng):
    U = rng.standard_normal((6, 2))
    U[[1, 4]] = 0.0
    enc = io.sparse_encode(U)
    assert len(enc) == 8
    assert np.array_equal(io.sparse_decode(enc, 6, 2), U)


def test_fit_json_round_trip():
    data, _ = generate_panel(SimDesign(p=50, n=20, m=15, seed=1))
    fit = fit_trajectory(data, DpcaConfig(d=2, bandwidth=0.3, rho=0.5, gamma=0.01, grid=np.linspace(0, 1, 4)))
    obj = json.loads(io.json_text(io.fit_to_dict(fit, data)))
    assert obj["schema_version"] == io.SCHEMA_VERSION and obj["kind"] == "fit"
    back = io.fit_from_dict(obj)
    for a, b in zip(fit.points, back.points):
        assert np.array_equal(a.U, b.U) and np.array_equal(a.U0, b.U0)
        assert np.array_equal(a.support, b.support)
    rows = list(io.fit_diag_rows(obj))
    assert rows[0] == ["t", "variable", "pi_diag", "pi0_diag"]
    assert len(rows) == 1 + 4 * 50


def test_read_json_checks_schema(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(DataError):
        io.read_json(path)
    path.write_text("{")
    with pytest.raises(ParseError):
        io.read_json(path)


def test_json_text_replaces_nonfinite():
    assert json.loads(io.json_text({"a": float("nan"), "b": np.float64(2.5)})) == {"a": None, "b": 2.5}


def test_write_outputs_is_all_or_nothing(tmp_path):
    good = tmp_path / "a.txt"
    bad = tmp_path / "missing" / "b.txt"
    with pytest.raises(OSError):
        io.write_outputs({good: "x", bad: "y"})
    assert not good.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".dynspca-")]
