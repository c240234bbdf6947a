import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsie.csvio import fmt, read_table, render, write_table
from dsie.units import Bases, NoiseSpec


def test_bases():
    b = Bases()
    assert b.i_base == pytest.approx(10e6 / (math.sqrt(3) * 13.2e3))
    assert b.i_base == pytest.approx(437.4, abs=0.1)
    assert b.voltage_to_pu(13.2e3) == 1.0
    with pytest.raises(ValueError):
        Bases(v_base=0.0)


def test_noise_levels_in_si():
    b, n = Bases(), NoiseSpec()
    assert math.sqrt(n.current_variance(b)) == pytest.approx(9.78, abs=0.01)
    assert math.sqrt(n.voltage_variance(b)) == pytest.approx(295.2, abs=0.1)
    assert n.process_variance(b) == pytest.approx(1e-4 * b.i_base**2)
    assert NoiseSpec(0.0, 0.0, 0.0).voltage_variance(b) == 0.0
    with pytest.raises(ValueError):
        NoiseSpec(sigma2_u=-1e-4)


def test_fmt():
    assert fmt(True) == "1" and fmt(False) == "0"
    assert fmt(float("nan")) == "nan" and fmt(None) == "" and fmt(3) == "3"


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=8))
def test_floats_round_trip(vals):
    text = render(["v"], [[v] for v in vals], "t")
    rows = text.splitlines()[2:]
    assert [float(r) for r in rows] == vals


def test_table_file(tmp_path):
    p = write_table(tmp_path / "sub" / "x.csv", ["a", "b"], [[1, 0.5], [2, np.nan]], "demo")
    meta, header, rows = read_table(p)
    assert meta == {"schema": "dsie-csv/1", "table": "demo"}
    assert header == ["a", "b"] and rows == [["1", "0.5"], ["2", "nan"]]
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        read_table(tmp_path / "bad.csv")
