import json
from fractions import Fraction

import numpy as np
import pandas as pd
import sympy as sp

from src.models import DataSide, KmsPoint
from src.serialization import dumps_report, text_report, to_jsonable, write_csv


def test_exact_and_complex_values():
    assert to_jsonable(Fraction(1, 3)) == "1/3"
    assert to_jsonable(Fraction(4, 2)) == "2"
    assert to_jsonable(1 + 2j) == {"re": 1.0, "im": 2.0}
    assert to_jsonable(np.complex128(0.5j)) == {"re": 0.0, "im": 0.5}
    assert to_jsonable(sp.Rational(-2, 5)) == "-2/5"
    assert to_jsonable(sp.Matrix([[0, 1], [sp.Rational(1, 2), 0]])) == [["0", "1"], ["1/2", "0"]]


def test_numpy_scalars_and_arrays():
    assert to_jsonable(np.int64(3)) == 3 and isinstance(to_jsonable(np.int64(3)), int)
    assert isinstance(to_jsonable(np.float32(0.5)), float)
    assert to_jsonable(np.bool_(True)) is True
    assert to_jsonable(np.array([[1, 2], [3, 4]])) == [[1, 2], [3, 4]]
    assert to_jsonable(DataSide.FLAT) == DataSide.FLAT.value


def test_models_dump_with_string_rationals():
    dumped = to_jsonable(KmsPoint(a="-1/2", alpha={"re": "1/3", "im": "0"}, r=2))
    assert dumped == {"a": "-1/2", "alpha": {"re": "1/3", "im": "0"}, "r": 2}


def test_tuple_keys_and_frames():
    assert to_jsonable({(Fraction(1, 2), 1): 3}) == {"(1/2, 1)": 3}
    frame = pd.DataFrame({"m": [10, 100], "delta": [Fraction(1, 100), Fraction(1, 10000)]})
    assert to_jsonable(frame) == [{"m": 10, "delta": "1/100"}, {"m": 100, "delta": "1/10000"}]


def test_dumps_report_is_deterministic():
    report = {"b": Fraction(1, 6), "a": [1.5, {"z": 1j}]}
    text = dumps_report(report)
    assert text == dumps_report(dict(reversed(list(report.items()))))
    assert json.loads(text) == {"a": [1.5, {"z": {"re": 0.0, "im": 1.0}}], "b": "1/6"}


def test_text_report_flattens_nested_keys():
    text = text_report({"a": {"b": 1}, "c": [{"d": 2}], "z": 1 + 2j, "x": 0.1}, title="Report")
    lines = text.splitlines()
    assert lines[:2] == ["Report", "======"]
    assert "a.b: 1" in lines
    assert "c[0].d: 2" in lines
    assert "z: 1.0 + 2.0i" in lines
    assert "x: 0.1" in lines
    assert text.endswith("\n")


def test_text_report_of_a_scalar():
    assert text_report(Fraction(1, 2)) == "value: 1/2\n"


def test_write_csv(tmp_path):
    path = write_csv(pd.DataFrame({"eps": [0.1], "sup": [2.0]}), str(tmp_path / "scan.csv"))
    assert open(path).read().splitlines() == ["eps,sup", "0.1,2.0"]
