from fractions import Fraction

from src.models import DivisorGeometry, DivisorPoint, ParabolicFlatData
from src.pardata import validate
from src.validators import GeometryValidator, check_weights_increasing


def test_fixtures_are_valid(bundle, local_system):
    assert validate(bundle) == []
    assert validate(local_system) == []


def test_weight_outside_truncation_window(bundle_doc):
    doc = dict(bundle_doc)
    doc["truncation"] = {"D1": "0", "D2": "1"}
    errors = validate(ParabolicFlatData.model_validate(doc))
    assert any("divisor_spectra.D1[0].a" in e for e in errors)
    assert any("point_spectra.P[0].u_i.a" in e for e in errors)
    assert not any("D2[0]" in e for e in errors)


def test_rank_mismatch(bundle_doc):
    doc = dict(bundle_doc)
    doc["divisor_spectra"] = {
        "D1": [{"a": "1/2", "alpha": 0, "r": 2}],
        "D2": bundle_doc["divisor_spectra"]["D2"],
    }
    errors = validate(ParabolicFlatData.model_validate(doc))
    assert any("divisor_spectra.D1' ranks sum to 2, expected rank 1" in e for e in errors)
    assert any("u_i-side marginal" in e for e in errors)


def test_point_marginal_mismatch(bundle_doc):
    doc = dict(bundle_doc)
    doc["point_spectra"] = {"P": [{"u_i": {"a": "1/4"}, "u_j": {"a": "1/3"}, "r": 1}]}
    errors = validate(ParabolicFlatData.model_validate(doc))
    assert len(errors) == 1
    assert errors[0].startswith("Field 'point_spectra.P' u_i-side marginal")


def test_missing_tables(bundle_doc):
    doc = dict(bundle_doc)
    doc["divisor_spectra"] = {"D1": bundle_doc["divisor_spectra"]["D1"]}
    doc["point_spectra"] = {}
    errors = validate(ParabolicFlatData.model_validate(doc))
    assert "Field 'divisor_spectra.D2' is required but missing" in errors
    assert "Field 'point_spectra.P' is required but missing" in errors


def test_geometry_errors():
    geometry = DivisorGeometry(
        components=["D1", "D1", "D2"],
        selfint={"D1": 0, "D3": 1},
        degL={"D1": 0, "D2": 0},
        points=[
            DivisorPoint(i="D1", j="D1", label="P"),
            DivisorPoint(i="D1", j="D4", label="Q", mult=0),
        ],
    )
    errors = GeometryValidator().validate(geometry)
    assert "Field 'geometry.components' contains duplicate labels" in errors
    assert "Field 'geometry.selfint.D2' is required but missing" in errors
    assert "Field 'geometry' refers to unknown component 'D3'" in errors
    assert any("geometry.points[0]" in e and "distinct" in e for e in errors)
    assert "Field 'geometry.points[1]' refers to unknown component 'D4'" in errors
    assert "Field 'geometry.points[1].mult' must be at least 1, got 0" in errors


def test_duplicate_point_labels():
    geometry = DivisorGeometry(
        components=["D1", "D2", "D3"],
        selfint={"D1": 0, "D2": 0, "D3": 0},
        degL={"D1": 0, "D2": 0, "D3": 0},
        points=[DivisorPoint(i="D1", j="D2", label="P"), DivisorPoint(i="D2", j="D3", label="P")],
    )
    errors = GeometryValidator().validate(geometry)
    assert any(".label' must be unique" in e for e in errors)


def test_check_weights_increasing():
    ordered = [((Fraction(-1, 4), -1), Fraction(-7, 20)), ((Fraction(-1, 4), 1), Fraction(-3, 20))]
    assert check_weights_increasing(ordered) == []
    swapped = [((Fraction(-1, 4), -1), Fraction(-3, 20)), ((Fraction(-1, 4), 1), Fraction(-7, 20))]
    errors = check_weights_increasing(swapped)
    assert len(errors) == 1
    assert "(a, k) = (-1/4, 1)" in errors[0]
