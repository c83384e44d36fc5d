import cmath
import logging
import math
from fractions import Fraction

import pytest
from pydantic import ValidationError

from src.models import (
    DivisorPoint,
    Eigenvalue,
    GaussianQ,
    JobSpec,
    KmsLabel,
    KmsPoint,
    LsLabel,
    ParabolicFlatData,
    format_rational,
    im_over,
    re_over,
    to_fraction,
)


def test_to_fraction_parses_exact_forms():
    assert to_fraction("1/3") == Fraction(1, 3)
    assert to_fraction(" -5/2 ") == Fraction(-5, 2)
    assert to_fraction(0.5) == Fraction(1, 2)
    assert to_fraction(0.1) == Fraction(1, 10)
    assert to_fraction(7) == Fraction(7)


@pytest.mark.parametrize("value", [True, "abc", "1/0", float("nan"), None])
def test_to_fraction_rejects(value):
    with pytest.raises(ValueError):
        to_fraction(value)


def test_format_rational():
    assert format_rational(Fraction(3)) == "3"
    assert format_rational(Fraction(-7, 20)) == "-7/20"


def test_gaussian_arithmetic():
    z = GaussianQ.of(1, 2) * GaussianQ.of(3, -1)
    assert z == GaussianQ.of(5, 5)
    assert GaussianQ.of(1, 1) / GaussianQ.of(0, 1) == GaussianQ.of(1, -1)
    assert GaussianQ.of(2, 3).shifted(2) == GaussianQ.of(0, 3)
    assert complex(GaussianQ.of("1/2", "-1/4")) == complex(0.5, -0.25)
    assert str(GaussianQ.of("1/2", "-1/4")) == "1/2-1/4i"
    with pytest.raises(ZeroDivisionError):
        GaussianQ.of(1) / GaussianQ.of(0)


def test_gaussian_coercion():
    assert GaussianQ.model_validate({"re": "1/2", "im": "1"}) == GaussianQ.of(Fraction(1, 2), 1)
    assert GaussianQ.model_validate(["1/3", 0]) == GaussianQ.of(Fraction(1, 3))
    assert GaussianQ.model_validate(2) == GaussianQ.of(2)
    assert GaussianQ.model_validate(complex(0.5, 1.5)) == GaussianQ.of("1/2", "3/2")


def test_re_and_im_over_lambda():
    lam = GaussianQ.of(1, 1)
    alpha = GaussianQ.of(2, 0)
    # alpha / lambda = 1 - i
    assert re_over(alpha, lam) == 1
    assert im_over(alpha, lam) == -1


def test_eigenvalue_normalizes_exponent():
    omega = Eigenvalue.from_exponent(GaussianQ.of("3/2", "1/4"))
    assert omega.exponent == GaussianQ.of("1/2", "1/4")
    assert omega == Eigenvalue.from_exponent(GaussianQ.of("-1/2", "1/4"))


def test_eigenvalue_from_complex_is_exact_on_rationals():
    assert Eigenvalue.from_complex(math.exp(-2 * math.pi)).exponent == GaussianQ.of(0, -1)
    assert Eigenvalue.model_validate({"re": -1.0}) == Eigenvalue.from_exponent("1/2")
    assert Eigenvalue.from_complex(1j).exponent == GaussianQ.of("3/4")
    assert abs(Eigenvalue.from_exponent("1/4").value - (-1j)) < 1e-15


def test_eigenvalue_rejects_zero():
    with pytest.raises(ValueError):
        Eigenvalue.from_complex(0)


def test_eigenvalue_rejects_irrational_exponent():
    with pytest.raises(ValueError, match="no rational exponent"):
        Eigenvalue.from_complex(cmath.exp(-2j * math.pi * math.sqrt(2) / 10))
    with pytest.raises(ValidationError):
        LsLabel(b=0, omega={"re": math.cos(0.2 * math.pi * math.sqrt(2)), "im": -math.sin(0.2 * math.pi * math.sqrt(2))})


def test_eigenvalue_snap_is_logged(caplog):
    omega = cmath.exp(-2j * math.pi * (1 / 3 + 5e-11))
    with caplog.at_level(logging.WARNING, logger="src.models"):
        assert Eigenvalue.from_complex(omega).exponent == GaussianQ.of("1/3")
    assert "Rationalized the exponent" in caplog.text


def test_eigenvalue_snap_tolerance_from_env(monkeypatch):
    monkeypatch.setenv("KMS_HODGE_TOL", "1e-6")
    omega = cmath.exp(-2j * math.pi * (1 / 3 + 1e-8))
    assert Eigenvalue.from_complex(omega).exponent == GaussianQ.of("1/3")


def test_labels_hash_and_compare():
    assert KmsLabel(a="1/2", alpha=0) == KmsLabel.model_validate(["1/2", {"re": "0", "im": "0"}])
    assert len({KmsLabel(a="1/2", alpha=0), KmsLabel(a=0.5, alpha=0)}) == 1
    assert KmsPoint(a="1/2", alpha=1, r=2).u == KmsLabel(a="1/2", alpha=1)
    assert LsLabel(b="1/3", omega=1.0) == LsLabel(b="1/3", omega={"exponent": {"re": "0", "im": "0"}})


def test_divisor_point_orders_components():
    point = DivisorPoint.model_validate({"i": "D2", "j": "D1", "label": "P"})
    assert (point.i, point.j) == ("D1", "D2")
    assert point.other("D1") == "D2"


def test_flat_data_rejects_zero_lambda(bundle_doc):
    with pytest.raises(ValidationError):
        ParabolicFlatData.model_validate({**bundle_doc, "lambda": {"re": "0", "im": "0"}})


def test_flat_data_orients_point_tables(bundle_doc, bundle):
    flipped = dict(bundle_doc)
    flipped["geometry"] = {**bundle_doc["geometry"], "points": [{"i": "D2", "j": "D1", "label": "P", "mult": 1}]}
    entry = bundle_doc["point_spectra"]["P"][0]
    flipped["point_spectra"] = {"P": [{"u_i": entry["u_j"], "u_j": entry["u_i"], "r": 1}]}
    data = ParabolicFlatData.model_validate(flipped)
    assert data.point_spectra == bundle.point_spectra
    assert data.geometry.points[0].i == "D1"


def test_job_spec_defaults_and_ranges():
    spec = JobSpec(command="charnum")
    assert spec.eps == [0.5, 0.25, 0.1, 0.05, 0.01]
    assert spec.m == [10, 100, 1000]
    assert spec.grid is None
    with pytest.raises(ValidationError):
        JobSpec(command="flow", grid=(4, 64))
    with pytest.raises(ValidationError):
        JobSpec(command="scan", samples=0)
    with pytest.raises(ValidationError):
        JobSpec(command="perturb", m=[10, 0])
    with pytest.raises(ValidationError):
        JobSpec(command="plot")
