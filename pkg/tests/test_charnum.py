from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from src.charnum import (
    bg_gap,
    char_report,
    graded_degrees,
    im_residual,
    im_residual_by_divisor,
    is_deligne_type,
    par_c1_flat,
    par_c1_ls,
    par_ch2_cross_check,
    par_ch2_flat,
    par_ch2_ls,
    par_deg_flat,
    par_deg_ls,
    par_slope,
    vanishing_check,
    wt,
)
from src.generators import GeneratorFactory, TableKind, random_geometry, random_lambda, random_rational
from src.models import (
    DataSide,
    GaussianQ,
    IdentityCheckError,
    KmsLabel,
    KmsPoint,
    ParabolicFlatData,
    PointKmsEntry,
)
from src.pardata import validate


def test_two_divisor_bundle_numbers(bundle):
    report = char_report(bundle)
    assert report.side == DataSide.FLAT
    assert report.par_ch2 == Fraction(1, 6)
    assert report.c1_coeffs == {"D1": Fraction(-1, 2), "D2": Fraction(-1, 3)}
    assert report.c1_squared == Fraction(1, 3)
    assert report.bg_gap == 0
    assert report.par_deg == Fraction(-5, 6)
    assert report.par_slope == Fraction(-5, 6)
    assert report.im_residual == 0


def test_local_system_numbers_match(bundle, local_system):
    report = char_report(local_system)
    assert report.side == DataSide.LOCAL_SYSTEM
    assert par_ch2_ls(local_system) == par_ch2_flat(bundle)
    assert par_c1_ls(local_system) == par_c1_flat(bundle)
    assert par_deg_ls(local_system) == par_deg_flat(bundle) == report.par_deg
    assert bg_gap(local_system) == bg_gap(bundle)


def test_wt_and_slope(bundle):
    assert wt(bundle.divisor_spectra["D1"]) == Fraction(1, 2)
    assert par_slope(bundle) == par_deg_flat(bundle)


def test_graded_degrees(bundle):
    graded = {g.divisor: g for g in graded_degrees(bundle)}
    assert graded["D1"].re == Fraction(-1, 3)
    assert graded["D2"].re == Fraction(-1, 2)
    assert graded["D1"].im_residual == 0


def test_graded_degrees_merge_repeated_values():
    data = ParabolicFlatData(
        lam=1,
        rank=2,
        geometry={"components": ["D1"], "selfint": {"D1": 2}, "degL": {"D1": 1}},
        divisor_spectra={"D1": [KmsPoint(a="-1/2", r=1), KmsPoint(a="-1/2", r=1)]},
    )
    graded = graded_degrees(data)
    assert len(graded) == 1
    assert graded[0].r == 2
    # -Re(alpha) r [D]^2 with alpha = 0
    assert graded[0].re == 0


def test_cross_check_on_fixture(bundle):
    check = par_ch2_cross_check(bundle)
    assert check.via_graded == check.direct == Fraction(1, 6)


def test_cross_check_on_random_tables():
    multi_point = 0
    for data in GeneratorFactory.draw(TableKind.FLAT, 60, seed=3):
        multi_point += len(data.geometry.points) > 1
        check = par_ch2_cross_check(data)
        assert check.via_graded == check.direct
    assert multi_point > 0


def test_cross_check_raises_on_inconsistent_tables(bundle_doc):
    # point table disagrees with the divisor spectra, so the graded route sees different weights
    doc = dict(bundle_doc)
    doc["point_spectra"] = {"P": [{"u_i": {"a": "1/2"}, "u_j": {"a": "1/4"}, "r": 1}]}
    doc["geometry"] = {**bundle_doc["geometry"], "selfint": {"D1": "1", "D2": "0"}}
    data = ParabolicFlatData.model_validate(doc)
    assert validate(data) != []
    with pytest.raises(IdentityCheckError):
        par_ch2_cross_check(data)


def test_deligne_type_vanishing():
    for data in GeneratorFactory.draw(TableKind.DELIGNE, 40, seed=5):
        assert is_deligne_type(data)
        report = vanishing_check(data)
        assert report.par_deg == 0
        assert report.par_ch2 == 0


def test_vanishing_check_on_non_deligne(bundle):
    report = vanishing_check(bundle)
    assert not report.is_deligne_type
    assert report.par_ch2 == Fraction(1, 6)


def test_im_residual_reported_for_arbitrary_tables():
    data = ParabolicFlatData(
        lam=1,
        rank=1,
        geometry={"components": ["D1"], "selfint": {"D1": 1}, "degL": {"D1": 0}},
        divisor_spectra={"D1": [KmsPoint(a="-1/2", alpha={"re": "0", "im": "1"})]},
    )
    # Im(alpha) * (-par-deg(Gr) + a r [D]^2) = 1 * (0 - 1/2)
    assert im_residual(data) == Fraction(-1, 2)
    assert char_report(data).im_residual == Fraction(-1, 2)
    assert im_residual_by_divisor(data) == {"D1": Fraction(-1, 2)}


def _direct_sum_oracle(rng, count):
    """
    Random direct sums of parabolic line bundles: each summand picks one KMS value per divisor,
    so par-c1 and par-ch2 follow from expanding (sum_i b_i D_i)^2 summand by summand.
    """
    for _ in range(count):
        geometry = random_geometry(rng)
        lam = random_lambda(rng)
        rank = int(rng.integers(1, 4))
        values = {
            i: [KmsLabel(a=random_rational(rng, Fraction(-1), Fraction(0), 4),
                         alpha=GaussianQ.of(random_rational(rng, Fraction(-2), Fraction(2), 3, open_low=False),
                                            random_rational(rng, Fraction(-1), Fraction(1), 2, open_low=False)))
                for _ in range(2)]
            for i in geometry.components
        }
        lines = [{i: values[i][int(rng.integers(2))] for i in geometry.components} for _ in range(rank)]

        divisor_spectra = {}
        for i in geometry.components:
            counts = Counter(line[i] for line in lines)
            divisor_spectra[i] = [KmsPoint(a=u.a, alpha=u.alpha, r=r) for u, r in counts.items()]
        point_spectra = {}
        for p in geometry.points:
            counts = Counter((line[p.i], line[p.j]) for line in lines)
            point_spectra[p.label] = [PointKmsEntry(u_i=u, u_j=v, r=r) for (u, v), r in counts.items()]
        data = ParabolicFlatData(lam=lam, rank=rank, geometry=geometry,
                                 divisor_spectra=divisor_spectra, point_spectra=point_spectra)

        def b(u):
            return (lam.re * u.alpha.re + lam.im * u.alpha.im) / lam.abs2() + u.a

        def pairing(i, j):
            if i == j:
                return geometry.selfint[i]
            return sum((p.mult for p in geometry.points if {p.i, p.j} == {i, j}), 0)

        components = geometry.components
        ch2 = sum(
            (b(line[i]) * b(line[j]) * pairing(i, j) for line in lines for i in components for j in components),
            Fraction(0),
        ) / 2
        c1 = {i: -sum((b(line[i]) for line in lines), Fraction(0)) for i in components}
        yield data, ch2, c1


def test_par_ch2_matches_direct_sum_expansion():
    rng = np.random.default_rng(11)
    for data, ch2, c1 in _direct_sum_oracle(rng, 80):
        assert validate(data) == []
        assert par_ch2_flat(data) == ch2
        assert par_c1_flat(data) == c1
        assert par_ch2_cross_check(data).direct == ch2
