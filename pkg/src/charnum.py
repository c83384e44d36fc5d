"""
Exact parabolic characteristic numbers of KMS tables.

Flat-side tables enter through the effective weight b(u) = Re(lambda^-1 alpha) + a of each
KMS value; local-system tables carry b directly. Both sides then share the same intersection
pairing on the span of the divisor classes.
"""

import logging
from fractions import Fraction
from typing import Dict, Iterable, List, Tuple, Union

from .models import (
    CharReport,
    CrossCheck,
    DataSide,
    DivisorGeometry,
    FilteredLocalSystemData,
    GradedDegree,
    IdentityCheckError,
    KmsLabel,
    KmsPoint,
    ParabolicFlatData,
    VanishingReport,
    im_over,
    re_over,
)

logger = logging.getLogger(__name__)

# divisor -> [(b, r)], point label -> [(b_i, b_j, r)]
DivisorWeights = Dict[str, List[Tuple[Fraction, int]]]
PointWeights = Dict[str, List[Tuple[Fraction, Fraction, int]]]


def wt(spectrum: Iterable[KmsPoint]) -> Fraction:
    """Sum of a * r over a spectrum"""
    return sum((Fraction(p.a) * p.r for p in spectrum), Fraction(0))


def effective_weight(u: Union[KmsPoint, KmsLabel], data: ParabolicFlatData) -> Fraction:
    """Re(lambda^-1 alpha) + a"""
    return re_over(u.alpha, data.lam) + u.a


def _flat_weights(data: ParabolicFlatData) -> Tuple[DivisorWeights, PointWeights]:
    divisor = {
        i: [(effective_weight(p, data), p.r) for p in data.spectrum(i)]
        for i in data.geometry.components
    }
    points = {
        label: [(effective_weight(e.u_i, data), effective_weight(e.u_j, data), e.r) for e in entries]
        for label, entries in data.point_spectra.items()
    }
    return divisor, points


def _ls_weights(data: FilteredLocalSystemData) -> Tuple[DivisorWeights, PointWeights]:
    divisor = {
        i: [(p.b, p.r) for p in data.spectrum(i)]
        for i in data.geometry.components
    }
    points = {
        label: [(e.u_i.b, e.u_j.b, e.r) for e in entries]
        for label, entries in data.point_spectra.items()
    }
    return divisor, points


def _c1(divisor: DivisorWeights) -> Dict[str, Fraction]:
    return {i: -sum((b * r for b, r in entries), Fraction(0)) for i, entries in divisor.items()}


def _ch2(geometry: DivisorGeometry, divisor: DivisorWeights, points: PointWeights) -> Fraction:
    total = Fraction(0)
    for i, entries in divisor.items():
        selfint = geometry.selfint.get(i, Fraction(0))
        total += sum((b * b * r for b, r in entries), Fraction(0)) * selfint
    for p in geometry.points:
        # ordered pairs (i, j) and (j, i) contribute equally
        for b_i, b_j, r in points.get(p.label, []):
            total += 2 * b_i * b_j * r * p.mult
    return total / 2


def _c1_squared(geometry: DivisorGeometry, kappa: Dict[str, Fraction]) -> Fraction:
    total = sum((kappa[i] ** 2 * geometry.selfint.get(i, Fraction(0)) for i in kappa), Fraction(0))
    for p in geometry.points:
        total += 2 * kappa.get(p.i, Fraction(0)) * kappa.get(p.j, Fraction(0)) * p.mult
    return total


def _deg(geometry: DivisorGeometry, kappa: Dict[str, Fraction]) -> Fraction:
    return sum((k * geometry.degL.get(i, Fraction(0)) for i, k in kappa.items()), Fraction(0))


def par_c1_flat(data: ParabolicFlatData) -> Dict[str, Fraction]:
    """Coefficients kappa_i of [D_i] in par-c1"""
    return _c1(_flat_weights(data)[0])


def par_deg_flat(data: ParabolicFlatData) -> Fraction:
    return _deg(data.geometry, par_c1_flat(data))


def par_ch2_flat(data: ParabolicFlatData) -> Fraction:
    divisor, points = _flat_weights(data)
    return _ch2(data.geometry, divisor, points)


def par_c1_ls(data: FilteredLocalSystemData) -> Dict[str, Fraction]:
    return _c1(_ls_weights(data)[0])


def par_deg_ls(data: FilteredLocalSystemData) -> Fraction:
    return _deg(data.geometry, par_c1_ls(data))


def par_ch2_ls(data: FilteredLocalSystemData) -> Fraction:
    divisor, points = _ls_weights(data)
    return _ch2(data.geometry, divisor, points)


def _weights_of(data) -> Tuple[DivisorWeights, PointWeights]:
    if isinstance(data, ParabolicFlatData):
        return _flat_weights(data)
    return _ls_weights(data)


def par_slope(data: Union[ParabolicFlatData, FilteredLocalSystemData]) -> Fraction:
    """par-deg / rank"""
    divisor, _ = _weights_of(data)
    return _deg(data.geometry, _c1(divisor)) / data.rank


def bg_gap(data: Union[ParabolicFlatData, FilteredLocalSystemData]) -> Fraction:
    """par-c1^2 / (2 rank) - par-ch2"""
    divisor, points = _weights_of(data)
    kappa = _c1(divisor)
    return _c1_squared(data.geometry, kappa) / (2 * data.rank) - _ch2(data.geometry, divisor, points)


def is_deligne_type(data: ParabolicFlatData) -> bool:
    """True iff Re(lambda^-1 alpha) + a = 0 at every divisor and point KMS value"""
    divisor, points = _flat_weights(data)
    return all(b == 0 for entries in divisor.values() for b, _ in entries) and all(
        b_i == 0 and b_j == 0 for entries in points.values() for b_i, b_j, _ in entries
    )


def vanishing_check(data: ParabolicFlatData) -> VanishingReport:
    """Report par-deg and par-ch2, which must both vanish on Deligne-type data"""
    deligne = is_deligne_type(data)
    deg = par_deg_flat(data)
    ch2 = par_ch2_flat(data)
    if deligne and (deg != 0 or ch2 != 0):
        raise IdentityCheckError(f"Deligne-type data with par_deg={deg}, par_ch2={ch2}")
    return VanishingReport(is_deligne_type=deligne, par_deg=deg, par_ch2=ch2)


def graded_ranks(data: ParabolicFlatData, i: str) -> List[KmsPoint]:
    """Spectrum of D_i with repeated KMS values merged, in first-seen order"""
    merged: Dict[KmsLabel, int] = {}
    for p in data.spectrum(i):
        merged[p.u] = merged.get(p.u, 0) + p.r
    return [KmsPoint.model_construct(a=u.a, alpha=u.alpha, r=r) for u, r in merged.items()]


def graded_degrees(data: ParabolicFlatData) -> List[GradedDegree]:
    """
    par-deg along D_i of every graded piece Gr_u, u = (a, alpha), from the point tables.

    The residue of the graded piece at P in D_i and D_j has the j-side eigenvalues of the point
    entries whose i-side equals u, and its weights at P are the j-side weights.

    Returns:
        One GradedDegree per (divisor, KMS value), in table order
    """
    geometry = data.geometry
    lam = data.lam
    result = []
    for i in geometry.components:
        selfint = geometry.selfint.get(i, Fraction(0))
        for p in graded_ranks(data, i):
            re = -re_over(p.alpha, lam) * p.r * selfint
            im = im_over(p.alpha, lam) * p.r * selfint
            for point in geometry.points_on(i):
                mine, theirs = ("u_i", "u_j") if point.i == i else ("u_j", "u_i")
                for e in data.point_spectra.get(point.label, []):
                    if getattr(e, mine) != p.u:
                        continue
                    v = getattr(e, theirs)
                    re -= (re_over(v.alpha, lam) + v.a) * e.r * point.mult
                    im += im_over(v.alpha, lam) * e.r * point.mult
            result.append(GradedDegree(divisor=i, u=p.u, r=p.r, re=re, im_residual=im))
    return result


def _graded_terms(data: ParabolicFlatData) -> Dict[str, Tuple[Fraction, Fraction]]:
    """Per divisor: sums of Re and Im(lambda^-1 alpha) times (-par-deg(Gr_u) + a r [D_i]^2)"""
    selfint = data.geometry.selfint
    lam = data.lam
    terms = {i: (Fraction(0), Fraction(0)) for i in data.geometry.components}
    for g in graded_degrees(data):
        bracket = -g.re + g.u.a * g.r * selfint.get(g.divisor, Fraction(0))
        real_side, imag_side = terms[g.divisor]
        terms[g.divisor] = (
            real_side + effective_weight(g.u, data) * bracket,
            imag_side + im_over(g.u.alpha, lam) * bracket,
        )
    return terms


def _graded_sums(data: ParabolicFlatData) -> Tuple[Fraction, Fraction]:
    terms = _graded_terms(data).values()
    return sum((t[0] for t in terms), Fraction(0)), sum((t[1] for t in terms), Fraction(0))


def im_residual(data: ParabolicFlatData) -> Fraction:
    """Imaginary-side Stokes identity; zero for genuine bundles, reported for arbitrary tables"""
    return _graded_sums(data)[1]


def im_residual_by_divisor(data: ParabolicFlatData) -> Dict[str, Fraction]:
    return {i: t[1] for i, t in _graded_terms(data).items()}


def par_ch2_cross_check(data: ParabolicFlatData) -> CrossCheck:
    """par-ch2 through the graded degrees, against the direct formula"""
    via_graded = _graded_sums(data)[0] / 2
    direct = par_ch2_flat(data)
    if via_graded != direct:
        raise IdentityCheckError(f"par_ch2 via graded degrees {via_graded} != direct {direct}")
    return CrossCheck(via_graded=via_graded, direct=direct)


def char_report(data: Union[ParabolicFlatData, FilteredLocalSystemData]) -> CharReport:
    """Assemble every characteristic number of a datum"""
    divisor, points = _weights_of(data)
    kappa = _c1(divisor)
    deg = _deg(data.geometry, kappa)
    ch2 = _ch2(data.geometry, divisor, points)
    c1_sq = _c1_squared(data.geometry, kappa)
    flat = isinstance(data, ParabolicFlatData)
    residual = im_residual(data) if flat else Fraction(0)
    if residual != 0:
        logger.warning(f"Imaginary-side Stokes residual is {residual}; the tables do not come from a bundle")
    return CharReport(
        side=DataSide.FLAT if flat else DataSide.LOCAL_SYSTEM,
        rank=data.rank,
        c1_coeffs=kappa,
        par_deg=deg,
        par_slope=deg / data.rank,
        par_ch2=ch2,
        c1_squared=c1_sq,
        bg_gap=c1_sq / (2 * data.rank) - ch2,
        im_residual=residual,
    )
