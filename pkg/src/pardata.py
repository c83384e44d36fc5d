"""
KMS spectral data: validation, canonical representatives and the lambda functor on residues
"""

import logging
import math
from fractions import Fraction
from typing import Dict, List, Optional, Union

from .models import (
    FilteredLocalSystemData,
    GaussianQ,
    InvalidDataError,
    KmsLabel,
    KmsPoint,
    ParabolicFlatData,
    PointKmsEntry,
)
from .validators import SpectrumValidator

logger = logging.getLogger(__name__)

_validator = SpectrumValidator()


def validate(data: Union[ParabolicFlatData, FilteredLocalSystemData]) -> List[str]:
    """
    Check every invariant of a spectral datum.

    Args:
        data: flat-side or local-system-side tables

    Returns:
        List of violation messages naming the offending field path (empty when valid)
    """
    return _validator.validate(data)


def require_valid(data: Union[ParabolicFlatData, FilteredLocalSystemData]) -> None:
    """Raise InvalidDataError when validate reports anything"""
    errors = validate(data)
    if errors:
        logger.error(f"Invalid {type(data).__name__}: {len(errors)} violation(s)")
        raise InvalidDataError(f"{type(data).__name__} failed validation: {errors[0]}", errors)


def shift_of(a: Fraction, c: Fraction) -> int:
    """The integer n with a + n in (c - 1, c]"""
    return math.floor(c - a)


def canonical_kms(p: Union[KmsPoint, KmsLabel], c: Fraction = Fraction(0)):
    """
    Translate (a, alpha) by the integer action n.(a, alpha) = (a + n, alpha - n)
    so that the weight lands in (c - 1, c]. The rank is unchanged.
    """
    n = shift_of(p.a, Fraction(c))
    if isinstance(p, KmsPoint):
        return KmsPoint.model_construct(a=p.a + n, alpha=p.alpha.shifted(n), r=p.r)
    return KmsLabel.model_construct(a=p.a + n, alpha=p.alpha.shifted(n))


def canonicalize(data: ParabolicFlatData, truncation: Optional[Dict[str, Fraction]] = None) -> ParabolicFlatData:
    """Move every divisor and point entry to the canonical representative for the truncation"""
    truncation = {i: Fraction(c) for i, c in (truncation if truncation is not None else data.truncation).items()}

    def c_of(i: str) -> Fraction:
        return truncation.get(i, Fraction(0))

    divisor_spectra = {
        i: [canonical_kms(p, c_of(i)) for p in spectrum]
        for i, spectrum in data.divisor_spectra.items()
    }
    point_spectra = {}
    for label, entries in data.point_spectra.items():
        point = data.geometry.point(label)
        if point is None:
            point_spectra[label] = list(entries)
            continue
        point_spectra[label] = [
            PointKmsEntry.model_construct(
                u_i=canonical_kms(e.u_i, c_of(point.i)),
                u_j=canonical_kms(e.u_j, c_of(point.j)),
                r=e.r,
            )
            for e in entries
        ]
    return data.model_copy(update={
        "divisor_spectra": divisor_spectra,
        "point_spectra": point_spectra,
        "truncation": truncation,
    })


def rescale_residues(data: ParabolicFlatData, lam: GaussianQ) -> ParabolicFlatData:
    """
    Pass from lambda_1 = data.lam to lambda_2 = lam by scaling every residue by lambda_2 / lambda_1.

    Weights are kept, so Re(lambda^-1 alpha) + a is unchanged at every KMS point.
    """
    lam = GaussianQ.model_validate(lam)
    if lam.is_zero():
        raise ValueError("lambda must be nonzero")
    ratio = lam / data.lam

    def scaled(u):
        if isinstance(u, KmsPoint):
            return KmsPoint.model_construct(a=u.a, alpha=u.alpha * ratio, r=u.r)
        return KmsLabel.model_construct(a=u.a, alpha=u.alpha * ratio)

    divisor_spectra = {i: [scaled(p) for p in s] for i, s in data.divisor_spectra.items()}
    point_spectra = {
        label: [PointKmsEntry.model_construct(u_i=scaled(e.u_i), u_j=scaled(e.u_j), r=e.r) for e in entries]
        for label, entries in data.point_spectra.items()
    }
    return data.model_copy(update={
        "lam": lam,
        "divisor_spectra": divisor_spectra,
        "point_spectra": point_spectra,
    })
