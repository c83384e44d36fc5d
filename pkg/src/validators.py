from collections import Counter
from fractions import Fraction
from typing import Dict, Hashable, List, Sequence, Tuple, Union

from .models import (
    DivisorGeometry,
    FilteredLocalSystemData,
    ParabolicFlatData,
)


class GeometryValidator:
    """Validation of divisor geometry"""

    def validate(self, geometry: DivisorGeometry) -> List[str]:
        """Validate a divisor geometry and return list of errors"""
        errors = []
        components = set(geometry.components)

        if len(components) != len(geometry.components):
            errors.append("Field 'geometry.components' contains duplicate labels")

        for i in geometry.components:
            if i not in geometry.selfint:
                errors.append(f"Field 'geometry.selfint.{i}' is required but missing")
            if i not in geometry.degL:
                errors.append(f"Field 'geometry.degL.{i}' is required but missing")

        for key in list(geometry.selfint) + list(geometry.degL):
            if key not in components:
                errors.append(f"Field 'geometry' refers to unknown component '{key}'")

        seen = Counter((p.i, p.j, p.label) for p in geometry.points)
        labels = Counter(p.label for p in geometry.points)
        for n, p in enumerate(geometry.points):
            path = f"geometry.points[{n}]"
            if p.i == p.j:
                errors.append(f"Field '{path}' must join two distinct components, got {p.i} twice")
            for k in (p.i, p.j):
                if k not in components:
                    errors.append(f"Field '{path}' refers to unknown component '{k}'")
            if p.mult < 1:
                errors.append(f"Field '{path}.mult' must be at least 1, got {p.mult}")
            if seen[(p.i, p.j, p.label)] > 1:
                errors.append(f"Field '{path}' duplicates point ({p.i}, {p.j}, {p.label})")
            elif labels[p.label] > 1:
                errors.append(f"Field '{path}.label' must be unique, '{p.label}' is reused")

        return errors


class SpectrumValidator:
    """Validation of KMS tables on either side of the correspondence"""

    def __init__(self):
        self.geometry_validator = GeometryValidator()

    def validate(self, data: Union[ParabolicFlatData, FilteredLocalSystemData]) -> List[str]:
        """Validate a complete datum and return every violated invariant"""
        errors = []

        if data.rank < 1:
            errors.append(f"Field 'rank' must be at least 1, got {data.rank}")

        errors.extend(self.geometry_validator.validate(data.geometry))
        errors.extend(self._validate_divisor_tables(data))
        errors.extend(self._validate_point_tables(data))

        return errors

    def _validate_divisor_tables(self, data) -> List[str]:
        errors = []
        flat = isinstance(data, ParabolicFlatData)

        for i in data.geometry.components:
            if i not in data.divisor_spectra:
                errors.append(f"Field 'divisor_spectra.{i}' is required but missing")

        for i, spectrum in data.divisor_spectra.items():
            if i not in data.geometry.components:
                errors.append(f"Field 'divisor_spectra.{i}' refers to unknown component '{i}'")
                continue
            for n, point in enumerate(spectrum):
                if point.r < 1:
                    errors.append(f"Field 'divisor_spectra.{i}[{n}].r' must be at least 1, got {point.r}")
                if flat:
                    errors.extend(self._validate_weight(point.a, data.c(i), f"divisor_spectra.{i}[{n}].a"))

            total = sum(point.r for point in spectrum)
            if total != data.rank:
                errors.append(f"Field 'divisor_spectra.{i}' ranks sum to {total}, expected rank {data.rank}")

        if flat:
            for i in data.truncation:
                if i not in data.geometry.components:
                    errors.append(f"Field 'truncation.{i}' refers to unknown component '{i}'")

        return errors

    def _validate_point_tables(self, data) -> List[str]:
        errors = []
        flat = isinstance(data, ParabolicFlatData)
        geometry = data.geometry

        for p in geometry.points:
            if p.label not in data.point_spectra:
                errors.append(f"Field 'point_spectra.{p.label}' is required but missing")

        for label, entries in data.point_spectra.items():
            p = geometry.point(label)
            if p is None:
                errors.append(f"Field 'point_spectra.{label}' refers to unknown point '{label}'")
                continue

            for n, entry in enumerate(entries):
                if entry.r < 1:
                    errors.append(f"Field 'point_spectra.{label}[{n}].r' must be at least 1, got {entry.r}")
                if flat:
                    errors.extend(self._validate_weight(entry.u_i.a, data.c(p.i), f"point_spectra.{label}[{n}].u_i.a"))
                    errors.extend(self._validate_weight(entry.u_j.a, data.c(p.j), f"point_spectra.{label}[{n}].u_j.a"))

            total = sum(entry.r for entry in entries)
            if total != data.rank:
                errors.append(f"Field 'point_spectra.{label}' ranks sum to {total}, expected rank {data.rank}")

            for side, k in (("u_i", p.i), ("u_j", p.j)):
                marginal = self._marginal(entries, side)
                expected = self._divisor_ranks(data, k)
                if marginal != expected:
                    errors.append(
                        f"Field 'point_spectra.{label}' {side}-side marginal {self._describe_ranks(marginal)} "
                        f"disagrees with divisor_spectra.{k} {self._describe_ranks(expected)}"
                    )

        return errors

    @staticmethod
    def _validate_weight(a: Fraction, c: Fraction, path: str) -> List[str]:
        if not (c - 1 < a <= c):
            return [f"Field '{path}' = {a} must lie in ({c - 1}, {c}]"]
        return []

    @staticmethod
    def _marginal(entries: Sequence, side: str) -> Dict[Hashable, int]:
        ranks: Dict[Hashable, int] = {}
        for entry in entries:
            u = getattr(entry, side)
            ranks[u] = ranks.get(u, 0) + entry.r
        return ranks

    @staticmethod
    def _divisor_ranks(data, i: str) -> Dict[Hashable, int]:
        ranks: Dict[Hashable, int] = {}
        for point in data.spectrum(i):
            ranks[point.u] = ranks.get(point.u, 0) + point.r
        return ranks

    @classmethod
    def _describe_ranks(cls, ranks: Dict[Hashable, int]) -> str:
        items = sorted((cls._describe(u), r) for u, r in ranks.items())
        return "{" + ", ".join(f"{u}: {r}" for u, r in items) + "}"

    @staticmethod
    def _describe(u) -> str:
        if hasattr(u, "a"):
            return f"(a={u.a}, alpha={u.alpha})"
        return f"(b={u.b}, omega-exponent={u.omega.exponent})"


def check_weights_increasing(values: Sequence[Tuple[Tuple[Fraction, int], Fraction]]) -> List[str]:
    """Check that targets keyed by lexicographically sorted (a, k) are strictly increasing"""
    errors = []
    ordered = sorted(values, key=lambda item: item[0])
    for (key_prev, prev), (key, value) in zip(ordered, ordered[1:]):
        if not value > prev:
            errors.append(f"target for (a, k) = ({key[0]}, {key[1]}) is {value}, not above {prev} at ({key_prev[0]}, {key_prev[1]})")
    return errors
