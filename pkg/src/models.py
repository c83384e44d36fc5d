"""
Value types for parabolic KMS data, filtered local systems and perturbation plans
"""

import cmath
import logging
import math
from enum import Enum
from fractions import Fraction
from typing import Annotated, Any, Dict, List, Optional, Tuple

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    field_validator,
    model_validator,
)

from .env_config import EnvConfig

logger = logging.getLogger(__name__)


class KmsError(ValueError):
    """Root of the errors raised by kms-hodge operations"""


class InvalidDataError(KmsError):
    """Raised when an operation needs valid data and validation reported problems"""

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        super().__init__(message)
        self.errors = list(errors or [])


class IdentityCheckError(KmsError):
    """An exact identity that must hold for every input did not hold"""


class FlowConfigError(KmsError):
    """Heat-flow configuration rejected (stability guard or ranges)"""


class NumericalAbort(KmsError):
    """Numerical run aborted; `state` holds the last good state"""

    def __init__(self, message: str, state: Any = None):
        super().__init__(message)
        self.state = state


def to_fraction(value: Any) -> Fraction:
    """Parse "p/q" strings, decimal strings, ints and floats into an exact Fraction"""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError(f"Expected a rational, got boolean {value}")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"Expected a finite rational, got {value}")
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"Cannot parse rational from '{value}': {e}")
    raise ValueError(f"Expected a rational, got {type(value).__name__}")


def format_rational(value: Fraction) -> str:
    """Serialize a Fraction as "p/q" (or "p" for integers)"""
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


Rational = Annotated[
    Fraction,
    BeforeValidator(to_fraction),
    PlainSerializer(format_rational, return_type=str),
]


class KmsModel(BaseModel):
    """Immutable base for all exact value types"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)


class GaussianQ(KmsModel):
    """Complex number with exact rational real and imaginary parts"""
    re: Rational = Fraction(0)
    im: Rational = Fraction(0)

    @model_validator(mode="before")
    @classmethod
    def coerce_input(cls, value: Any) -> Any:
        if isinstance(value, GaussianQ):
            return value
        if isinstance(value, complex):
            return {"re": value.real, "im": value.imag}
        if isinstance(value, (int, float, str, Fraction)) and not isinstance(value, bool):
            return {"re": value, "im": 0}
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return {"re": value[0], "im": value[1]}
        return value

    @classmethod
    def of(cls, re: Any = 0, im: Any = 0) -> "GaussianQ":
        return cls.model_construct(re=to_fraction(re), im=to_fraction(im))

    def __add__(self, other: "GaussianQ") -> "GaussianQ":
        other = _as_gaussian(other)
        return GaussianQ.of(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __sub__(self, other: "GaussianQ") -> "GaussianQ":
        other = _as_gaussian(other)
        return GaussianQ.of(self.re - other.re, self.im - other.im)

    def __neg__(self) -> "GaussianQ":
        return GaussianQ.of(-self.re, -self.im)

    def __mul__(self, other: "GaussianQ") -> "GaussianQ":
        other = _as_gaussian(other)
        return GaussianQ.of(self.re * other.re - self.im * other.im,
                            self.re * other.im + self.im * other.re)

    __rmul__ = __mul__

    def __truediv__(self, other: "GaussianQ") -> "GaussianQ":
        other = _as_gaussian(other)
        norm = other.abs2()
        if norm == 0:
            raise ZeroDivisionError("division by zero Gaussian rational")
        num = self * other.conjugate()
        return GaussianQ.of(num.re / norm, num.im / norm)

    def __complex__(self) -> complex:
        return complex(float(self.re), float(self.im))

    def __hash__(self) -> int:
        return hash((self.re, self.im))

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, GaussianQ):
            return self.re == other.re and self.im == other.im
        return NotImplemented

    def conjugate(self) -> "GaussianQ":
        return GaussianQ.of(self.re, -self.im)

    def abs2(self) -> Fraction:
        return self.re * self.re + self.im * self.im

    def is_zero(self) -> bool:
        return self.re == 0 and self.im == 0

    def shifted(self, n: int) -> "GaussianQ":
        """alpha - n"""
        return GaussianQ.of(self.re - n, self.im)

    def __str__(self) -> str:
        if self.im == 0:
            return format_rational(self.re)
        return f"{format_rational(self.re)}{'+' if self.im > 0 else '-'}{format_rational(abs(self.im))}i"


def _as_gaussian(value: Any) -> GaussianQ:
    if isinstance(value, GaussianQ):
        return value
    return GaussianQ.model_validate(value)


def re_over(alpha: GaussianQ, lam: GaussianQ) -> Fraction:
    """Re(lambda^-1 * alpha), exact"""
    return (lam.re * alpha.re + lam.im * alpha.im) / lam.abs2()


def im_over(alpha: GaussianQ, lam: GaussianQ) -> Fraction:
    """Im(lambda^-1 * alpha), exact"""
    return (lam.re * alpha.im - lam.im * alpha.re) / lam.abs2()


class Eigenvalue(KmsModel):
    """
    Monodromy eigenvalue omega = exp(-2 pi i * exponent), stored through its exponent.

    The exponent is normalized to 0 <= Re < 1, so two eigenvalues are equal exactly
    when their exponents agree modulo the integers.
    """
    exponent: GaussianQ = Field(default_factory=GaussianQ)

    @model_validator(mode="before")
    @classmethod
    def coerce_input(cls, value: Any) -> Any:
        if isinstance(value, Eigenvalue):
            return value
        if isinstance(value, complex) or (isinstance(value, (int, float)) and not isinstance(value, bool)):
            return {"exponent": _exponent_from_complex(complex(value))}
        if isinstance(value, dict) and "exponent" not in value and ("re" in value or "im" in value):
            omega = complex(float(value.get("re", 0.0)), float(value.get("im", 0.0)))
            return {"exponent": _exponent_from_complex(omega)}
        return value

    @field_validator("exponent")
    @classmethod
    def normalize_exponent(cls, exponent: GaussianQ) -> GaussianQ:
        shift = math.floor(exponent.re)
        return exponent.shifted(shift)

    @classmethod
    def from_exponent(cls, exponent: Any) -> "Eigenvalue":
        return cls(exponent=_as_gaussian(exponent))

    @classmethod
    def from_complex(cls, omega: complex, max_denominator: int = 10 ** 4) -> "Eigenvalue":
        return cls(exponent=_exponent_from_complex(complex(omega), max_denominator))

    @property
    def value(self) -> complex:
        return cmath.exp(-2j * math.pi * complex(self.exponent))

    def alpha(self) -> GaussianQ:
        """Exact branch exponent with 0 <= Re < 1"""
        return self.exponent

    def __hash__(self) -> int:
        return hash(("omega", self.exponent.re, self.exponent.im))

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, Eigenvalue):
            return self.exponent == other.exponent
        return NotImplemented


def _exponent_from_complex(omega: complex, max_denominator: int = 10 ** 4) -> GaussianQ:
    """
    Rational exponent of a numeric eigenvalue, omega = exp(-2 pi i exponent).

    Raises:
        ValueError: omega = 0, or the nearest rational exponent with denominator at most
            max_denominator is further than KMS_HODGE_TOL from the exponent of omega
    """
    if omega == 0:
        raise ValueError("omega = 0 is not a monodromy eigenvalue")
    phase = cmath.phase(omega)
    re = (-phase / (2 * math.pi)) % 1.0
    im = math.log(abs(omega)) / (2 * math.pi)
    re_q = Fraction(re).limit_denominator(max_denominator)
    im_q = Fraction(im).limit_denominator(max_denominator)
    # re lives on the circle R/Z
    re_off = abs(re - float(re_q))
    residual = max(min(re_off, 1.0 - re_off), abs(im - float(im_q)))
    if residual > EnvConfig.get_tolerance():
        raise ValueError(
            f"omega = {omega} has no rational exponent with denominator <= {max_denominator} "
            f"(residual {residual:.3g})"
        )
    if residual > 1e-12:
        logger.warning(f"Rationalized the exponent of omega = {omega} to ({re_q % 1}, {im_q}), residual {residual:.3g}")
    if re_q == 1:
        re_q = Fraction(0)
    return GaussianQ.of(re_q, im_q)


class KmsLabel(KmsModel):
    """A KMS spectrum value u = (a, alpha)"""
    a: Rational
    alpha: GaussianQ = Field(default_factory=GaussianQ)

    @model_validator(mode="before")
    @classmethod
    def from_pair(cls, value: Any) -> Any:
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return {"a": value[0], "alpha": value[1]}
        return value

    def __hash__(self) -> int:
        return hash((self.a, self.alpha.re, self.alpha.im))

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, KmsLabel):
            return self.a == other.a and self.alpha == other.alpha
        return NotImplemented


class KmsPoint(KmsModel):
    """Graded piece of a divisor KMS spectrum: weight a, residue eigenvalue alpha, rank r"""
    a: Rational
    alpha: GaussianQ = Field(default_factory=GaussianQ)
    r: int = 1

    @property
    def u(self) -> KmsLabel:
        return KmsLabel.model_construct(a=self.a, alpha=self.alpha)


class PointKmsEntry(KmsModel):
    """Graded piece at an intersection point P of D_i and D_j with rank r(P, u_i, u_j)"""
    u_i: KmsLabel
    u_j: KmsLabel
    r: int = 1

    def swapped(self) -> "PointKmsEntry":
        return PointKmsEntry.model_construct(u_i=self.u_j, u_j=self.u_i, r=self.r)


class DivisorPoint(KmsModel):
    """An intersection point of D_i and D_j, stored with i < j"""
    i: str
    j: str
    label: str
    mult: int = 1

    @model_validator(mode="before")
    @classmethod
    def order_components(cls, value: Any) -> Any:
        if isinstance(value, dict) and "i" in value and "j" in value and str(value["i"]) > str(value["j"]):
            value = dict(value)
            value["i"], value["j"] = value["j"], value["i"]
        return value

    def other(self, k: str) -> str:
        return self.j if k == self.i else self.i


class DivisorGeometry(KmsModel):
    """Components D_i with [D_i]^2, (D_i, c1(L)) and labelled intersection points"""
    components: List[str]
    selfint: Dict[str, Rational] = Field(default_factory=dict)
    degL: Dict[str, Rational] = Field(default_factory=dict)
    points: List[DivisorPoint] = Field(default_factory=list)

    def points_on(self, i: str) -> List[DivisorPoint]:
        return [p for p in self.points if i in (p.i, p.j)]

    def point(self, label: str) -> Optional[DivisorPoint]:
        for p in self.points:
            if p.label == label:
                return p
        return None


def _orient_point_tables(values: Any) -> Any:
    """Swap point-entry sides for raw points given with i > j"""
    if not isinstance(values, dict):
        return values
    geometry = values.get("geometry")
    tables = values.get("point_spectra")
    if not isinstance(geometry, dict) or not isinstance(tables, dict):
        return values
    flipped = {
        str(p.get("label")) for p in geometry.get("points", [])
        if isinstance(p, dict) and str(p.get("i")) > str(p.get("j"))
    }
    if not flipped:
        return values
    values = dict(values)
    new_tables = {}
    for label, entries in tables.items():
        if label in flipped:
            entries = [
                {**e, "u_i": e.get("u_j"), "u_j": e.get("u_i")} if isinstance(e, dict) else e
                for e in entries
            ]
        new_tables[label] = entries
    values["point_spectra"] = new_tables
    return values


class ParabolicFlatData(KmsModel):
    """KMS spectral data of a regular filtered lambda-flat bundle"""
    lam: GaussianQ = Field(alias="lambda")
    rank: int
    geometry: DivisorGeometry
    divisor_spectra: Dict[str, List[KmsPoint]] = Field(default_factory=dict)
    point_spectra: Dict[str, List[PointKmsEntry]] = Field(default_factory=dict)
    truncation: Dict[str, Rational] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def orient_points(cls, values: Any) -> Any:
        return _orient_point_tables(values)

    @field_validator("lam")
    @classmethod
    def check_lambda(cls, lam: GaussianQ) -> GaussianQ:
        if lam.is_zero():
            raise ValueError("lambda must be nonzero")
        return lam

    def c(self, i: str) -> Fraction:
        return self.truncation.get(i, Fraction(0))

    def spectrum(self, i: str) -> List[KmsPoint]:
        return self.divisor_spectra.get(i, [])


class LsLabel(KmsModel):
    """A local-system spectrum value (b, omega)"""
    b: Rational
    omega: Eigenvalue = Field(default_factory=Eigenvalue)

    @model_validator(mode="before")
    @classmethod
    def from_pair(cls, value: Any) -> Any:
        if isinstance(value, (list, tuple)) and len(value) == 2:
            return {"b": value[0], "omega": value[1]}
        return value

    def __hash__(self) -> int:
        return hash((self.b, hash(self.omega)))

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, LsLabel):
            return self.b == other.b and self.omega == other.omega
        return NotImplemented


class LsPoint(KmsModel):
    """Graded piece (b, omega, r) of a filtered local system along a divisor"""
    b: Rational
    omega: Eigenvalue = Field(default_factory=Eigenvalue)
    r: int = 1

    @property
    def u(self) -> LsLabel:
        return LsLabel.model_construct(b=self.b, omega=self.omega)


class LsPointEntry(KmsModel):
    u_i: LsLabel
    u_j: LsLabel
    r: int = 1


class FilteredLocalSystemData(KmsModel):
    """Per-divisor (b, omega, r) spectrum tables of a filtered local system"""
    rank: int
    geometry: DivisorGeometry
    divisor_spectra: Dict[str, List[LsPoint]] = Field(default_factory=dict)
    point_spectra: Dict[str, List[LsPointEntry]] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def orient_points(cls, values: Any) -> Any:
        return _orient_point_tables(values)

    def spectrum(self, i: str) -> List[LsPoint]:
        return self.divisor_spectra.get(i, [])


class DataSide(str, Enum):
    """Which side of the correspondence a report was computed on"""
    FLAT = "flat"
    LOCAL_SYSTEM = "local_system"


class CharReport(KmsModel):
    """Parabolic characteristic numbers of one datum"""
    side: DataSide = DataSide.FLAT
    rank: int
    c1_coeffs: Dict[str, Rational]
    par_deg: Rational
    par_slope: Rational
    par_ch2: Rational
    c1_squared: Rational
    bg_gap: Rational
    im_residual: Rational = Fraction(0)


class VanishingReport(KmsModel):
    is_deligne_type: bool
    par_deg: Rational
    par_ch2: Rational


class CrossCheck(KmsModel):
    via_graded: Rational
    direct: Rational


class GradedDegree(KmsModel):
    """par-deg of the graded piece Gr_u along D_i, with the imaginary-side residual"""
    divisor: str
    u: KmsLabel
    r: int = 1
    re: Rational
    im_residual: Rational


class WeightLevel(KmsModel):
    """One step of the refined filtration: weight a, weight-filtration level k, rank r"""
    a: Rational
    k: int
    r: int
    sources: List[Tuple[GaussianQ, int]] = Field(default_factory=list)

    @property
    def key(self) -> Tuple[Fraction, int]:
        return (self.a, self.k)


class RefinedSpectrum(KmsModel):
    """Per-divisor refined index sets, sorted lexicographically by (a, k)"""
    levels: Dict[str, List[WeightLevel]] = Field(default_factory=dict)


class WeightShift(KmsModel):
    a: Rational
    k: int
    new: Rational


class PerturbedSpectrum(KmsModel):
    """New parabolic weights phi_i(a, k) of a refined spectrum"""
    eps: Rational
    new_weights: Dict[str, List[WeightShift]] = Field(default_factory=dict)

    def phi(self, i: str, a: Fraction, k: int) -> Fraction:
        for shift in self.new_weights.get(i, []):
            if shift.a == a and shift.k == k:
                return shift.new
        raise KeyError(f"no perturbed weight for divisor {i}, (a, k) = ({a}, {k})")


class PerturbPlan(PerturbedSpectrum):
    """Data of the lattice perturbation with eps = 1/m"""
    m: int
    gamma: Dict[str, Rational] = Field(default_factory=dict)
    L: Dict[str, Rational] = Field(default_factory=dict)
    a_prime: Dict[str, Dict[str, Rational]] = Field(default_factory=dict)


class CommandType(str, Enum):
    """Commands understood by the driver"""
    CHARNUM = "charnum"
    PERTURB = "perturb"
    CORR = "corr"
    FLOW = "flow"
    SCAN = "scan"
    VERIFY = "verify"


class OutputFormat(str, Enum):
    TEXT = "text"
    JSON = "json"
    CSV = "csv"


class JobSpec(BaseModel):
    """A single driver job: command, inputs, output and numeric options"""
    command: CommandType
    inputs: List[str] = Field(default_factory=list)
    output: Optional[str] = None
    output_format: OutputFormat = OutputFormat.JSON
    grid: Optional[Tuple[int, int]] = None
    eps: List[float] = Field(default_factory=lambda: [0.5, 0.25, 0.1, 0.05, 0.01])
    m: List[int] = Field(default_factory=lambda: [10, 100, 1000])
    dt: Optional[float] = None
    steps: Optional[int] = None
    seed: int = 0
    tol: float = 1e-10
    samples: int = 100000
    full: bool = False
    suites: List[int] = Field(default_factory=list)

    @field_validator("grid")
    @classmethod
    def check_grid(cls, grid: Optional[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
        if grid is not None and min(grid) < 8:
            raise ValueError(f"grid sizes must be at least 8, got {grid[0]}x{grid[1]}")
        return grid

    @field_validator("samples")
    @classmethod
    def check_samples(cls, samples: int) -> int:
        if samples < 1:
            raise ValueError(f"samples must be at least 1, got {samples}")
        return samples

    @field_validator("m")
    @classmethod
    def check_m(cls, m: List[int]) -> List[int]:
        if any(v < 1 for v in m):
            raise ValueError(f"m must be positive, got {m}")
        return m
