from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Tuple

import numpy as np
import sympy as sp

from .models import (
    DivisorGeometry,
    DivisorPoint,
    Eigenvalue,
    FilteredLocalSystemData,
    GaussianQ,
    KmsLabel,
    KmsPoint,
    LsLabel,
    LsPoint,
    LsPointEntry,
    ParabolicFlatData,
    PointKmsEntry,
)
from .perturb import NilpotentBlockData


class TableKind(str, Enum):
    """Kinds of random fixture the property suites draw"""
    KMS_PAIR = "kms_pair"
    FLAT = "flat"
    DELIGNE = "deligne"
    LOCAL_SYSTEM = "local_system"
    NILPOTENT = "nilpotent"


def random_rational(rng: np.random.Generator, low: Fraction, high: Fraction, max_den: int = 6,
                    open_low: bool = True) -> Fraction:
    """Rational with denominator <= max_den in (low, high] (or [low, high] when open_low is False)"""
    while True:
        q = int(rng.integers(1, max_den + 1))
        lo = int(np.floor(low * q))
        hi = int(np.floor(high * q))
        p = int(rng.integers(lo, hi + 1))
        value = Fraction(p, q)
        if (value > low or (not open_low and value == low)) and value <= high:
            return value


def random_gaussian(rng: np.random.Generator, bound: int = 2, max_den: int = 4) -> GaussianQ:
    return GaussianQ.of(
        random_rational(rng, Fraction(-bound), Fraction(bound), max_den, open_low=False),
        random_rational(rng, Fraction(-bound), Fraction(bound), max_den, open_low=False),
    )


def random_lambda(rng: np.random.Generator) -> GaussianQ:
    while True:
        lam = random_gaussian(rng, bound=2, max_den=2)
        if not lam.is_zero():
            return lam


def random_geometry(rng: np.random.Generator, max_components: int = 3, max_points: int = 3) -> DivisorGeometry:
    """Components D1.., integer self-intersections, and labelled points with multiplicity"""
    n = int(rng.integers(1, max_components + 1))
    components = [f"D{k + 1}" for k in range(n)]
    points = []
    if n >= 2:
        for k in range(int(rng.integers(0, max_points + 1))):
            i, j = sorted(rng.choice(n, size=2, replace=False))
            points.append(DivisorPoint(i=components[i], j=components[j], label=f"P{k + 1}",
                                       mult=int(rng.integers(1, 3))))
    return DivisorGeometry(
        components=components,
        selfint={c: Fraction(int(rng.integers(-3, 4))) for c in components},
        degL={c: Fraction(int(rng.integers(0, 4))) for c in components},
        points=points,
    )


def random_partition(rng: np.random.Generator, rank: int) -> List[int]:
    parts = []
    remaining = rank
    while remaining:
        part = int(rng.integers(1, remaining + 1))
        parts.append(part)
        remaining -= part
    return parts


def couple(rng: np.random.Generator, side_i: List[Tuple[Any, int]], side_j: List[Tuple[Any, int]]) -> List[Tuple[Any, Any, int]]:
    """Random point table whose marginals reproduce both divisor spectra"""
    slots_i = [u for u, r in side_i for _ in range(r)]
    slots_j = [u for u, r in side_j for _ in range(r)]
    order = rng.permutation(len(slots_j))
    counts: Dict[Tuple[Any, Any], int] = {}
    keys: List[Tuple[Any, Any]] = []
    for u, k in zip(slots_i, order):
        key = (u, slots_j[k])
        if key not in counts:
            keys.append(key)
            counts[key] = 0
        counts[key] += 1
    return [(u, v, counts[(u, v)]) for u, v in keys]


class TableGenerator:
    """Base class for random table generators"""

    def generate(self, rng: np.random.Generator, **options) -> Any:
        raise NotImplementedError


class KmsPairGenerator(TableGenerator):
    """Random (a, alpha) with rational parts"""

    def generate(self, rng: np.random.Generator, **options) -> KmsLabel:
        a = random_rational(rng, Fraction(-3), Fraction(3), 8, open_low=False)
        alpha = GaussianQ.of(
            random_rational(rng, Fraction(-3), Fraction(3), 8, open_low=False),
            random_rational(rng, Fraction(-1), Fraction(1), 4, open_low=False),
        )
        return KmsLabel(a=a, alpha=alpha)


class FlatTableGenerator(TableGenerator):
    """Random consistent ParabolicFlatData"""

    def label(self, rng: np.random.Generator, lam: GaussianQ, c: Fraction) -> KmsLabel:
        return KmsLabel.model_construct(a=random_rational(rng, c - 1, c), alpha=random_gaussian(rng))

    def generate(self, rng: np.random.Generator, **options) -> ParabolicFlatData:
        geometry = options.get("geometry") or random_geometry(rng)
        rank = options.get("rank") or int(rng.integers(1, 4))
        lam = options.get("lam") or random_lambda(rng)
        truncation = {i: Fraction(int(rng.integers(-1, 2))) for i in geometry.components}

        spectra: Dict[str, List[Tuple[KmsLabel, int]]] = {}
        for i in geometry.components:
            spectra[i] = [(self.label(rng, lam, truncation[i]), r) for r in random_partition(rng, rank)]
        point_spectra = {
            p.label: [
                PointKmsEntry.model_construct(u_i=u, u_j=v, r=r)
                for u, v, r in couple(rng, spectra[p.i], spectra[p.j])
            ]
            for p in geometry.points
        }
        return ParabolicFlatData(
            lam=lam,
            rank=rank,
            geometry=geometry,
            divisor_spectra={
                i: [KmsPoint.model_construct(a=u.a, alpha=u.alpha, r=r) for u, r in entries]
                for i, entries in spectra.items()
            },
            point_spectra=point_spectra,
            truncation=truncation,
        )


class DeligneTableGenerator(FlatTableGenerator):
    """Random flat tables with Re(lambda^-1 alpha) + a = 0 at every KMS value"""

    def label(self, rng: np.random.Generator, lam: GaussianQ, c: Fraction) -> KmsLabel:
        a = random_rational(rng, c - 1, c)
        beta = GaussianQ.of(-a, random_rational(rng, Fraction(-2), Fraction(2), 4, open_low=False))
        return KmsLabel.model_construct(a=a, alpha=lam * beta)


class LocalSystemGenerator(TableGenerator):
    """Random consistent FilteredLocalSystemData"""

    def generate(self, rng: np.random.Generator, **options) -> FilteredLocalSystemData:
        geometry = options.get("geometry") or random_geometry(rng)
        rank = options.get("rank") or int(rng.integers(1, 4))
        spectra: Dict[str, List[Tuple[LsLabel, int]]] = {}
        for i in geometry.components:
            entries = []
            for r in random_partition(rng, rank):
                exponent = GaussianQ.of(
                    random_rational(rng, Fraction(0), Fraction(1), 6, open_low=False) % 1,
                    random_rational(rng, Fraction(-1), Fraction(1), 4, open_low=False),
                )
                b = random_rational(rng, Fraction(-2), Fraction(2), 6, open_low=False)
                entries.append((LsLabel.model_construct(b=b, omega=Eigenvalue.from_exponent(exponent)), r))
            spectra[i] = entries
        point_spectra = {
            p.label: [LsPointEntry.model_construct(u_i=u, u_j=v, r=r) for u, v, r in couple(rng, spectra[p.i], spectra[p.j])]
            for p in geometry.points
        }
        return FilteredLocalSystemData(
            rank=rank,
            geometry=geometry,
            divisor_spectra={
                i: [LsPoint.model_construct(b=u.b, omega=u.omega, r=r) for u, r in entries]
                for i, entries in spectra.items()
            },
            point_spectra=point_spectra,
        )


# weights at distance > 1/3 from both ends of (-1, 0]
SEPARATED_WEIGHTS = [Fraction(-1, 2), Fraction(-2, 5), Fraction(-3, 5), Fraction(-3, 7), Fraction(-4, 7)]
# distinct weight pairs with gap > 1/5, admissible for rank 2 from m = 10 on
SEPARATED_PAIRS = [
    (Fraction(-5, 7), Fraction(-2, 7)),
    (Fraction(-7, 10), Fraction(-1, 4)),
    (Fraction(-3, 4), Fraction(-3, 10)),
    (Fraction(-2, 3), Fraction(-1, 4)),
]


class NilpotentSpectrumGenerator(TableGenerator):
    """
    Flat tables with random nilpotent blocks whose lattice perturbation is admissible from
    m = 10 on. A divisor carries either one weight from SEPARATED_WEIGHTS with a random
    partition of the rank, or (rank 2, with probability `split`) two distinct weights from
    SEPARATED_PAIRS, one per rank-1 entry.
    """

    def weights(self, rng: np.random.Generator, rank: int, split: float) -> List[Tuple[Fraction, int]]:
        if rank == 2 and rng.random() < split:
            pair = SEPARATED_PAIRS[int(rng.integers(len(SEPARATED_PAIRS)))]
            return [(pair[0], 1), (pair[1], 1)]
        a = SEPARATED_WEIGHTS[int(rng.integers(len(SEPARATED_WEIGHTS)))]
        return [(a, r) for r in random_partition(rng, rank)]

    def generate(self, rng: np.random.Generator, **options) -> Tuple[ParabolicFlatData, NilpotentBlockData]:
        geometry = options.get("geometry") or random_geometry(rng)
        rank = options.get("rank") or int(rng.integers(1, 4))
        lam = options.get("lam") or random_lambda(rng)
        split = options.get("split", 0.5)

        spectra: Dict[str, List[Tuple[KmsLabel, int]]] = {}
        blocks: Dict[str, List[sp.Matrix]] = {}
        for i in geometry.components:
            # entries share Re(lambda^-1 alpha) and differ in the imaginary part
            beta = random_rational(rng, Fraction(-1), Fraction(1), 4, open_low=False)
            spectra[i] = []
            for n, (a, r) in enumerate(self.weights(rng, rank, split)):
                alpha = lam * GaussianQ.of(beta, n + random_rational(rng, Fraction(0), Fraction(1, 2), 4))
                spectra[i].append((KmsLabel.model_construct(a=a, alpha=alpha), r))
            blocks[i] = [random_nilpotent(rng, r) for _, r in spectra[i]]
        data = ParabolicFlatData(
            lam=lam,
            rank=rank,
            geometry=geometry,
            divisor_spectra={
                i: [KmsPoint.model_construct(a=u.a, alpha=u.alpha, r=r) for u, r in entries]
                for i, entries in spectra.items()
            },
            point_spectra={
                p.label: [
                    PointKmsEntry.model_construct(u_i=u, u_j=v, r=r)
                    for u, v, r in couple(rng, spectra[p.i], spectra[p.j])
                ]
                for p in geometry.points
            },
        )
        return data, NilpotentBlockData(blocks=blocks)


def random_nilpotent(rng: np.random.Generator, size: int) -> sp.Matrix:
    """Strictly lower-triangular integer matrix, conjugated by a unipotent integer matrix"""
    N = sp.zeros(size, size)
    for r in range(size):
        for c in range(r):
            N[r, c] = int(rng.integers(-2, 3))
    P = sp.eye(size)
    for r in range(size):
        for c in range(r + 1, size):
            P[r, c] = int(rng.integers(-1, 2))
    return P * N * P.inv()


class GeneratorFactory:
    """Factory for random table generators keyed by TableKind"""

    _generators = {
        TableKind.KMS_PAIR: KmsPairGenerator(),
        TableKind.FLAT: FlatTableGenerator(),
        TableKind.DELIGNE: DeligneTableGenerator(),
        TableKind.LOCAL_SYSTEM: LocalSystemGenerator(),
        TableKind.NILPOTENT: NilpotentSpectrumGenerator(),
    }

    @classmethod
    def get_generator(cls, kind: TableKind) -> TableGenerator:
        """Get the generator registered for a table kind"""
        if kind not in cls._generators:
            raise ValueError(f"No generator registered for '{kind}'")
        return cls._generators[kind]

    @classmethod
    def register_custom_generator(cls, kind: TableKind, generator: TableGenerator):
        """Register a custom generator for a table kind"""
        cls._generators[kind] = generator

    @classmethod
    def draw(cls, kind: TableKind, count: int, seed: int = 0, **options) -> List[Any]:
        """`count` samples from one seeded stream"""
        rng = np.random.default_rng(seed)
        generator = cls.get_generator(kind)
        return [generator.generate(rng, **options) for _ in range(count)]


def random_traceless(rng: np.random.Generator, rank: int, bound: float = 1.0) -> np.ndarray:
    """Random hermitian trace-free matrix with Frobenius norm at most `bound`"""
    X = rng.normal(size=(rank, rank)) + 1j * rng.normal(size=(rank, rank))
    X = 0.5 * (X + X.conj().T)
    X = X - np.trace(X) / rank * np.eye(rank)
    norm = np.linalg.norm(X)
    return X if norm == 0 else X * (bound * rng.uniform(0.1, 1.0) / norm)
