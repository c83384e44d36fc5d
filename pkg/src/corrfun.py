"""
Correspondence between filtered local systems and regular filtered flat data.

Local monodromy eigenvalues are carried exactly through their exponents
(omega = exp(-2 pi i beta)), so the KMS map and its inverse are exact on rationals.
"""

import cmath
import logging
import math
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import linalg

from .models import (
    Eigenvalue,
    FilteredLocalSystemData,
    GaussianQ,
    InvalidDataError,
    KmsError,
    KmsLabel,
    KmsPoint,
    LsLabel,
    ParabolicFlatData,
    PointKmsEntry,
    Rational,
    to_fraction,
)
from .pardata import require_valid, rescale_residues, shift_of

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-6

rescale_lambda = rescale_residues


def alpha_of(omega: complex) -> complex:
    """
    The branch alpha with exp(-2 pi i alpha) = omega and 0 <= Re alpha < 1.

    Writing omega = rho e^{i phi}, alpha = (-phi + i log rho) / (2 pi) + k.
    """
    omega = complex(omega)
    if omega == 0:
        raise KmsError("omega = 0 is not a monodromy eigenvalue")
    phase = cmath.phase(omega)
    re = (-phase / (2 * math.pi)) % 1.0
    if re >= 1.0:
        re = 0.0
    return complex(re, math.log(abs(omega)) / (2 * math.pi))


def _as_gaussian(value: Any) -> GaussianQ:
    return value if isinstance(value, GaussianQ) else GaussianQ.model_validate(value)


def phi_kms(b: Any, omega: Any, c: Any = 0, lam: Any = 1) -> KmsLabel:
    """
    Flat-side KMS value of (b, omega) for truncation c: a = b - Re alpha + n in (c - 1, c],
    residue lambda * (alpha - n), so that Re(lambda^-1 residue) + a = b.
    """
    b = to_fraction(b)
    c = to_fraction(c)
    lam = _as_gaussian(lam)
    alpha = Eigenvalue.model_validate(omega).alpha()
    a0 = b - alpha.re
    n = shift_of(a0, c)
    return KmsLabel.model_construct(a=a0 + n, alpha=lam * alpha.shifted(n))


def phi_inverse_label(u: KmsLabel, lam: Any = 1) -> LsLabel:
    """Exact inverse KMS map (a, alpha) -> (Re(lambda^-1 alpha) + a, exp(-2 pi i lambda^-1 alpha))"""
    beta = u.alpha / _as_gaussian(lam)
    return LsLabel.model_construct(b=beta.re + u.a, omega=Eigenvalue.from_exponent(beta))


def phi_inverse_kms(a: Any, alpha: Any, lam: Any = 1) -> Tuple[Fraction, complex]:
    """(a, alpha) -> (a + Re alpha, exp(-2 pi i alpha)); constant on Z-orbits"""
    u = KmsLabel(a=a, alpha=alpha)
    label = phi_inverse_label(u, lam)
    return label.b, label.omega.value


class UnipotentLog(BaseModel):
    """Multiplicative Jordan decomposition M = M_s M_u and N = -(2 pi i)^-1 log M_u"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    eigen: List[Tuple[Any, Any]]
    M_s: Any
    M_u: Any
    N: Any
    exact: bool = False

    def eigenvalue_of(self, index: int) -> complex:
        """Eigenvalue whose generalized eigenspace contains the standard basis vector e_index"""
        for omega, basis in self.eigen:
            projector = basis @ np.linalg.pinv(basis)
            e = np.zeros(projector.shape[0], dtype=complex)
            e[index] = 1.0
            if np.linalg.norm(projector @ e - e) < 1e-8:
                return omega
        raise KmsError(f"basis vector {index} is not in a single generalized eigenspace")


def _log_unipotent(Mu, identity, n: int, two_pi_i):
    X = Mu - identity
    log = X * 0
    power = identity
    for k in range(1, n + 1):
        power = power * X if hasattr(power, "is_zero_matrix") else power @ X
        log = log + ((-1) ** (k + 1)) * power / k
    return -log / two_pi_i


def _cluster(values: np.ndarray, tol: float) -> List[List[int]]:
    clusters: List[List[int]] = []
    for k, v in enumerate(values):
        for cluster in clusters:
            if abs(values[cluster[0]] - v) <= tol * max(1.0, abs(v)):
                cluster.append(k)
                break
        else:
            clusters.append([k])
    return clusters


def unipotent_log(M: Any, tol: float = EIGEN_TOL) -> UnipotentLog:
    """
    Split an invertible monodromy into semisimple and unipotent parts and take the unipotent
    logarithm as a finite series.

    Args:
        M: square invertible matrix, numeric (numpy) or exact (sympy)
        tol: relative tolerance for grouping numerically computed eigenvalues

    Returns:
        UnipotentLog with per-eigenvalue generalized eigenspace bases
    """
    if isinstance(M, sp.MatrixBase):
        return _unipotent_log_exact(sp.Matrix(M))
    M = np.asarray(M, dtype=complex)
    n = M.shape[0]
    if M.ndim != 2 or M.shape[1] != n:
        raise KmsError(f"monodromy must be square, got shape {M.shape}")
    if n > 8:
        raise KmsError(f"monodromy size {n} exceeds 8")
    if abs(np.linalg.det(M)) < 1e-12:
        raise KmsError("monodromy is singular")

    values = np.linalg.eigvals(M)
    eigen = []
    columns = []
    diagonal = []
    for cluster in _cluster(values, tol):
        omega = complex(np.mean(values[cluster]))
        power = np.linalg.matrix_power(M - omega * np.eye(n), n)
        _, _, vh = np.linalg.svd(power)
        basis = vh[-len(cluster):].conj().T
        eigen.append((omega, basis))
        columns.append(basis)
        diagonal += [omega] * len(cluster)
    P = np.hstack(columns)
    Ms = P @ np.diag(diagonal) @ np.linalg.inv(P)
    Mu = np.linalg.solve(Ms, M)
    N = _log_unipotent(Mu, np.eye(n), n, 2j * math.pi)
    if np.linalg.norm(np.linalg.matrix_power(N, n)) > 1e-8 * max(1.0, np.linalg.norm(N)) ** n:
        logger.warning("unipotent logarithm is not numerically nilpotent")
    return UnipotentLog(eigen=eigen, M_s=Ms, M_u=Mu, N=N)


def _unipotent_log_exact(M: sp.Matrix) -> UnipotentLog:
    n = M.shape[0]
    if M.det() == 0:
        raise KmsError("monodromy is singular")
    P, J = M.jordan_form()
    D = sp.diag(*[J[k, k] for k in range(n)])
    Ms = sp.simplify(P * D * P.inv())
    Mu = sp.simplify(Ms.inv() * M)
    N = sp.simplify(_log_unipotent(Mu, sp.eye(n), n, 2 * sp.pi * sp.I))
    eigen = []
    for omega in sorted(set(J[k, k] for k in range(n)), key=sp.default_sort_key):
        basis = np.array(P[:, [k for k in range(n) if J[k, k] == omega]].evalf(), dtype=complex)
        eigen.append((complex(omega), basis))
    return UnipotentLog(eigen=eigen, M_s=Ms, M_u=Mu, N=N, exact=True)


class MonodromyDatum(BaseModel):
    """Monodromy around one puncture with filtration weights b on the standard basis"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    M: Any
    weights: List[Rational]
    exponents: Optional[List[GaussianQ]] = None

    @field_validator("M")
    @classmethod
    def coerce_matrix(cls, M: Any) -> np.ndarray:
        if isinstance(M, np.ndarray):
            return M.astype(complex)
        rows = [[complex(v) if not isinstance(v, dict) else complex(float(v.get("re", 0)), float(v.get("im", 0)))
                 for v in row] for row in M]
        return np.array(rows, dtype=complex)

    @model_validator(mode="after")
    def check_compatible(self) -> "MonodromyDatum":
        n = self.M.shape[0]
        if self.M.shape != (n, n):
            raise ValueError(f"M must be square, got {self.M.shape}")
        if len(self.weights) != n:
            raise ValueError(f"weights has {len(self.weights)} entries, expected {n}")
        if self.exponents is not None and len(self.exponents) != n:
            raise ValueError(f"exponents has {len(self.exponents)} entries, expected {n}")
        if abs(np.linalg.det(self.M)) < 1e-12:
            raise ValueError("M must be invertible")
        return self

    def decomposition(self) -> UnipotentLog:
        return unipotent_log(self.M)

    def eigenvalue(self, index: int, decomposition: Optional[UnipotentLog] = None) -> Eigenvalue:
        """Exact eigenvalue of basis vector `index`, from the exponents when given"""
        if self.exponents is not None:
            return Eigenvalue.from_exponent(self.exponents[index])
        decomposition = decomposition or self.decomposition()
        return Eigenvalue.from_complex(decomposition.eigenvalue_of(index))


def check_monodromy(datum: MonodromyDatum) -> List[str]:
    """Eigenspace compatibility and M-invariance of the filtration"""
    errors = []
    n = datum.M.shape[0]
    try:
        decomposition = datum.decomposition()
        for k in range(n):
            decomposition.eigenvalue_of(k)
    except KmsError as e:
        return [f"Field 'M': {e}"]
    for k in range(n):
        for l in range(n):
            # M must keep span{e_k : b_k <= b} inside itself
            if datum.weights[l] > datum.weights[k] and abs(datum.M[l, k]) > 1e-10:
                errors.append(
                    f"Field 'M[{l}][{k}]' must vanish: filtration step b = {datum.weights[k]} is not M-invariant"
                )
    return errors


class FlatLocalDatum(BaseModel):
    """Flat-side weights, residue eigenvalues and graded nilpotent parts at one puncture"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    c: Rational
    lam: GaussianQ = Field(default_factory=lambda: GaussianQ.of(1))
    weights: List[Rational]
    residues: List[GaussianQ]
    shifts: List[int]
    blocks: List[Tuple[KmsLabel, List[int], Any]] = Field(default_factory=list)

    def spectrum(self) -> List[KmsPoint]:
        return [KmsPoint.model_construct(a=u.a, alpha=u.alpha, r=len(indices)) for u, indices, _ in self.blocks]


def phi_local(datum: MonodromyDatum, c: Any = 0, lam: Any = 1) -> FlatLocalDatum:
    """
    Flat-side datum of a filtered local monodromy: per basis vector, alpha = alpha_of(omega),
    n with b - Re alpha + n in (c - 1, c], weight b - Re alpha + n and residue alpha - n
    (scaled by lambda); the nilpotent part is restricted to each graded piece.
    """
    errors = check_monodromy(datum)
    if errors:
        raise InvalidDataError(f"MonodromyDatum failed validation: {errors[0]}", errors)
    c = to_fraction(c)
    lam = _as_gaussian(lam)
    decomposition = datum.decomposition()

    weights, residues, shifts, labels = [], [], [], []
    for k, b in enumerate(datum.weights):
        alpha = datum.eigenvalue(k, decomposition).alpha()
        n = shift_of(b - alpha.re, c)
        u = KmsLabel.model_construct(a=b - alpha.re + n, alpha=lam * alpha.shifted(n))
        weights.append(u.a)
        residues.append(u.alpha)
        shifts.append(n)
        labels.append(u)

    N_full = decomposition.N
    if decomposition.exact:
        N_full = np.array(N_full.evalf(), dtype=complex)
    blocks = []
    seen: Dict[KmsLabel, List[int]] = {}
    for k, u in enumerate(labels):
        seen.setdefault(u, []).append(k)
    for u, indices in seen.items():
        N = np.asarray(N_full, dtype=complex)[np.ix_(indices, indices)]
        blocks.append((u, indices, N))
    return FlatLocalDatum(c=c, lam=lam, weights=weights, residues=residues, shifts=shifts, blocks=blocks)


def monodromy_from_kms(spectrum: Sequence[KmsPoint], lam: Any = 1,
                       blocks: Optional[Sequence[Any]] = None) -> MonodromyDatum:
    """
    Block-diagonal monodromy with blocks omega * exp(-2 pi i N) and weights b repeated r times,
    inverse to phi_local on the graded pieces.
    """
    lam = _as_gaussian(lam)
    matrices, weights, exponents = [], [], []
    for n, p in enumerate(spectrum):
        label = phi_inverse_label(p.u, lam)
        N = np.zeros((p.r, p.r), dtype=complex)
        if blocks is not None and n < len(blocks) and blocks[n] is not None:
            N = np.array(sp.Matrix(blocks[n]).evalf(), dtype=complex) if isinstance(blocks[n], sp.MatrixBase) \
                else np.asarray(blocks[n], dtype=complex)
        matrices.append(label.omega.value * linalg.expm(-2j * math.pi * N))
        weights += [label.b] * p.r
        exponents += [label.omega.exponent] * p.r
    return MonodromyDatum(M=linalg.block_diag(*matrices), weights=weights, exponents=exponents)


def kms_table_transport(ls: FilteredLocalSystemData, lam: Any = 1,
                        truncation: Optional[Dict[str, Any]] = None) -> ParabolicFlatData:
    """
    Flat-side KMS tables of a filtered local system, canonical for the truncation c.

    Args:
        ls: local-system tables, validated first
        lam: nonzero lambda of the produced lambda-flat data
        truncation: per-divisor c_i, default 0

    Returns:
        ParabolicFlatData with Re(lambda^-1 alpha) + a = b at every KMS value and the same ranks
    """
    require_valid(ls)
    lam = _as_gaussian(lam)
    if lam.is_zero():
        raise KmsError("lambda must be nonzero")
    truncation = {i: to_fraction(c) for i, c in (truncation or {}).items()}

    def transported(u, i):
        return phi_kms(u.b, u.omega, truncation.get(i, Fraction(0)), lam)

    divisor_spectra = {}
    for i in ls.geometry.components:
        divisor_spectra[i] = [
            KmsPoint.model_construct(a=v.a, alpha=v.alpha, r=p.r)
            for p in ls.spectrum(i)
            for v in [transported(p.u, i)]
        ]
    point_spectra = {}
    for point in ls.geometry.points:
        point_spectra[point.label] = [
            PointKmsEntry.model_construct(u_i=transported(e.u_i, point.i), u_j=transported(e.u_j, point.j), r=e.r)
            for e in ls.point_spectra.get(point.label, [])
        ]
    logger.info(f"Transported local system of rank {ls.rank} over {len(ls.geometry.components)} divisor(s)")
    return ParabolicFlatData(
        lam=lam,
        rank=ls.rank,
        geometry=ls.geometry,
        divisor_spectra=divisor_spectra,
        point_spectra=point_spectra,
        truncation=truncation,
    )
