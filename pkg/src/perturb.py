"""
Weight filtrations of nilpotent residues, refined parabolic filtrations and the two
eps-perturbation schemes of parabolic weights.

All linear algebra here is exact (sympy matrices over Gaussian rationals).
"""

import logging
import math
from fractions import Fraction
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
import sympy as sp
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator

from .charnum import effective_weight, par_c1_flat, par_ch2_flat
from .models import (
    GaussianQ,
    InvalidDataError,
    KmsError,
    KmsLabel,
    KmsPoint,
    ParabolicFlatData,
    PerturbedSpectrum,
    PerturbPlan,
    PointKmsEntry,
    RefinedSpectrum,
    WeightLevel,
    WeightShift,
    format_rational,
    to_fraction,
)
from .validators import check_weights_increasing

logger = logging.getLogger(__name__)


def to_sympy(value: Any) -> sp.Expr:
    """Exact sympy number from "p/q", ints, Fractions, {"re", "im"} dicts or GaussianQ"""
    if isinstance(value, sp.Basic):
        return value
    if isinstance(value, (dict, list, tuple, complex)) or isinstance(value, GaussianQ):
        g = GaussianQ.model_validate(value)
        return _rational(g.re) + sp.I * _rational(g.im)
    return _rational(to_fraction(value))


def _rational(f: Fraction) -> sp.Rational:
    return sp.Rational(f.numerator, f.denominator)


def to_matrix(value: Any) -> sp.Matrix:
    if isinstance(value, sp.MatrixBase):
        return sp.Matrix(value)
    rows = [[to_sympy(v) for v in row] for row in value]
    return sp.Matrix(rows) if rows else sp.zeros(0, 0)


def is_nilpotent(N: sp.Matrix) -> bool:
    n = N.shape[0]
    return n == 0 or (N ** n).is_zero_matrix


class NilpotentBlockData(BaseModel):
    """Per divisor, one nilpotent block per spectrum entry (aligned with the spectrum order)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    blocks: Dict[str, List[Any]] = Field(default_factory=dict)

    @field_validator("blocks")
    @classmethod
    def check_blocks(cls, blocks: Dict[str, List[Any]]) -> Dict[str, List[Any]]:
        converted = {}
        for i, entries in blocks.items():
            matrices = []
            for n, entry in enumerate(entries):
                N = to_matrix(entry)
                if N.shape[0] != N.shape[1]:
                    raise ValueError(f"blocks.{i}[{n}] must be square, got {N.shape}")
                if not is_nilpotent(N):
                    raise ValueError(f"blocks.{i}[{n}] is not nilpotent")
                matrices.append(N)
            converted[i] = matrices
        return converted

    @field_serializer("blocks")
    def dump_blocks(self, blocks: Dict[str, List[Any]]) -> Dict[str, List[List[List[str]]]]:
        return {
            i: [[[str(sp.nsimplify(N[r, c])) for c in range(N.shape[1])] for r in range(N.shape[0])] for N in entries]
            for i, entries in blocks.items()
        }

    def block(self, i: str, n: int, size: int) -> sp.Matrix:
        """Block of the n-th spectrum entry of D_i; zero when absent"""
        entries = self.blocks.get(i, [])
        if n < len(entries):
            return entries[n]
        return sp.zeros(size, size)


class WeightFiltration(BaseModel):
    """Graded ranks of W and a basis whose first dim(W_k) columns span W_k"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    graded: List[Tuple[int, int]]
    basis: Any

    def levels(self) -> List[int]:
        """Weight of every adapted basis column, ascending"""
        return [k for k, r in self.graded for _ in range(r)]


# Subspaces are matrices whose columns form a basis

def _span(columns: List[sp.Matrix], n: int) -> sp.Matrix:
    if not columns:
        return sp.zeros(n, 0)
    basis = sp.Matrix.hstack(*columns).columnspace()
    return sp.Matrix.hstack(*basis) if basis else sp.zeros(n, 0)


def _kernel(M: sp.Matrix) -> sp.Matrix:
    return _span(M.nullspace(), M.shape[1])


def _image(M: sp.Matrix) -> sp.Matrix:
    return _span(M.columnspace(), M.shape[0])


def _intersect(U: sp.Matrix, V: sp.Matrix) -> sp.Matrix:
    n = U.shape[0]
    if U.shape[1] == 0 or V.shape[1] == 0:
        return sp.zeros(n, 0)
    coefficients = sp.Matrix.hstack(U, -V).nullspace()
    return _span([U * c[:U.shape[1], :] for c in coefficients], n)


def _sum(U: sp.Matrix, V: sp.Matrix) -> sp.Matrix:
    return _span([U[:, c] for c in range(U.shape[1])] + [V[:, c] for c in range(V.shape[1])], U.shape[0])


def weight_filtration(N: Any) -> WeightFiltration:
    """
    Weight filtration of a nilpotent endomorphism, centered at 0.

    W_k = sum over j >= max(0, -k) of ker N^(j+k+1) cap Im N^j.

    Args:
        N: nilpotent square matrix (sympy Matrix or nested lists of exact entries)

    Returns:
        WeightFiltration with the nonzero graded ranks and an adapted basis
    """
    N = to_matrix(N)
    n = N.shape[0]
    if N.shape[0] != N.shape[1]:
        raise KmsError(f"weight filtration needs a square matrix, got {N.shape}")
    if not is_nilpotent(N):
        raise KmsError("weight filtration needs a nilpotent matrix")
    if n == 0:
        return WeightFiltration(graded=[], basis=sp.zeros(0, 0))

    powers = [sp.eye(n)]
    for _ in range(2 * n + 1):
        powers.append(powers[-1] * N)

    def W(k: int) -> sp.Matrix:
        total = sp.zeros(n, 0)
        for j in range(max(0, -k), n + 1):
            if j + k + 1 < 0:
                continue
            piece = _intersect(_kernel(powers[j + k + 1]), _image(powers[j]))
            total = _sum(total, piece)
        return total

    graded = []
    columns: List[sp.Matrix] = []
    rank = 0
    for k in range(-n, n + 1):
        Wk = W(k)
        for c in range(Wk.shape[1]):
            candidate = columns + [Wk[:, c]]
            if sp.Matrix.hstack(*candidate).rank() > len(columns):
                columns.append(Wk[:, c])
        if len(columns) > rank:
            graded.append((k, len(columns) - rank))
            rank = len(columns)
    return WeightFiltration(graded=graded, basis=sp.Matrix.hstack(*columns))


def refine(data: ParabolicFlatData, blocks: Optional[NilpotentBlockData] = None) -> RefinedSpectrum:
    """Split every (a, alpha, r) into weight levels (a, k, r_k), sorted by (a, k)"""
    blocks = blocks or NilpotentBlockData()
    levels = {}
    for i in data.geometry.components:
        merged: Dict[Tuple[Fraction, int], WeightLevel] = {}
        for n, p in enumerate(data.spectrum(i)):
            N = blocks.block(i, n, p.r)
            if N.shape[0] != p.r:
                raise InvalidDataError(
                    f"blocks.{i}[{n}] has size {N.shape[0]}, expected r = {p.r}",
                    [f"Field 'blocks.{i}[{n}]' must have size {p.r}, got {N.shape[0]}"],
                )
            for k, r_k in weight_filtration(N).graded:
                key = (p.a, k)
                if key in merged:
                    level = merged[key]
                    merged[key] = WeightLevel(a=p.a, k=k, r=level.r + r_k, sources=level.sources + [(p.alpha, r_k)])
                else:
                    merged[key] = WeightLevel(a=p.a, k=k, r=r_k, sources=[(p.alpha, r_k)])
        levels[i] = [merged[key] for key in sorted(merged)]
    return RefinedSpectrum(levels=levels)


def _targets_for(levels: List[WeightLevel], targets: Union[Sequence, Mapping]) -> List[Fraction]:
    if isinstance(targets, Mapping):
        return [to_fraction(targets[level.key]) for level in levels]
    if len(targets) != len(levels):
        raise InvalidDataError(f"got {len(targets)} targets for {len(levels)} weight levels")
    return [to_fraction(t) for t in targets]


def perturb_I(refined: RefinedSpectrum, eps: Any, targets: Mapping[str, Union[Sequence, Mapping]],
              truncation: Optional[Mapping[str, Any]] = None) -> PerturbedSpectrum:
    """
    Move every refined weight level (a, k) to a caller-chosen rational target.

    Args:
        refined: output of refine
        eps: perturbation size; each target must lie within rank * eps of its weight
        targets: per divisor, targets aligned with the levels or keyed by (a, k)
        truncation: per-divisor c_i, default 0

    Returns:
        PerturbedSpectrum with one WeightShift per level
    """
    eps = to_fraction(eps)
    truncation = {i: to_fraction(c) for i, c in (truncation or {}).items()}
    errors = []
    new_weights = {}
    for i, levels in refined.levels.items():
        c = truncation.get(i, Fraction(0))
        rank = sum(level.r for level in levels)
        values = _targets_for(levels, targets.get(i, [level.a for level in levels]))
        errors.extend(f"divisor {i}: {e}" for e in check_weights_increasing(
            [(level.key, value) for level, value in zip(levels, values)]
        ))
        for level, value in zip(levels, values):
            if not (c - 1 < value <= c):
                errors.append(f"divisor {i}: target {value} for (a, k) = ({level.a}, {level.k}) must lie in ({c - 1}, {c}]")
            if abs(value - level.a) > rank * eps:
                errors.append(f"divisor {i}: target {value} moves a = {level.a} by more than rank * eps = {rank * eps}")
        new_weights[i] = [WeightShift(a=level.a, k=level.k, new=value) for level, value in zip(levels, values)]
    if errors:
        raise InvalidDataError(f"perturbation targets rejected: {errors[0]}", errors)
    return PerturbedSpectrum(eps=eps, new_weights=new_weights)


def gap(refined: RefinedSpectrum, truncation: Optional[Mapping[str, Any]] = None) -> Fraction:
    """
    Smallest of: half the distance between distinct weights, the distance of each weight
    to c_i - 1, and the distance to c_i of weights below c_i.
    """
    truncation = {i: to_fraction(c) for i, c in (truncation or {}).items()}
    best: Optional[Fraction] = None
    for i, levels in refined.levels.items():
        c = truncation.get(i, Fraction(0))
        weights = sorted({level.a for level in levels})
        candidates = [(b - a) / 2 for a, b in zip(weights, weights[1:])]
        candidates += [a - (c - 1) for a in weights]
        candidates += [c - a for a in weights if a < c]
        for value in candidates:
            best = value if best is None else min(best, value)
    return best if best is not None else Fraction(1)


def _max_rank(refined: RefinedSpectrum) -> int:
    return max((sum(level.r for level in levels) for levels in refined.levels.values()), default=0)


def min_admissible_m(refined: RefinedSpectrum, truncation: Optional[Mapping[str, Any]] = None) -> int:
    """Smallest m with rank/m < gap"""
    g = gap(refined, {i: to_fraction(c) for i, c in (truncation or {}).items()})
    return max(1, math.floor(_max_rank(refined) / g) + 1)


def round_half_away(x: Fraction) -> int:
    n = math.floor(abs(x) + Fraction(1, 2))
    return n if x >= 0 else -n


def perturb_II(refined: RefinedSpectrum, m: int, truncation: Optional[Mapping[str, Any]] = None) -> PerturbPlan:
    """
    Lattice perturbation with eps = 1/m: a' = round(a m)/m, L = sum (a' - a) rank(Gr_a) / rank,
    phi(a, k) = a' - L + k/m. The weighted sum of weights, hence par-c1, is unchanged.
    """
    if m < 1:
        raise InvalidDataError(f"m must be positive, got {m}")
    truncation = {i: to_fraction(c) for i, c in (truncation or {}).items()}
    rank = _max_rank(refined)
    g = gap(refined, truncation)
    if not Fraction(rank, m) < g:
        smallest = min_admissible_m(refined, truncation)
        raise InvalidDataError(
            f"m = {m} too small: rank/m = {Fraction(rank, m)} must be below gap {g}",
            [f"Field 'm' = {m} violates rank/m < gap = {g}; the smallest admissible m is {smallest}"],
        )

    gamma, L, a_prime, new_weights = {}, {}, {}, {}
    for i, levels in refined.levels.items():
        c = truncation.get(i, Fraction(0))
        rank_i = sum(level.r for level in levels)
        by_weight: Dict[Fraction, int] = {}
        for level in levels:
            by_weight[level.a] = by_weight.get(level.a, 0) + level.r
        rounded = {a: Fraction(round_half_away(a * m), m) for a in by_weight}
        shift = sum(((rounded[a] - a) * r for a, r in by_weight.items()), Fraction(0)) / rank_i if rank_i else Fraction(0)
        new_weights[i] = [
            WeightShift(a=level.a, k=level.k, new=rounded[level.a] - shift + Fraction(level.k, m))
            for level in levels
        ]
        offset = -shift - c
        gamma[i] = offset - Fraction(math.ceil(offset * m), m)
        L[i] = shift
        a_prime[i] = {format_rational(a): value for a, value in rounded.items()}
        logger.debug(f"divisor {i}: L = {shift}, gamma = {gamma[i]}")
    return PerturbPlan(eps=Fraction(1, m), m=m, gamma=gamma, L=L, a_prime=a_prime, new_weights=new_weights)


def _level_pools(data: ParabolicFlatData, blocks: NilpotentBlockData, i: str) -> Dict[Any, List[List[int]]]:
    """Per KMS value u of D_i: mutable [k, remaining rank] pieces in refined order"""
    pools: Dict[Any, List[List[int]]] = {}
    for n, p in enumerate(data.spectrum(i)):
        for k, r_k in weight_filtration(blocks.block(i, n, p.r)).graded:
            pools.setdefault(p.u, []).append([k, r_k])
    return pools


def _take(pool: List[List[int]], r: int) -> List[Tuple[int, int]]:
    """North-west-corner allocation of r units from a pool"""
    pieces = []
    for slot in pool:
        if r == 0:
            break
        used = min(slot[1], r)
        if used:
            pieces.append((slot[0], used))
            slot[1] -= used
            r -= used
    if r:
        raise InvalidDataError("point table ranks exceed the divisor graded ranks")
    return pieces


def perturb_data(data: ParabolicFlatData, blocks: Optional[NilpotentBlockData],
                 perturbed: PerturbedSpectrum) -> ParabolicFlatData:
    """
    Perturbed ParabolicFlatData: every spectrum entry splits by weight level with weight
    phi(a, k) and unchanged residue; point entries split on the i-side levels, then on the j-side.
    """
    blocks = blocks or NilpotentBlockData()
    divisor_spectra = {}
    for i in data.geometry.components:
        entries = []
        for n, p in enumerate(data.spectrum(i)):
            for k, r_k in weight_filtration(blocks.block(i, n, p.r)).graded:
                entries.append(KmsPoint.model_construct(a=perturbed.phi(i, p.a, k), alpha=p.alpha, r=r_k))
        divisor_spectra[i] = entries

    point_spectra = {}
    for point in data.geometry.points:
        pool_i = _level_pools(data, blocks, point.i)
        pool_j = _level_pools(data, blocks, point.j)
        entries = []
        for e in data.point_spectra.get(point.label, []):
            for k_i, r_i in _take(pool_i.get(e.u_i, []), e.r):
                for k_j, r_j in _take(pool_j.get(e.u_j, []), r_i):
                    entries.append(PointKmsEntry.model_construct(
                        u_i=KmsLabel.model_construct(a=perturbed.phi(point.i, e.u_i.a, k_i), alpha=e.u_i.alpha),
                        u_j=KmsLabel.model_construct(a=perturbed.phi(point.j, e.u_j.a, k_j), alpha=e.u_j.alpha),
                        r=r_j,
                    ))
        point_spectra[point.label] = entries

    return data.model_copy(update={"divisor_spectra": divisor_spectra, "point_spectra": point_spectra})


def perturbed_blocks(data: ParabolicFlatData, blocks: Optional[NilpotentBlockData] = None) -> NilpotentBlockData:
    """
    Nilpotent parts induced on the weight-graded pieces Gr^W_k, aligned with the spectrum
    order produced by perturb_data.
    """
    blocks = blocks or NilpotentBlockData()
    result = {}
    for i in data.geometry.components:
        graded_blocks = []
        for n, p in enumerate(data.spectrum(i)):
            N = blocks.block(i, n, p.r)
            wf = weight_filtration(N)
            if not wf.graded:
                continue
            adapted = wf.basis.inv() * N * wf.basis
            start = 0
            for _, r_k in wf.graded:
                graded_blocks.append(adapted[start:start + r_k, start:start + r_k])
                start += r_k
        result[i] = graded_blocks
    return NilpotentBlockData(blocks=result)


def graded_semisimple_check(blocks: NilpotentBlockData) -> bool:
    """True iff every nilpotent block vanishes"""
    return all(N.is_zero_matrix for entries in blocks.blocks.values() for N in entries)


def ch2_shift_bound(data: ParabolicFlatData, m: int) -> Fraction:
    """
    Upper bound on m * |delta par-ch2| for the lattice perturbation at m.

    Every perturbed weight a' - L + k/m lies within rank/m of a, since |a' - a| and |L| are
    at most 1/(2m) and |k| < rank. The bound follows by expanding the quadratic par-ch2.
    """
    step = Fraction(data.rank, m)
    geometry = data.geometry
    total = Fraction(0)
    for i in geometry.components:
        selfint = abs(geometry.selfint.get(i, Fraction(0)))
        total += selfint * sum((p.r * (2 * abs(effective_weight(p, data)) + step) for p in data.spectrum(i)),
                               Fraction(0))
    for point in geometry.points:
        for e in data.point_spectra.get(point.label, []):
            b_i, b_j = effective_weight(e.u_i, data), effective_weight(e.u_j, data)
            total += 2 * abs(point.mult) * e.r * (abs(b_i) + abs(b_j) + step)
    return data.rank * total / 2


def ch2_convergence(data: ParabolicFlatData, blocks: Optional[NilpotentBlockData],
                    ms: Sequence[int]) -> Dict[str, Any]:
    """
    par-ch2 of the scheme (II) perturbation against the original for each m.

    Returns:
        Dictionary with the per-m table, the fitted K = max m * |delta|, whether |delta|
        decreases along increasing m and whether m * |delta| stays under ch2_shift_bound
    """
    refined = refine(data, blocks)
    original_c1 = par_c1_flat(data)
    original = par_ch2_flat(data)
    rows = []
    for m in sorted(ms):
        plan = perturb_II(refined, m, data.truncation)
        perturbed = perturb_data(data, blocks, plan)
        if par_c1_flat(perturbed) != original_c1:
            raise InvalidDataError(f"par-c1 changed under perturbation at m = {m}")
        ch2 = par_ch2_flat(perturbed)
        delta = abs(ch2 - original)
        rows.append({"m": m, "par_ch2": ch2, "delta": delta, "m_delta": m * delta,
                     "bound": ch2_shift_bound(data, m)})
    table = pd.DataFrame(rows)
    deltas = [row["delta"] for row in rows]
    K = max((row["m_delta"] for row in rows), default=Fraction(0))
    return {
        "table": table,
        "K": K,
        "decreasing": all(b <= a for a, b in zip(deltas, deltas[1:])),
        "within_bound": all(row["m_delta"] <= row["bound"] for row in rows),
        "original_par_ch2": original,
    }
