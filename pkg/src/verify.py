"""
Property suites behind the `verify` command.

Each suite draws seeded random inputs (or builds a fixed numerical fixture), checks one
family of properties and returns a SuiteResult with counts. Suites 1-5, 8 and 10 run by
default; suites 6, 7, 9 and 11 run at grid scale with `full`.
"""

import logging
import time
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .charnum import (
    par_c1_flat,
    par_c1_ls,
    par_ch2_cross_check,
    par_ch2_flat,
    par_ch2_ls,
    vanishing_check,
)
from .corrfun import MonodromyDatum, kms_table_transport, phi_inverse_kms, phi_local
from .generators import GeneratorFactory, TableKind, random_lambda, random_traceless
from .modelflow import (
    FlowConfig,
    NILPOTENT,
    boundary_integral,
    donaldson,
    donaldson_lower_bound,
    donaldson_report,
    flow_checks,
    heat_flow,
    inequality_scan,
    model_weight,
    perturbation_field,
    perturbed_model,
    rank2_model,
    radial_bump,
    uniform_bound_margin,
    uniform_bound_scan,
)
from .models import KmsError
from .perturb import ch2_convergence, graded_semisimple_check, perturb_II, perturbed_blocks, refine
from .speccalc import GridMetricField, LogPolarGrid, h_norm, hermitian_part, lambda_trace, pseudo_curvature, sqrt_pair

logger = logging.getLogger(__name__)

MAX_MESSAGES = 5
DEFAULT_SUITES = [1, 2, 3, 4, 5, 8, 10]
FULL_SUITES = [6, 7, 9, 11]


class SuiteResult(BaseModel):
    """Outcome of one property suite"""
    suite: int
    name: str
    passed: bool
    checked: int
    failures: int
    details: Dict[str, Any] = Field(default_factory=dict)
    messages: List[str] = Field(default_factory=list)
    error: Optional[str] = None


class VerifyReport(BaseModel):
    seed: int
    full: bool
    suites: List[SuiteResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    @property
    def aborted(self) -> bool:
        """True when a suite stopped on a NumericalAbort"""
        return any(s.error == "NumericalAbort" for s in self.suites)


class _Tally:
    """Failure counter that keeps the first few messages"""

    def __init__(self):
        self.checked = 0
        self.failures = 0
        self.messages: List[str] = []

    def record(self, ok: bool, message: str = "") -> None:
        self.checked += 1
        if not ok:
            self.failures += 1
            if len(self.messages) < MAX_MESSAGES:
                self.messages.append(message)

    def result(self, suite: int, name: str, details: Optional[Dict[str, Any]] = None,
               extra_ok: bool = True) -> SuiteResult:
        return SuiteResult(
            suite=suite,
            name=name,
            passed=self.failures == 0 and extra_ok,
            checked=self.checked,
            failures=self.failures,
            details=details or {},
            messages=self.messages,
        )


def kms_correspondence_suite(seed: int, count: int = 1000) -> SuiteResult:
    """Z-shift invariance of the inverse KMS map and the local round trip through phi_local"""
    rng = np.random.default_rng(seed)
    tally = _Tally()
    for u in GeneratorFactory.draw(TableKind.KMS_PAIR, count, seed):
        b, omega = phi_inverse_kms(u.a, u.alpha)
        n = int(rng.integers(-5, 6))
        b_shift, omega_shift = phi_inverse_kms(u.a + n, u.alpha.shifted(n))
        scale = max(1.0, abs(omega))
        tally.record(b_shift == b and abs(omega_shift - omega) < 1e-12 * scale,
                     f"shift n={n} of (a={u.a}, alpha={u.alpha}) moved (b, omega)")

        local = phi_local(MonodromyDatum(M=[[omega]], weights=[b]))
        b_back, omega_back = phi_inverse_kms(local.weights[0], local.residues[0])
        tally.record(b_back == b and abs(omega_back - omega) < 1e-12 * scale,
                     f"round trip of (b={b}, omega={omega:.6g}) gave (b={b_back}, omega={omega_back:.6g})")
    return tally.result(1, "kms_correspondence")


def transport_suite(seed: int, count: int = 1000) -> SuiteResult:
    """par-c1 and par-ch2 agree exactly across kms_table_transport"""
    rng = np.random.default_rng(seed + 1)
    tally = _Tally()
    for ls in GeneratorFactory.draw(TableKind.LOCAL_SYSTEM, count, seed):
        lam = random_lambda(rng)
        truncation = {i: Fraction(int(rng.integers(-1, 2))) for i in ls.geometry.components}
        flat = kms_table_transport(ls, lam, truncation)
        tally.record(
            par_c1_flat(flat) == par_c1_ls(ls) and par_ch2_flat(flat) == par_ch2_ls(ls),
            f"characteristic numbers changed under transport with lambda={lam}",
        )
    return tally.result(2, "transport_preserves_numbers")


def deligne_vanishing_suite(seed: int, count: int = 200) -> SuiteResult:
    tally = _Tally()
    for data in GeneratorFactory.draw(TableKind.DELIGNE, count, seed):
        try:
            report = vanishing_check(data)
            tally.record(report.is_deligne_type and report.par_deg == 0 and report.par_ch2 == 0,
                         f"par_deg={report.par_deg}, par_ch2={report.par_ch2}")
        except KmsError as e:
            tally.record(False, str(e))
    return tally.result(3, "deligne_vanishing")


def cross_formula_suite(seed: int, count: int = 100) -> SuiteResult:
    tally = _Tally()
    multi_point = 0
    for data in GeneratorFactory.draw(TableKind.FLAT, count, seed):
        if len(data.geometry.points) > 1:
            multi_point += 1
        try:
            check = par_ch2_cross_check(data)
            tally.record(check.via_graded == check.direct)
        except KmsError as e:
            tally.record(False, str(e))
    return tally.result(4, "par_ch2_cross_formula", {"multi_point_instances": multi_point})


def lattice_perturbation_suite(seed: int, count: int = 100, ms: Optional[List[int]] = None) -> SuiteResult:
    """
    Lattice perturbation: par-c1 kept, weights on the lattice, |delta par-ch2| decreasing in m
    and m * |delta| under the a priori bound of ch2_shift_bound
    """
    ms = sorted(ms or [10, 100, 1000])
    tally = _Tally()
    K_max = Fraction(0)
    split = 0
    for data, blocks in GeneratorFactory.draw(TableKind.NILPOTENT, count, seed):
        split += any(len({p.a for p in s}) > 1 for s in data.divisor_spectra.values())
        try:
            refined = refine(data, blocks)
            on_lattice = True
            for m in ms:
                plan = perturb_II(refined, m, data.truncation)
                for i, shifts in plan.new_weights.items():
                    offset = data.c(i) + plan.gamma[i]
                    on_lattice &= all(((s.new - offset) * m).denominator == 1 for s in shifts)
            convergence = ch2_convergence(data, blocks, ms)
            K_max = max(K_max, convergence["K"])
            semisimple = graded_semisimple_check(perturbed_blocks(data, blocks))
            tally.record(on_lattice and convergence["decreasing"] and convergence["within_bound"] and semisimple,
                         f"lattice={on_lattice}, decreasing={convergence['decreasing']}, "
                         f"within_bound={convergence['within_bound']}, semisimple={semisimple}")
        except KmsError as e:
            tally.record(False, str(e))
    return tally.result(5, "lattice_perturbation", {"ms": ms, "K": K_max, "split_weight_instances": split})


def harmonic_fixed_point_suite(grid: Optional[LogPolarGrid] = None, r0: float = 0.1, r1: float = 0.5) -> SuiteResult:
    """
    sup |G| of the eps = 0 model on a grid and its nested refinement, over r0 <= |z| <= r1.

    |G| is the h-norm of the dw ^ dw-bar coefficient of the pseudo-curvature, w = log z, the
    scale in which the log-polar stencils are uniform. The refinement ratio must lie in [2.5, 6]
    and the fine value below 1e-2; the sup of |Lambda G| = |G| / (|z|^2 w) is reported alongside.
    """
    grid = grid or LogPolarGrid(n_rad=64, n_ang=64)
    fine = grid.refined()
    conn, sampler = rank2_model(1.0, 0.0)
    mask = grid.interior() & grid.rows_within(r0, r1)

    def densities(g: LogPolarGrid) -> Tuple[np.ndarray, np.ndarray]:
        Hf = sampler(g)
        weight = model_weight(g, 0.0)
        form = pseudo_curvature(Hf, conn)
        return h_norm(form.coeff, Hf.K), h_norm(lambda_trace(form, weight), Hf.K)

    coarse_g, coarse_lambda = densities(grid)
    fine_g, fine_lambda = (d[::2, ::2] for d in densities(fine))
    coarse_sup = float(np.max(coarse_g[mask]))
    fine_sup = float(np.max(fine_g[mask]))
    ratio = coarse_sup / fine_sup if fine_sup > 0 else float("inf")
    tally = _Tally()
    tally.record(2.5 <= ratio <= 6.0, f"refinement ratio {ratio:.4g} outside [2.5, 6]")
    tally.record(fine_sup < 1e-2, f"sup |G| = {fine_sup:.4g} on the fine grid")
    return tally.result(6, "harmonic_fixed_point", {
        "coarse_sup": coarse_sup,
        "fine_sup": fine_sup,
        "ratio": ratio,
        "coarse_sup_lambda": float(np.max(coarse_lambda[mask])),
        "fine_sup_lambda": float(np.max(fine_lambda[mask])),
    })


def uniform_bound_suite(grid: Optional[LogPolarGrid] = None,
                        eps_list: Optional[List[float]] = None) -> SuiteResult:
    grid = grid or LogPolarGrid(n_rad=256, n_ang=256)
    eps_list = eps_list or [0.5, 0.25, 0.1, 0.05, 0.01]
    table = uniform_bound_scan(eps_list, grid)
    margin = uniform_bound_margin(table, 0.5)
    tally = _Tally()
    tally.record(margin <= 1.5, f"max sup is {margin:.4g} times the value at eps = 0.5")
    return tally.result(7, "uniform_bound", {"margin": margin, "sup": dict(zip(table["eps"], table["sup"]))})


def scalar_inequality_suite(seed: int, count: int = 100000) -> SuiteResult:
    report = inequality_scan(count, seed)
    tally = _Tally()
    for name, violations in report.violations.items():
        tally.record(violations == 0, f"{name}: {violations} violation(s)")
    return tally.result(8, "scalar_inequalities", {"samples": count, "max_ratio": report.max_ratio})


def heat_flow_suite(seed: int, grid: Optional[LogPolarGrid] = None, steps: int = 500,
                    dt: float = 1e-3) -> SuiteResult:
    grid = grid or LogPolarGrid(n_rad=64, n_ang=64)
    config = FlowConfig(grid=grid, steps=steps, dt=dt, seed=seed)
    conn, initial = perturbed_model(grid, config.lam, config.eps, config.amplitude, seed)
    state = heat_flow(config, initial, conn)
    checks = flow_checks(state)
    tally = _Tally()
    tally.record(checks["det_pinned"], f"det residual {checks['max_det_residual']:.3g}")
    tally.record(checks["boundary_pinned"], "Dirichlet rows moved during the flow")
    tally.record(checks["donaldson_monotone"], f"Donaldson increment {checks['max_donaldson_increment']:.3g}")
    tally.record(checks["decay_ratio"] <= 0.5, f"L2 decay ratio {checks['decay_ratio']:.3g}")
    return tally.result(9, "heat_flow", checks)


def _exp_metric(base: GridMetricField, U: np.ndarray) -> GridMetricField:
    """base * exp(U) with U trace-free Hermitian in a base-orthonormal frame"""
    R, _ = sqrt_pair(base.K)
    mu, V = np.linalg.eigh(hermitian_part(U))
    E = (V * np.exp(mu)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))
    return GridMetricField.from_K(base.grid, hermitian_part(R @ E @ R))


def donaldson_suite(seed: int, count: int = 50, grid: Optional[LogPolarGrid] = None,
                    path_tol: float = 1e-3) -> SuiteResult:
    """
    M(h, h) = 0, agreement of the direct and the two-leg path, and the lower bound.
    The default grid resolves 0.1 <= |z| <= 0.5 at 64x64, the annulus of the harmonic fixed point suite.
    """
    grid = grid or LogPolarGrid(r_min=0.1, r_max=0.5, n_rad=64, n_ang=64)
    rng = np.random.default_rng(seed)
    conn, base = perturbed_model(grid, 1.0, 0.0, 0.2, seed)
    weight = model_weight(grid, 0.0)
    tally = _Tally()

    tally.record(donaldson(base, base, conn, weight) == 0.0, "M(h, h) is not zero")

    U = perturbation_field(grid, 2, 0.3, seed + 1)
    V = perturbation_field(grid, 2, 0.1, seed + 2)
    end = _exp_metric(base, U)
    middle = _exp_metric(base, 0.5 * U + V)
    direct_report = donaldson_report(base, end, conn, weight)
    direct = direct_report.value
    two_leg = donaldson(base, middle, conn, weight) + donaldson(middle, end, conn, weight)
    path_error = abs(direct - two_leg) / max(abs(direct), 1e-12)
    tally.record(path_error < path_tol, f"path dependence {path_error:.3g}")

    bump = radial_bump(grid)[:, None, None, None]
    bound_failures = 0
    for _ in range(count):
        s = bump * random_traceless(rng, 2, 1.0)
        other = _exp_metric(base, np.broadcast_to(s, grid.shape + (2, 2)))
        value = donaldson(base, other, conn, weight)
        bound = donaldson_lower_bound(base, other, conn, weight)
        ok = value >= bound - 1e-9 * max(1.0, abs(bound))
        bound_failures += not ok
        tally.record(ok, f"M = {value:.6g} below lower bound {bound:.6g}")
    return tally.result(10, "donaldson_functional", {
        "direct": direct,
        "two_leg": two_leg,
        "path_error": path_error,
        "psi_energy": direct_report.psi_energy,
        "bound_failures": bound_failures,
    })


def boundary_integral_suite(grid: Optional[LogPolarGrid] = None) -> SuiteResult:
    grid = grid or LogPolarGrid(n_rad=256, n_ang=256)
    rank1 = boundary_integral(1.0, [0.5], [[0.0]], grid)
    nilpotent = boundary_integral(1.0, [0.0, 0.0], NILPOTENT, grid)
    tally = _Tally()
    tally.record(abs(rank1.rhs - 0.25) < 1e-12, f"rank-1 rhs {rank1.rhs}")
    tally.record(rank1.relative_error < 0.02, f"rank-1 relative error {rank1.relative_error:.3g}")
    scale = 0.02 * rank1.scale
    tally.record(abs(nilpotent.lhs) < scale and abs(nilpotent.rhs) < scale,
                 f"nilpotent sides {nilpotent.lhs:.3g}, {nilpotent.rhs:.3g}")
    return tally.result(11, "boundary_integral", {
        "rank1_lhs": rank1.lhs,
        "rank1_rhs": rank1.rhs,
        "rank1_area_lhs": rank1.area_lhs,
        "nilpotent_lhs": nilpotent.lhs,
        "nilpotent_rhs": nilpotent.rhs,
    })


SUITES: Dict[int, Callable[..., SuiteResult]] = {
    1: lambda seed, samples: kms_correspondence_suite(seed),
    2: lambda seed, samples: transport_suite(seed),
    3: lambda seed, samples: deligne_vanishing_suite(seed),
    4: lambda seed, samples: cross_formula_suite(seed),
    5: lambda seed, samples: lattice_perturbation_suite(seed),
    6: lambda seed, samples: harmonic_fixed_point_suite(),
    7: lambda seed, samples: uniform_bound_suite(),
    8: lambda seed, samples: scalar_inequality_suite(seed, samples),
    9: lambda seed, samples: heat_flow_suite(seed),
    10: lambda seed, samples: donaldson_suite(seed),
    11: lambda seed, samples: boundary_integral_suite(),
}


SUITE_NAMES = {
    1: "kms_correspondence",
    2: "transport_preserves_numbers",
    3: "deligne_vanishing",
    4: "par_ch2_cross_formula",
    5: "lattice_perturbation",
    6: "harmonic_fixed_point",
    7: "uniform_bound",
    8: "scalar_inequalities",
    9: "heat_flow",
    10: "donaldson_functional",
    11: "boundary_integral",
}


def _aborted(number: int, error: KmsError) -> SuiteResult:
    return SuiteResult(
        suite=number,
        name=SUITE_NAMES[number],
        passed=False,
        checked=0,
        failures=1,
        error=type(error).__name__,
        messages=[str(error)],
    )


def run_suites(seed: int = 0, full: bool = False, samples: int = 100000,
               only: Optional[List[int]] = None) -> VerifyReport:
    """
    Run the property suites. A suite that raises a KmsError is recorded as failed with the
    error and the remaining suites still run.

    Args:
        seed: base seed for every randomized suite
        full: add the grid-scale numerical suites
        samples: sample count of the scalar inequality scan
        only: explicit suite numbers, overriding `full`

    Returns:
        VerifyReport; `passed` is True when every suite passed
    """
    numbers = only or (DEFAULT_SUITES + FULL_SUITES if full else DEFAULT_SUITES)
    unknown = sorted(set(numbers) - set(SUITES))
    if unknown:
        raise KmsError(f"unknown verify suite {unknown[0]}")
    report = VerifyReport(seed=seed, full=full)
    for number in sorted(numbers):
        start = time.perf_counter()
        try:
            result = SUITES[number](seed, samples)
        except KmsError as e:
            logger.error(f"Suite {number} ({SUITE_NAMES[number]}) aborted: {type(e).__name__}: {e}")
            result = _aborted(number, e)
        elapsed = time.perf_counter() - start
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"Suite {number} ({result.name}): {'pass' if result.passed else 'FAIL'}, "
                          f"{result.checked - result.failures}/{result.checked} checks in {elapsed:.2f}s")
        report.suites.append(result)
    return report
