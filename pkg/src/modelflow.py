"""
Explicit rank-2 model family, its scans, the Donaldson functional and the heat flow on annulus grids.

Model scalars are written in terms of u = -log|z| > 0 and x = eps * u:
    L = (|z|^-eps - |z|^eps) / eps = 2 sinh(x) / eps
    K = (|z|^-eps + |z|^eps) / 2  = cosh(x)
    M = |z|^(4 eps) (1 - log |z|^(4 eps)) = exp(-4x) (1 + 4x)
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from math import comb
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .env_config import EnvConfig, parse_grid
from .generators import random_traceless
from .models import FlowConfigError, KmsError, NumericalAbort
from .speccalc import (
    MAX_RANK,
    ConnectionModel,
    GridMetricField,
    LogPolarGrid,
    _eigen,
    adjoint,
    d_wbar,
    dbar_theta,
    h_norm,
    hermitian_part,
    induced_ops,
    lambda_connection_end,
    lambda_G,
    psi_donaldson,
    scalar_calculus,
    sqrt_pair,
    trace,
    trace_free,
)

logger = logging.getLogger(__name__)

SERIES_CUTOFF = 1e-4
MIN_RESOLVED_RADIAL = 256
GUARD = 0.1

MetricSampler = Callable[[LogPolarGrid], GridMetricField]


class ModelScalars(BaseModel):
    """L, K, M at one sample (z, eps)"""
    L: float
    K: float
    M: float


def _sinhc(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) < SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x * x / 6.0, np.sinh(safe) / safe)


def _one_minus_m(x: np.ndarray) -> np.ndarray:
    y = 4.0 * x
    small = np.abs(y) < 1e-3
    series = y * y / 2.0 - y ** 3 / 3.0 + y ** 4 / 8.0
    return np.where(small, series, -np.expm1(-y) - y * np.exp(-y))


def _model_arrays(u: np.ndarray, eps: float) -> Dict[str, np.ndarray]:
    """L, K - 1 and 1 - M for u = -log|z|, evaluated without cancellation"""
    u = np.asarray(u, dtype=float)
    x = eps * u
    return {
        "L": 2.0 * u * _sinhc(x),
        "K_minus_1": 2.0 * np.sinh(x / 2.0) ** 2,
        "one_minus_M": _one_minus_m(x),
    }


def model_scalars(z: complex, eps: float) -> ModelScalars:
    """
    Evaluate the model scalars at z in the punctured unit disc.

    The eps = 0 branch is L = -log|z|^2, K = 1, M = 1; for small eps * |log|z|| the
    series branches keep the values continuous in (z, eps).
    """
    r = abs(z)
    if not (0 < r < 1):
        raise KmsError(f"model scalars need 0 < |z| < 1, got |z| = {r}")
    if eps < 0:
        raise KmsError(f"eps must be non-negative, got {eps}")
    values = _model_arrays(np.array(-np.log(r)), eps)
    return ModelScalars(
        L=float(values["L"]),
        K=float(1.0 + values["K_minus_1"]),
        M=float(1.0 - values["one_minus_M"]),
    )


def model_weight(grid: LogPolarGrid, eps: float) -> np.ndarray:
    """Kahler weight w_eps(z) = eps^2 |z|^(eps - 2) + 1"""
    return eps ** 2 * grid.abs_z ** (eps - 2.0) + 1.0


NILPOTENT = np.array([[0, 0], [1, 0]], dtype=complex)


def _rank2_metric(grid: LogPolarGrid, lam: complex, eps: float) -> np.ndarray:
    if grid.r_max >= 1:
        raise KmsError(f"model metric needs r_max < 1, got {grid.r_max}")
    values = _model_arrays(-np.log(grid.abs_z), eps)
    L = values["L"]
    M = 1.0 - values["one_minus_M"]
    H = np.empty(grid.shape + (2, 2), dtype=complex)
    H[..., 0, 0] = L
    H[..., 1, 1] = (1 + abs(lam) ** 2) / L
    H[..., 0, 1] = -np.conj(lam) * M
    H[..., 1, 0] = -lam * M
    return H


def _rank2_family(lam: complex, eps: float) -> Tuple[ConnectionModel, MetricSampler]:
    conn = ConnectionModel(lam=lam, residue=NILPOTENT)

    def sampler(grid: LogPolarGrid) -> GridMetricField:
        return GridMetricField(grid=grid, H=_rank2_metric(grid, conn.lam, eps))

    return conn, sampler


def rank2_model(lam: complex, eps: float) -> Tuple[ConnectionModel, MetricSampler]:
    """
    The rank-2 model: connection N dz/z in the u-frame, N = [[0, 0], [1, 0]], with metric
    H11 = L_eps, H22 = (1 + |lambda|^2) / L_eps, H12 = -conj(lambda) M_eps, H21 = -lambda M_eps.

    Returns:
        (ConnectionModel, sampler) where sampler(grid) builds the GridMetricField
    """
    if not (0 <= eps < 0.5):
        raise KmsError(f"eps must lie in [0, 1/2), got {eps}")
    return _rank2_family(lam, eps)


def _sym_matrix(G: np.ndarray, n: int) -> np.ndarray:
    """Sym^n of a stack of 2x2 matrices in the orthonormalized monomial basis"""
    g11, g12, g21, g22 = G[..., 0, 0], G[..., 0, 1], G[..., 1, 0], G[..., 1, 1]
    S = np.zeros(G.shape[:-2] + (n + 1, n + 1), dtype=complex)
    for k in range(n + 1):
        for l in range(n + 1):
            total = np.zeros(G.shape[:-2], dtype=complex)
            for i in range(max(0, l - k), min(n - k, l) + 1):
                j = l - i
                total = total + (comb(n - k, i) * g11 ** (n - k - i) * g21 ** i
                                 * comb(k, j) * g12 ** (k - j) * g22 ** j)
            S[..., l, k] = total * np.sqrt(comb(n, k) / comb(n, l))
    return S


def _sym_derivation(X: np.ndarray, n: int) -> np.ndarray:
    """Induced action of a 2x2 endomorphism on Sym^n, same basis as _sym_matrix"""
    D = np.zeros((n + 1, n + 1), dtype=complex)
    for k in range(n + 1):
        D[k, k] = (n - k) * X[0, 0] + k * X[1, 1]
        if k < n:
            D[k + 1, k] = (n - k) * X[1, 0] * np.sqrt(comb(n, k) / comb(n, k + 1))
        if k > 0:
            D[k - 1, k] = k * X[0, 1] * np.sqrt(comb(n, k) / comb(n, k - 1))
    return D


def _sym_family(l: int, lam: complex, eps: float) -> Tuple[ConnectionModel, MetricSampler]:
    n = l - 1
    base, _ = _rank2_family(lam, eps)
    conn = ConnectionModel(lam=base.lam, residue=_sym_derivation(NILPOTENT, n))

    def sampler(grid: LogPolarGrid) -> GridMetricField:
        return GridMetricField(grid=grid, H=_sym_matrix(_rank2_metric(grid, base.lam, eps), n))

    return conn, sampler


def sym_power_model(l: int, lam: complex, eps: float) -> Tuple[ConnectionModel, MetricSampler]:
    """Sym^(l-1) of the rank-2 model: rank-l connection and induced metric"""
    if not (2 <= l <= MAX_RANK):
        raise KmsError(f"symmetric power rank must lie in [2, {MAX_RANK}], got {l}")
    if not (0 <= eps < 0.5):
        raise KmsError(f"eps must lie in [0, 1/2), got {eps}")
    return _sym_family(l, lam, eps)


def model_family(rank: int, lam: complex, eps: float) -> Tuple[ConnectionModel, MetricSampler]:
    if rank == 2:
        return rank2_model(lam, eps)
    return sym_power_model(rank, lam, eps)


# scalar inequalities

class InequalityReport(BaseModel):
    samples: int
    seed: int
    violations: Dict[str, int]
    witnesses: List[Dict[str, float]] = Field(default_factory=list)
    max_ratio: Dict[str, float] = Field(default_factory=dict)

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


POWER_CASES = [(b, d) for b in (1, 4) for d in (1, 2, 3)]
RELATIVE_SLACK = 1e-12


def power_bound(b: int, d: int) -> float:
    """sup over x > 0 of exp(-b x) (2x)^d, attained at x = d / b"""
    return (2.0 * d / (b * np.e)) ** d


def inequality_scan(samples: int, seed: int = 0, small_eps_fraction: float = 0.05,
                    max_witnesses: int = 10) -> InequalityReport:
    """
    Check the model-scalar inequalities on random (z, eps).

    log|z| is uniform on [-12, -0.01] and eps on (0, 1/2); a fraction of the samples uses
    eps in [1e-9, 1e-5] to exercise the series branches. With x = eps * u the checks are
        L_0 <= L_eps,
        K_eps - 1 <= (1/2) L_eps^2 eps^2 |z|^eps   = 2 sinh(x)^2 exp(-x),
        0 <= 1 - M_eps <= 3 L_eps^2 eps^2 |z|^eps  = 12 sinh(x)^2 exp(-x),
        |z|^(b eps) (eps L_0)^d <= sup_x exp(-b x) (2x)^d   for b in {1, 4}, d in {1, 2, 3}.

    Args:
        samples: number of random samples (>= 1)
        seed: seed for numpy's default_rng

    Returns:
        InequalityReport with violation counts, witnesses and the largest ratio per check
    """
    if samples < 1:
        raise KmsError(f"samples must be at least 1, got {samples}")
    rng = np.random.default_rng(seed)
    log_r = rng.uniform(-12.0, -0.01, samples)
    eps = rng.uniform(0.0, 0.5, samples)
    eps = np.where(eps == 0.0, 0.25, eps)
    n_small = int(samples * small_eps_fraction)
    if n_small:
        eps[:n_small] = 10.0 ** rng.uniform(-9.0, -5.0, n_small)
    u = -log_r
    x = eps * u
    L0 = 2.0 * u
    values = _model_arrays(u, eps)
    bound = np.sinh(x) ** 2 * np.exp(-x)
    tiny = np.finfo(float).tiny

    checks: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
        "L0_le_L": (L0, values["L"]),
        "K_minus_1": (values["K_minus_1"], 2.0 * bound),
        "one_minus_M": (values["one_minus_M"], 12.0 * bound),
    }
    for b, d in POWER_CASES:
        checks[f"power_b{b}_d{d}"] = (np.exp(-b * x) * (2.0 * x) ** d, np.full_like(x, power_bound(b, d)))

    violations: Dict[str, int] = {}
    max_ratio: Dict[str, float] = {}
    witnesses: List[Dict[str, float]] = []
    for name, (lhs, rhs) in checks.items():
        bad = lhs > rhs * (1.0 + RELATIVE_SLACK)
        if name == "one_minus_M":
            bad |= lhs < 0
        violations[name] = int(np.count_nonzero(bad))
        max_ratio[name] = float(np.max(lhs / np.maximum(rhs, tiny)))
        for index in np.flatnonzero(bad)[:max_witnesses - len(witnesses)]:
            witnesses.append({"check": name, "z": float(np.exp(log_r[index])), "eps": float(eps[index])})
            logger.warning(f"Inequality {name} violated at z={np.exp(log_r[index]):.6g}, eps={eps[index]:.6g}")

    report = InequalityReport(samples=samples, seed=seed, violations=violations,
                              witnesses=witnesses, max_ratio=max_ratio)
    logger.info(f"Inequality scan: {samples} samples, {report.total_violations} violation(s)")
    return report


def inequality_sweep(eps: float = 0.25, n: int = 200) -> pd.DataFrame:
    """Model scalars on real z in (0, 1) at fixed eps"""
    r = np.linspace(0.0, 1.0, n + 2)[1:-1]
    values = _model_arrays(-np.log(r), eps)
    return pd.DataFrame({
        "z": r,
        "L0": -2.0 * np.log(r),
        "L": values["L"],
        "K": 1.0 + values["K_minus_1"],
        "M": 1.0 - values["one_minus_M"],
    })


# eps-family scans

def _parallel_map(fn: Callable, items: Sequence) -> List:
    with ThreadPoolExecutor(max_workers=max(1, min(EnvConfig.get_threads(), len(items)))) as pool:
        return list(pool.map(fn, items))


def _uniform_bound(eps: float, grid: LogPolarGrid, lam: complex) -> float:
    conn, sampler = _rank2_family(lam, eps)
    Hf = sampler(grid)
    ops = induced_ops(Hf, conn)
    area = (grid.abs_z ** 2)[..., None, None]
    density = h_norm(dbar_theta(ops) / area, ops.K) / model_weight(grid, eps)
    return float(np.max(density[grid.interior()]))


def uniform_bound_scan(eps_list: Sequence[float], grid: LogPolarGrid, lam: complex = 1.0) -> pd.DataFrame:
    """
    sup over interior samples of |d''_eps theta_eps| measured with h_eps and omega_eps, per eps.

    Returns:
        DataFrame with columns eps, sup, n_rad, under_resolved
    """
    eps_list = [float(e) for e in eps_list]
    if any(not (0 <= e <= 0.5) for e in eps_list):
        raise KmsError(f"eps values must lie in [0, 1/2], got {eps_list}")
    under_resolved = grid.n_rad < MIN_RESOLVED_RADIAL and any(e >= 0.01 for e in eps_list)
    if under_resolved:
        logger.warning(f"Grid with n_rad={grid.n_rad} under-resolves eps scales (need {MIN_RESOLVED_RADIAL})")
    sups = _parallel_map(lambda e: _uniform_bound(e, grid, lam), eps_list)
    return pd.DataFrame({
        "eps": eps_list,
        "sup": sups,
        "n_rad": grid.n_rad,
        "under_resolved": under_resolved,
    })


def uniform_bound_margin(table: pd.DataFrame, reference: float = 0.5) -> float:
    """max sup over the table divided by the sup at eps = reference"""
    ref = table.loc[np.isclose(table["eps"], reference), "sup"]
    if ref.empty:
        raise KmsError(f"uniform bound table has no row at eps={reference}")
    return float(table["sup"].max() / ref.iloc[0])


def epsilon_convergence(eps_list: Sequence[float], grid: LogPolarGrid, lam: complex = 1.0,
                        r0: float = 0.1, r1: float = 0.5) -> pd.DataFrame:
    """sup over r0 <= |z| <= r1 of |H_eps - H_0| (Frobenius), per eps"""
    mask = grid.rows_within(r0, r1)
    H0 = _rank2_metric(grid, complex(lam), 0.0)

    def distance(eps: float) -> float:
        diff = _rank2_metric(grid, complex(lam), eps) - H0
        return float(np.max(np.linalg.norm(diff, axis=(-2, -1))[mask]))

    eps_list = [float(e) for e in eps_list]
    return pd.DataFrame({"eps": eps_list, "sup_diff": _parallel_map(distance, eps_list)})


# Donaldson functional

class DonaldsonReport(BaseModel):
    """
    M(h1, h2) integrated along h_t = h1 s^t. `linear_term` is the one-form at h1 and
    `quadratic_term` the rest of the path integral. `psi_energy` is the closed form
    linear_term + int (Psi(s) D s, D s) dvol, which agrees with `value` as the grid is refined.
    """
    value: float
    linear_term: float
    quadratic_term: float
    psi_energy: float = 0.0
    imaginary_residual: float


DONALDSON_NODES = 6


def _volume(grid: LogPolarGrid, weight: np.ndarray) -> np.ndarray:
    """dvol_omega in log-polar coordinates: w |z|^2 dx dy"""
    return weight * grid.abs_z ** 2 * grid.quadrature()


def transition(H1f: GridMetricField, H2f: GridMetricField) -> np.ndarray:
    """s with h2 = h1 s, i.e. K1^-1 K2; rejected unless positive at every sample"""
    if H2f.grid != H1f.grid:
        raise KmsError("metrics live on different grids")
    s = np.linalg.solve(H1f.K, H2f.K)
    kappa = _eigen(s, H1f.K, 1e-8)[0]
    if np.any(kappa <= 0):
        row, col = (int(v) for v in np.argwhere(kappa.min(axis=-1) <= 0)[0])
        raise KmsError(f"transition endomorphism is not positive at row {row}, col {col}")
    return s


def _one_form(Hf: GridMetricField, log_s: np.ndarray, conn: ConnectionModel, weight: np.ndarray,
              volume: np.ndarray, lambda_g: Optional[np.ndarray] = None) -> complex:
    """sum tr(log_s sqrt(-1) Lambda G(h)) dvol"""
    G = lambda_g if lambda_g is not None else lambda_G(Hf, conn, weight)
    return complex(np.sum(trace(log_s @ G) * volume))


def _psi_quadratic(H1f: GridMetricField, log_s: np.ndarray, conn: ConnectionModel,
                   kappa: np.ndarray, Q: np.ndarray, R: np.ndarray, R_inv: np.ndarray) -> float:
    X, Y = (f.coeff for f in lambda_connection_end(log_s, H1f, conn))
    frame = adjoint(Q) @ R
    X_t = frame @ X @ R_inv @ Q
    Y_t = frame @ Y @ R_inv @ Q
    # entry (i, j) carries Psi(kappa_j, kappa_i)
    weights = psi_donaldson(kappa[..., None, :], kappa[..., :, None])
    density = np.sum(weights * (np.abs(X_t) ** 2 + np.abs(Y_t) ** 2), axis=(-2, -1))
    return float(np.sum(density * H1f.grid.quadrature()))


def donaldson_report(H1f: GridMetricField, H2f: GridMetricField, conn: ConnectionModel,
                     weight: np.ndarray, lambda_g1: Optional[np.ndarray] = None,
                     nodes: int = DONALDSON_NODES) -> DonaldsonReport:
    """
    M(h1, h2) = int_0^1 int tr(s^-1 ds/dt sqrt(-1) Lambda G(h_t)) dvol dt along h_t = h1 s^t.

    The t-integral uses Gauss-Legendre nodes, so M is the line integral of the same discrete
    one-form whose value at h1 drives the heat flow, and M(h1, h2) + M(h2, h3) = M(h1, h3) holds
    up to the quadrature and grid truncation.

    Args:
        lambda_g1: precomputed sqrt(-1) Lambda G(h1), if available
        nodes: Gauss-Legendre nodes on [0, 1]

    Returns:
        DonaldsonReport; the imaginary part of the integral is reported as a residual
    """
    grid = H1f.grid
    if H2f is H1f or np.array_equal(H1f.H, H2f.H):
        return DonaldsonReport(value=0.0, linear_term=0.0, quadratic_term=0.0, imaginary_residual=0.0)
    K1 = H1f.K
    volume = _volume(grid, weight)
    eigen_s, Q, R, R_inv = _eigen(transition(H1f, H2f), K1, 1e-8)
    kappa = np.log(eigen_s)
    log_s = R_inv @ (Q * kappa[..., None, :]) @ adjoint(Q) @ R
    linear = _one_form(H1f, log_s, conn, weight, volume, lambda_g1)

    points, weights = np.polynomial.legendre.leggauss(nodes)
    total = 0j
    for x, w in zip(points, weights):
        t = 0.5 * (x + 1.0)
        K_t = hermitian_part(R @ (Q * np.exp(t * kappa)[..., None, :]) @ adjoint(Q) @ R)
        total += 0.5 * w * _one_form(GridMetricField.from_K(grid, K_t), log_s, conn, weight, volume)

    value = float(np.real(total))
    return DonaldsonReport(
        value=value,
        linear_term=float(np.real(linear)),
        quadratic_term=value - float(np.real(linear)),
        psi_energy=float(np.real(linear)) + _psi_quadratic(H1f, log_s, conn, kappa, Q, R, R_inv),
        imaginary_residual=float(np.imag(total)),
    )


def donaldson(H1f: GridMetricField, H2f: GridMetricField, conn: ConnectionModel, weight: np.ndarray,
              lambda_g1: Optional[np.ndarray] = None, nodes: int = DONALDSON_NODES) -> float:
    return donaldson_report(H1f, H2f, conn, weight, lambda_g1, nodes).value


def donaldson_lower_bound(H1f: GridMetricField, H2f: GridMetricField, conn: ConnectionModel,
                          weight: np.ndarray) -> float:
    """-int |s|_h |Lambda G(h1)|_h dvol, a lower bound for M(h1, h1 e^s)"""
    K1 = H1f.K
    log_s = scalar_calculus(np.log, transition(H1f, H2f), K1, 1e-8)
    G1 = lambda_G(H1f, conn, weight)
    return -float(np.sum(h_norm(log_s, K1) * h_norm(G1, K1) * _volume(H1f.grid, weight)))


# heat flow

class KahlerChoice(str, Enum):
    MODEL = "model"


class BoundaryChoice(str, Enum):
    DIRICHLET_MODEL = "dirichlet-model"


class FlowConfig(BaseModel):
    """Heat-flow run parameters; `lambda` is accepted as an alias of `lam`"""
    model_config = ConfigDict(arbitrary_types_allowed=True, populate_by_name=True)

    grid: LogPolarGrid = Field(default_factory=LogPolarGrid)
    lam: Any = Field(default=1.0, alias="lambda")
    eps: float = 0.0
    eta: float = 0.1
    dt: float = 1e-3
    steps: int = 500
    kahler: KahlerChoice = KahlerChoice.MODEL
    boundary: BoundaryChoice = BoundaryChoice.DIRICHLET_MODEL
    record_every: int = 1
    amplitude: float = 0.2
    seed: int = 0
    rank: int = 2

    @field_validator("grid", mode="before")
    @classmethod
    def parse_grid_text(cls, value: Any) -> Any:
        if isinstance(value, str):
            n_rad, n_ang = parse_grid(value)
            return LogPolarGrid(n_rad=n_rad, n_ang=n_ang)
        return value

    @field_validator("lam", mode="before")
    @classmethod
    def parse_lambda(cls, value: Any) -> complex:
        if isinstance(value, dict):
            value = complex(float(value.get("re", 0)), float(value.get("im", 0)))
        value = complex(value)
        if value == 0:
            raise ValueError("lambda = 0 is not supported")
        return value

    @model_validator(mode="after")
    def check_ranges(self) -> "FlowConfig":
        if not (0 <= self.eps < 0.5):
            raise ValueError(f"eps must lie in [0, 1/2), got {self.eps}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be at least 1, got {self.record_every}")
        if not (2 <= self.rank <= MAX_RANK):
            raise ValueError(f"rank must lie in [2, {MAX_RANK}], got {self.rank}")
        return self


class FlowTraceRow(BaseModel):
    step: int
    t: float
    det_residual: float
    det_drift: float
    donaldson: float
    donaldson_direct: float
    lambdaG_perp_l2: float
    sup_log_s: float
    boundary_drift: float = 0.0


class FlowState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    Hf: GridMetricField
    t: float = 0.0
    trace: List[FlowTraceRow] = Field(default_factory=list)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.trace])


def _expm_hermitian(Y: np.ndarray) -> np.ndarray:
    mu, V = np.linalg.eigh(hermitian_part(Y))
    return (V * np.exp(mu)[..., None, :]) @ adjoint(V)


def _implicit_operator(grid: LogPolarGrid, coeff: np.ndarray, dt: float) -> sp.csc_matrix:
    """I - dt c Delta_xy with the 5-point stencil, periodic in y, identity on boundary rows"""
    n_rad, n_ang = grid.shape
    index = np.arange(n_rad * n_ang).reshape(n_rad, n_ang)
    ax = dt * coeff / grid.hx ** 2
    ay = dt * coeff / grid.hy ** 2
    interior = np.zeros(grid.shape, dtype=bool)
    interior[1:-1, :] = True

    diag = np.where(interior, 1.0 + 2.0 * ax + 2.0 * ay, 1.0)
    rows = [index.ravel()]
    cols = [index.ravel()]
    vals = [diag.ravel()]
    for di, dj, a in ((1, 0, ax), (-1, 0, ax), (0, 1, ay), (0, -1, ay)):
        r = index[1:-1, :]
        c = np.roll(np.roll(index, -di, axis=0), -dj, axis=1)[1:-1, :]
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(-a[1:-1, :].ravel())
    size = n_rad * n_ang
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    return A.tocsc()


def _l2_norm(X: np.ndarray, K: np.ndarray, volume: np.ndarray) -> float:
    return float(np.sqrt(np.sum(h_norm(X, K) ** 2 * volume)))


def _sup_lambda_g(G: np.ndarray, K: np.ndarray, mask: np.ndarray) -> float:
    return float(np.max(h_norm(G, K)[mask]))


def _boundary_drift(K: np.ndarray, K0: np.ndarray) -> float:
    return max(float(np.max(np.abs(K[row] - K0[row]))) for row in (0, -1))


def _record(step: int, t: float, Hf: GridMetricField, H0f: GridMetricField, G_perp: np.ndarray,
            volume: np.ndarray, det0: np.ndarray, drift: float, cumulative: float,
            conn: ConnectionModel, weight: np.ndarray, lambda_g0: np.ndarray) -> FlowTraceRow:
    K = Hf.K
    s = np.linalg.solve(H0f.K, K)
    kappa = _eigen(s, H0f.K, 1e-8)[0]
    det_residual = float(np.max(np.abs(np.real(np.linalg.det(K)) / det0 - 1.0)))
    direct = donaldson(H0f, Hf, conn, weight, lambda_g0) if step else 0.0
    return FlowTraceRow(
        boundary_drift=_boundary_drift(K, H0f.K),
        step=step,
        t=t,
        det_residual=det_residual,
        det_drift=drift,
        donaldson=cumulative,
        donaldson_direct=direct,
        lambdaG_perp_l2=_l2_norm(G_perp, K, volume),
        sup_log_s=float(np.max(np.abs(np.log(np.maximum(kappa, np.finfo(float).tiny))))),
    )


def heat_flow(config: FlowConfig, initial: GridMetricField,
              conn: Optional[ConnectionModel] = None) -> FlowState:
    """
    Run s_t^-1 ds_t/dt = -sqrt(-1) Lambda G(h_t)^perp on the annulus with Dirichlet boundary rows.

    Each step solves (I - dt c Delta_xy) y = -dt Lambda G^perp in an h-orthonormal frame,
    c = (1 + |lambda|^2) / (4 |z|^2 w), with y = 0 on the boundary rows, sets K <- K^(1/2) exp(y) K^(1/2),
    renormalizes det K to det K_0 and restores the boundary rows of K_0 exactly. The Donaldson trace
    accumulates M(h_n, h_n+1) along the run; the L2 norm of Lambda G^perp runs over the moving rows.

    Args:
        config: flow parameters
        initial: starting metric; its boundary rows must match the model metric
        conn: connection; defaults to the model connection of the initial rank

    Returns:
        FlowState with the final metric and the recorded trace

    Raises:
        FlowConfigError: stability guard, eta rule or boundary mismatch
        NumericalAbort: positivity lost or the boundary rows moved; `state` holds the last good FlowState
    """
    grid = config.grid
    if initial.grid != grid:
        raise FlowConfigError(f"initial metric grid {initial.grid.shape} does not match config grid {grid.shape}")
    rank = initial.rank
    if not 10 * rank * config.eps < config.eta:
        raise FlowConfigError(f"need 10 * rank * eps < eta, got rank={rank}, eps={config.eps}, eta={config.eta}")
    model_conn, sampler = model_family(rank, config.lam, config.eps)
    conn = conn or model_conn
    model_H = sampler(grid).H
    boundary_gap = max(
        float(np.max(np.abs(initial.H[row] - model_H[row]))) for row in (0, grid.n_rad - 1)
    )
    if boundary_gap > 1e-8 * max(1.0, float(np.max(np.abs(model_H)))):
        raise FlowConfigError(f"initial metric differs from the model metric on the boundary rows by {boundary_gap:.3g}")

    weight = model_weight(grid, config.eps)
    volume = _volume(grid, weight)
    # the boundary rows never move, so norms run over the moving rows only
    moving = np.zeros(grid.shape, dtype=bool)
    moving[1:-1, :] = True
    volume_moving = np.where(moving, volume, 0.0)
    mask = grid.interior()
    H0f = initial
    det0 = np.real(np.linalg.det(H0f.K))

    G = lambda_G(H0f, conn, weight)
    sup_g = _sup_lambda_g(G, H0f.K, mask)
    if config.dt * sup_g > GUARD:
        raise FlowConfigError(
            f"stability guard violated: dt * sup|Lambda G| = {config.dt * sup_g:.4g} > {GUARD} "
            f"(dt={config.dt}, sup|Lambda G|={sup_g:.4g})"
        )

    coeff = (1 + abs(conn.lam) ** 2) / (4 * grid.abs_z ** 2 * weight)
    solver = sla.splu(_implicit_operator(grid, coeff, config.dt))
    logger.info(f"Heat flow: rank {rank}, grid {grid.n_rad}x{grid.n_ang}, dt={config.dt}, {config.steps} steps")

    lambda_g0 = G
    state = FlowState(Hf=H0f, t=0.0)
    G_perp = trace_free(G)
    state.trace.append(_record(0, 0.0, H0f, H0f, G_perp, volume_moving, det0, 0.0, 0.0, conn, weight, lambda_g0))
    cumulative = 0.0
    Hf = H0f
    K0 = H0f.K
    size = grid.n_rad * grid.n_ang
    pin_tol = 1e-8 * max(1.0, float(np.max(np.abs(K0))))

    for step in range(1, config.steps + 1):
        K = Hf.K
        R, R_inv = sqrt_pair(K)
        G_hat = hermitian_part(R @ G_perp @ R_inv)
        rhs = -config.dt * G_hat
        rhs[0] = 0.0
        rhs[-1] = 0.0
        rhs = rhs.reshape(size, rank * rank)
        y = solver.solve(np.ascontiguousarray(rhs.real)) + 1j * solver.solve(np.ascontiguousarray(rhs.imag))
        y = hermitian_part(y.reshape(grid.shape + (rank, rank)))
        y = y - (trace(y) / rank)[..., None, None] * np.eye(rank)
        y[0] = 0.0
        y[-1] = 0.0
        K_new = hermitian_part(R @ _expm_hermitian(y) @ R)

        det_new = np.real(np.linalg.det(K_new))
        if np.any(det_new <= 0) or not np.all(np.isfinite(K_new)):
            raise NumericalAbort(f"positivity lost at step {step}", state=state)
        drift = float(np.max(np.abs(det_new / det0 - 1.0)))
        K_new = K_new * (det0 / det_new)[..., None, None] ** (1.0 / rank)
        boundary_drift = _boundary_drift(K_new, K0)
        if boundary_drift > pin_tol:
            raise NumericalAbort(f"Dirichlet rows moved by {boundary_drift:.3g} at step {step}", state=state)
        K_new[0] = K0[0]
        K_new[-1] = K0[-1]
        try:
            H_next = GridMetricField.from_K(grid, K_new)
        except ValueError as e:
            logger.error(f"Heat flow lost positivity at step {step}: {e}")
            raise NumericalAbort(f"positivity lost at step {step}: {e}", state=state)

        cumulative += donaldson(Hf, H_next, conn, weight, G, nodes=2)
        Hf = H_next
        G = lambda_G(Hf, conn, weight)
        G_perp = trace_free(G)
        t = step * config.dt
        if drift > 1e-6:
            logger.warning(f"Determinant drift {drift:.3g} before renormalization at step {step}")
        if step % config.record_every == 0 or step == config.steps:
            row = _record(step, t, Hf, H0f, G_perp, volume_moving, det0, drift, cumulative, conn, weight, lambda_g0)
            logger.debug(f"step {step}: M={row.donaldson:.6g}, |LG_perp|={row.lambdaG_perp_l2:.6g}")
            state = FlowState(Hf=Hf, t=t, trace=state.trace + [row])
        else:
            state = FlowState(Hf=Hf, t=t, trace=state.trace)

    logger.info(f"Heat flow finished at t={state.t:.4g}, |LG_perp|={state.trace[-1].lambdaG_perp_l2:.4g}")
    return state


def flow_checks(state: FlowState, det_tol: float = 1e-8, slack: float = 1e-10) -> Dict[str, Any]:
    """Determinant and boundary pinning, monotone Donaldson trace and the L2 decay ratio of a recorded flow"""
    frame = state.trace_frame()
    increments = np.diff(frame["donaldson"].to_numpy())
    first = float(frame["lambdaG_perp_l2"].iloc[0])
    last = float(frame["lambdaG_perp_l2"].iloc[-1])
    return {
        "det_pinned": bool(frame["det_residual"].max() < det_tol),
        "boundary_pinned": bool(frame["boundary_drift"].max() == 0.0),
        "max_det_residual": float(frame["det_residual"].max()),
        "max_det_drift": float(frame["det_drift"].max()),
        "donaldson_monotone": bool(np.all(increments <= slack)) if increments.size else True,
        "max_donaldson_increment": float(increments.max()) if increments.size else 0.0,
        "decay_ratio": last / first if first > 0 else 0.0,
    }


def log_s_bound_fit(state: FlowState) -> Dict[str, float]:
    """Least-squares fit sup|log s_t| ~ C1 + C2 M(h_0, h_t) along the trace"""
    frame = state.trace_frame()
    M = frame["donaldson_direct"].to_numpy()
    S = frame["sup_log_s"].to_numpy()
    if len(frame) < 2 or np.ptp(M) == 0:
        return {"C1": float(S.max()) if len(S) else 0.0, "C2": 0.0, "max_residual": 0.0}
    C2, C1 = np.polyfit(M, S, 1)
    return {"C1": float(C1), "C2": float(C2), "max_residual": float(np.max(np.abs(S - (C1 + C2 * M))))}


def radial_bump(grid: LogPolarGrid) -> np.ndarray:
    """sin(pi t) in the normalized radial coordinate t; zero on both boundary rows"""
    t = (grid.x - grid.x[0]) / (grid.x[-1] - grid.x[0])
    bump = np.sin(np.pi * t)
    bump[0] = bump[-1] = 0.0
    return bump


def perturbation_field(grid: LogPolarGrid, rank: int, amplitude: float, seed: int = 0,
                       modes: int = 2) -> np.ndarray:
    """Hermitian trace-free field vanishing on the boundary rows with sup Frobenius norm `amplitude`"""
    rng = np.random.default_rng(seed)
    y = grid.y
    U = np.zeros(grid.shape + (rank, rank), dtype=complex)
    for m in range(modes):
        A = random_traceless(rng, rank)
        B = random_traceless(rng, rank)
        U = U + np.cos(m * y)[None, :, None, None] * A + np.sin(m * y)[None, :, None, None] * B
    U = U * radial_bump(grid)[:, None, None, None]
    scale = float(np.max(np.linalg.norm(U, axis=(-2, -1))))
    if scale == 0:
        return U
    return U * (amplitude / scale)


def perturbed_model(grid: LogPolarGrid, lam: complex = 1.0, eps: float = 0.0, amplitude: float = 0.2,
                    seed: int = 0, rank: int = 2) -> Tuple[ConnectionModel, GridMetricField]:
    """Model metric h times exp(u), u h-self-adjoint and trace-free with |u| = amplitude"""
    conn, sampler = model_family(rank, lam, eps)
    base = sampler(grid)
    R, _ = sqrt_pair(base.K)
    U_hat = perturbation_field(grid, rank, amplitude, seed)
    return conn, GridMetricField.from_K(grid, hermitian_part(R @ _expm_hermitian(U_hat) @ R))


# boundary integral

class BoundaryIntegralRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lhs: Any
    rhs: Any
    area_lhs: Any
    scale: float

    @property
    def relative_error(self) -> float:
        return abs(self.lhs - self.rhs) / self.scale


def cutoff(grid: LogPolarGrid) -> np.ndarray:
    """C^1 profile: 1 on the inner third of the radial range, 0 on the outer third"""
    t = (grid.x - grid.x[0]) / (grid.x[-1] - grid.x[0])
    middle = np.cos(0.5 * np.pi * (3.0 * t - 1.0)) ** 2
    chi = np.where(t <= 1 / 3, 1.0, np.where(t >= 2 / 3, 0.0, middle))
    return np.broadcast_to(chi[:, None], grid.shape)


def product_metric(grid: LogPolarGrid, weights: Sequence[float]) -> GridMetricField:
    """diag |z|^(-2 a_i chi) : the product metric near the puncture, flat near the outer circle"""
    a = np.asarray([float(v) for v in weights])
    chi_x = cutoff(grid) * np.log(grid.abs_z)
    K = np.zeros(grid.shape + (len(a), len(a)), dtype=complex)
    for i, a_i in enumerate(a):
        K[..., i, i] = np.exp(-2.0 * a_i * chi_x)
    return GridMetricField.from_K(grid, K)


def boundary_integral(lam: complex, weights: Sequence[float], residue: Any, grid: LogPolarGrid,
                      metric: Optional[GridMetricField] = None) -> BoundaryIntegralRecord:
    """
    (sqrt(-1)/2 pi) int d'' tr theta over the annulus, by Stokes as a difference of circle
    integrals, against lambda (1 + |lambda|^2)^-1 (lambda^-1 tr Res + sum a).

    The connection is residue * chi dz/z, so only the inner circle carries residue and weights.

    Raises:
        KmsError: when `metric` is not of product form on the inner third
    """
    residue = np.atleast_2d(np.asarray(residue, dtype=complex))
    rank = residue.shape[0]
    if len(weights) != rank:
        raise KmsError(f"{len(weights)} weights for a residue of rank {rank}")
    product = product_metric(grid, weights)
    if metric is None:
        metric = product
    else:
        inner = cutoff(grid)[:, 0] >= 1.0
        gap = float(np.max(np.abs(metric.H[inner] - product.H[inner])))
        if gap > 1e-8 * max(1.0, float(np.max(np.abs(product.H[inner])))):
            row = int(np.argmax(np.max(np.abs(metric.H - product.H), axis=(1, 2, 3)) * inner))
            raise KmsError(f"metric is not of product form near the puncture (row {row}, deviation {gap:.3g})")
    chi = cutoff(grid)[:, 0]
    x = grid.x

    def sampler(z: np.ndarray) -> np.ndarray:
        row = np.interp(np.log(np.abs(z)), x, chi)
        return residue * ((row - 1.0) / z)[..., None, None]

    conn = ConnectionModel(lam=lam, residue=residue, sampler=sampler)
    ops = induced_ops(metric, conn)
    tr_theta = trace(ops.theta.coeff)
    lhs = -np.sum(tr_theta[-1] - tr_theta[0]) * grid.hy / (2 * np.pi)
    area_lhs = -np.sum(d_wbar(tr_theta, grid) * grid.quadrature()) / np.pi

    lam = conn.lam
    rhs = (np.trace(residue) + lam * sum(float(v) for v in weights)) / (1 + abs(lam) ** 2)
    # rank-1 reference value with a = 1/2, lambda = 1
    scale = max(abs(rhs), 0.25)
    return BoundaryIntegralRecord(lhs=complex(lhs), rhs=complex(rhs), area_lhs=complex(area_lhs), scale=scale)
