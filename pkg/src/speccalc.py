"""
Spectral calculus on self-adjoint endomorphisms and the operator stack of a lambda-connection
with a hermitian metric, sampled on log-polar grids over an annulus in the punctured disc.

Conventions
- Fields are arrays of shape (n_rad, n_ang, r, r). Coordinates are w = log z = x + iy with
  d_w = (d_x - i d_y)/2, so dz/z = dw and form coefficients are stored against dw, dw-bar and
  dw ^ dw-bar. GridFormField.z_coefficient converts to dz, dz-bar and dz ^ dz-bar.
- K = conj(H) is the matrix used in every formula (B = K^-1 d K).
- lambda_trace returns sqrt(-1) Lambda_omega of a (1,1)-form, i.e. its dz ^ dz-bar coefficient
  divided by the Kahler weight w.
- The star operator is D^{lambda*} = delta'_h - delta''_h.
"""

import logging
from enum import Enum
from typing import Any, Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .env_config import EnvConfig
from .models import KmsError

logger = logging.getLogger(__name__)

MAX_RANK = 8


class FieldModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class FormType(str, Enum):
    ONE_ZERO = "1,0"
    ZERO_ONE = "0,1"
    ONE_ONE = "1,1"


class LogPolarGrid(FieldModel):
    """Samples z = exp(x + iy), x uniform on [log r_min, log r_max], y periodic on [0, 2 pi)"""
    r_min: float = 0.1
    r_max: float = 0.9
    n_rad: int = 64
    n_ang: int = 64

    @model_validator(mode="after")
    def check_ranges(self) -> "LogPolarGrid":
        if not (0 < self.r_min < self.r_max <= 1):
            raise ValueError(f"need 0 < r_min < r_max <= 1, got {self.r_min}, {self.r_max}")
        if self.n_rad < 8 or self.n_ang < 8:
            raise ValueError(f"grid sizes must be at least 8, got {self.n_rad}x{self.n_ang}")
        return self

    @property
    def x(self) -> np.ndarray:
        return np.linspace(np.log(self.r_min), np.log(self.r_max), self.n_rad)

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.n_ang) * (2 * np.pi / self.n_ang)

    @property
    def hx(self) -> float:
        return (np.log(self.r_max) - np.log(self.r_min)) / (self.n_rad - 1)

    @property
    def hy(self) -> float:
        return 2 * np.pi / self.n_ang

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rad, self.n_ang)

    @property
    def z(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return np.exp(X + 1j * Y)

    @property
    def abs_z(self) -> np.ndarray:
        return np.broadcast_to(np.exp(self.x)[:, None], self.shape)

    def interior(self, margin: int = 2) -> np.ndarray:
        """Row mask excluding `margin` radial rows at each end"""
        mask = np.zeros(self.shape, dtype=bool)
        mask[margin:self.n_rad - margin, :] = True
        return mask

    def rows_within(self, r0: float, r1: float) -> np.ndarray:
        radius = self.abs_z
        return (radius >= r0 * (1 - 1e-12)) & (radius <= r1 * (1 + 1e-12))

    def quadrature(self) -> np.ndarray:
        """Trapezoid weights in x times the periodic rule in y, for integrals in dx dy"""
        wx = np.full(self.n_rad, self.hx)
        wx[0] = wx[-1] = self.hx / 2
        return np.broadcast_to(wx[:, None] * self.hy, self.shape)

    def refined(self) -> "LogPolarGrid":
        """Nested grid with half the spacing; sample (i, j) coincides with (2i, 2j)"""
        return LogPolarGrid(r_min=self.r_min, r_max=self.r_max, n_rad=2 * self.n_rad - 1, n_ang=2 * self.n_ang)


# finite differences on grid fields

def d_x(F: np.ndarray, grid: LogPolarGrid) -> np.ndarray:
    return np.gradient(F, grid.hx, axis=0, edge_order=2)


def d_y(F: np.ndarray, grid: LogPolarGrid) -> np.ndarray:
    return (np.roll(F, -1, axis=1) - np.roll(F, 1, axis=1)) / (2 * grid.hy)


def d_w(F: np.ndarray, grid: LogPolarGrid) -> np.ndarray:
    return 0.5 * (d_x(F, grid) - 1j * d_y(F, grid))


def d_wbar(F: np.ndarray, grid: LogPolarGrid) -> np.ndarray:
    return 0.5 * (d_x(F, grid) + 1j * d_y(F, grid))


def laplacian_xy(F: np.ndarray, grid: LogPolarGrid) -> np.ndarray:
    return d_x(d_x(F, grid), grid) + d_y(d_y(F, grid), grid)


# pointwise matrix helpers

def adjoint(X: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(X, -1, -2))


def hermitian_part(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + adjoint(X))


def commutator(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return X @ Y - Y @ X


def trace(X: np.ndarray) -> np.ndarray:
    return np.trace(X, axis1=-2, axis2=-1)


def sqrt_pair(K: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """K^(1/2) and K^(-1/2) of a hermitian positive-definite stack"""
    e, V = np.linalg.eigh(hermitian_part(K))
    if np.any(e <= 0):
        raise KmsError("metric is not positive definite")
    root = np.sqrt(e)
    return (V * root[..., None, :]) @ adjoint(V), (V / root[..., None, :]) @ adjoint(V)


def h_norm(X: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Pointwise |X|_h = sqrt(tr(X X^dagger_h)) with X^dagger_h = K^-1 X^* K"""
    value = np.real(trace(X @ np.linalg.solve(K, adjoint(X) @ K)))
    return np.sqrt(np.maximum(value, 0.0))


def _location(index: Tuple[int, ...]) -> str:
    if len(index) >= 2:
        return f"row {index[0]}, col {index[1]}"
    return f"sample {index}" if index else "matrix"


def check_self_adjoint(s: np.ndarray, H: np.ndarray, tol: Optional[float] = None) -> None:
    """Reject s unless H s is hermitian to relative tolerance tol (KMS_HODGE_TOL by default)"""
    tol = EnvConfig.get_tolerance() if tol is None else tol
    Hs = H @ s
    diff = np.linalg.norm(Hs - adjoint(Hs), axis=(-2, -1))
    scale = np.maximum(1.0, np.linalg.norm(Hs, axis=(-2, -1)))
    bad = diff > tol * scale
    if np.any(bad):
        index = tuple(int(v) for v in np.argwhere(np.atleast_1d(bad))[0]) if np.ndim(bad) else ()
        raise KmsError(f"endomorphism is not self-adjoint with respect to the metric at {_location(index)}")


def _eigen(s: np.ndarray, H: np.ndarray, tol: Optional[float]):
    s = np.asarray(s, dtype=complex)
    H = np.broadcast_to(np.asarray(H, dtype=complex), s.shape)
    check_self_adjoint(s, H, tol)
    R, R_inv = sqrt_pair(H)
    kappa, Q = np.linalg.eigh(hermitian_part(R @ s @ R_inv))
    return kappa, Q, R, R_inv


def scalar_calculus(phi: Callable[[np.ndarray], np.ndarray], s: np.ndarray, H: np.ndarray,
                    tol: Optional[float] = None) -> np.ndarray:
    """
    phi(s) for s self-adjoint with respect to H (H s hermitian).

    Args:
        phi: real function applied elementwise to eigenvalues
        s: matrix or stack of matrices
        H: metric (same stack shape, or a single matrix)

    Returns:
        phi(s), again self-adjoint with respect to H
    """
    kappa, Q, R, R_inv = _eigen(s, H, tol)
    return R_inv @ (Q * phi(kappa)[..., None, :]) @ adjoint(Q) @ R


def two_var_calculus(Psi: Callable[[np.ndarray, np.ndarray], np.ndarray], s: np.ndarray, A: np.ndarray,
                     H: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
    """Scale entry (i, j) of A, in an H-orthonormal eigenbasis of s, by Psi(kappa_i, kappa_j)"""
    kappa, Q, R, R_inv = _eigen(s, H, tol)
    A_tilde = adjoint(Q) @ R @ np.asarray(A, dtype=complex) @ R_inv @ Q
    scale = Psi(kappa[..., :, None], kappa[..., None, :])
    return R_inv @ Q @ (scale * A_tilde) @ adjoint(Q) @ R


def divided_difference(phi: Callable[[np.ndarray], np.ndarray], dphi: Callable[[np.ndarray], np.ndarray]):
    """Psi(t1, t2) = (phi(t1) - phi(t2)) / (t1 - t2), with dphi on the diagonal"""
    def Psi(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
        d = t1 - t2
        close = np.abs(d) < 1e-8
        safe = np.where(close, 1.0, d)
        return np.where(close, dphi(0.5 * (t1 + t2)), (phi(t1) - phi(t2)) / safe)
    return Psi


def psi_donaldson(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """(e^d - d - 1) / d^2 with d = t2 - t1; 1/2 on the diagonal"""
    d = np.asarray(t2 - t1, dtype=float)
    small = np.abs(d) < 1e-3
    safe = np.where(small, 1.0, d)
    series = 0.5 + d / 6 + d * d / 24
    return np.where(small, series, (np.expm1(safe) - safe) / (safe * safe))


class GridMetricField(FieldModel):
    """Hermitian positive-definite H(h, v) sampled on a grid"""
    grid: LogPolarGrid
    H: Any

    @field_validator("H")
    @classmethod
    def symmetrize(cls, H: Any) -> np.ndarray:
        H = np.asarray(H, dtype=complex)
        if H.ndim != 4 or H.shape[-1] != H.shape[-2]:
            raise ValueError(f"H must have shape (n_rad, n_ang, r, r), got {H.shape}")
        if H.shape[-1] > MAX_RANK:
            raise ValueError(f"rank {H.shape[-1]} exceeds {MAX_RANK}")
        return hermitian_part(H)

    @model_validator(mode="after")
    def check_positive(self) -> "GridMetricField":
        if self.H.shape[:2] != self.grid.shape:
            raise ValueError(f"H samples {self.H.shape[:2]} do not match grid {self.grid.shape}")
        smallest = np.linalg.eigvalsh(self.H)[..., 0]
        if np.any(smallest <= 0):
            row, col = (int(v) for v in np.argwhere(smallest <= 0)[0])
            raise ValueError(f"H is not positive definite at row {row}, col {col}")
        return self

    @classmethod
    def from_K(cls, grid: LogPolarGrid, K: np.ndarray) -> "GridMetricField":
        return cls(grid=grid, H=np.conj(K))

    @property
    def K(self) -> np.ndarray:
        return np.conj(self.H)

    @property
    def rank(self) -> int:
        return self.H.shape[-1]


class ConnectionModel(FieldModel):
    """
    lambda-connection with coefficient residue dz/z + A(z) dz in a fixed frame,
    i.e. A_w = residue + z A(z) against dw. `sampler` evaluates A on arrays of z.
    """
    lam: Any
    residue: Any
    sampler: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @field_validator("lam")
    @classmethod
    def check_lambda(cls, lam: Any) -> complex:
        lam = complex(lam)
        if lam == 0:
            raise ValueError("lambda = 0 is not supported")
        return complex(lam)

    @field_validator("residue")
    @classmethod
    def check_residue(cls, residue: Any) -> np.ndarray:
        residue = np.atleast_2d(np.asarray(residue, dtype=complex))
        if residue.shape[0] != residue.shape[1] or residue.shape[0] > MAX_RANK:
            raise ValueError(f"residue must be square of size at most {MAX_RANK}, got {residue.shape}")
        return residue

    @property
    def rank(self) -> int:
        return self.residue.shape[0]

    def a_w(self, grid: LogPolarGrid) -> np.ndarray:
        A = np.broadcast_to(self.residue, grid.shape + self.residue.shape).astype(complex)
        if self.sampler is not None:
            z = grid.z
            A = A + z[..., None, None] * self.sampler(z)
        return A


class GridFormField(FieldModel):
    """Matrix-valued form on a grid, stored against dw, dw-bar or dw ^ dw-bar"""
    grid: LogPolarGrid
    coeff: Any
    kind: FormType

    def z_coefficient(self) -> np.ndarray:
        z = self.grid.z[..., None, None]
        if self.kind == FormType.ONE_ZERO:
            return self.coeff / z
        if self.kind == FormType.ZERO_ONE:
            return self.coeff / np.conj(z)
        return self.coeff / (np.abs(z) ** 2)


class InducedOps(FieldModel):
    """theta, theta-dagger and the connection forms of d''_h, d'_h, delta'_h, delta''_h"""
    theta: GridFormField
    theta_dagger: GridFormField
    dbar_h: GridFormField
    d_h: GridFormField
    delta_prime: GridFormField
    delta_dprime: GridFormField
    K: Any
    K_inv: Any
    A: Any
    B: Any
    C: Any


def _check_rank(Hf: GridMetricField, conn: ConnectionModel) -> None:
    if Hf.rank != conn.rank:
        raise KmsError(f"metric rank {Hf.rank} does not match connection rank {conn.rank}")


def induced_ops(Hf: GridMetricField, conn: ConnectionModel) -> InducedOps:
    """
    Operators induced by a metric and a lambda-connection.

    B = K^-1 d_w K, C = conj(lambda) K^-1 d_wbar K - K^-1 A^* K; then
    theta = (A - lambda B)/(1 + |lambda|^2), the d''_h form lambda C/(1 + |lambda|^2),
    the d'_h form (conj(lambda) A + B)/(1 + |lambda|^2) and theta-dagger = K^-1 theta^* K.
    """
    _check_rank(Hf, conn)
    grid = Hf.grid
    if grid.hx > 0.1 or grid.hy > 0.2:
        logger.warning(f"Grid {grid.n_rad}x{grid.n_ang} is coarse (hx={grid.hx:.3g}, hy={grid.hy:.3g})")
    lam = conn.lam
    scale = 1 + abs(lam) ** 2
    K = Hf.K
    K_inv = np.linalg.inv(K)
    A = conn.a_w(grid)
    B = K_inv @ d_w(K, grid)
    C = np.conj(lam) * K_inv @ d_wbar(K, grid) - K_inv @ adjoint(A) @ K
    theta = (A - lam * B) / scale

    def form(coeff, kind):
        return GridFormField(grid=grid, coeff=coeff, kind=kind)

    return InducedOps(
        theta=form(theta, FormType.ONE_ZERO),
        theta_dagger=form(K_inv @ adjoint(theta) @ K, FormType.ZERO_ONE),
        dbar_h=form(lam / scale * C, FormType.ZERO_ONE),
        d_h=form((np.conj(lam) * A + B) / scale, FormType.ONE_ZERO),
        delta_prime=form(B, FormType.ONE_ZERO),
        delta_dprime=form(C, FormType.ZERO_ONE),
        K=K,
        K_inv=K_inv,
        A=A,
        B=B,
        C=C,
    )


def dbar_theta(ops: InducedOps) -> np.ndarray:
    """dw ^ dw-bar coefficient of -(d''_h theta)"""
    grid = ops.theta.grid
    Theta = ops.theta.coeff
    return d_wbar(Theta, grid) + commutator(ops.dbar_h.coeff, Theta)


def pseudo_curvature(Hf: GridMetricField, conn: ConnectionModel,
                     ops: Optional[InducedOps] = None) -> GridFormField:
    """G(h, D^lambda) = -((1 + |lambda|^2)^2 / lambda) (d''_h theta); theta ^ theta = 0 in one variable"""
    ops = ops or induced_ops(Hf, conn)
    lam = conn.lam
    G = ((1 + abs(lam) ** 2) ** 2 / lam) * dbar_theta(ops)
    return GridFormField(grid=Hf.grid, coeff=G, kind=FormType.ONE_ONE)


def lambda_trace(form: GridFormField, weight: np.ndarray) -> np.ndarray:
    """sqrt(-1) Lambda_omega of a (1,1)-form for omega = sqrt(-1) w dz ^ dz-bar"""
    if form.kind != FormType.ONE_ONE:
        raise KmsError(f"Lambda needs a (1,1)-form, got ({form.kind.value})")
    return form.z_coefficient() / np.asarray(weight)[..., None, None]


def lambda_G(Hf: GridMetricField, conn: ConnectionModel, weight: np.ndarray,
             ops: Optional[InducedOps] = None) -> np.ndarray:
    return lambda_trace(pseudo_curvature(Hf, conn, ops), weight)


def trace_free(X: np.ndarray) -> np.ndarray:
    r = X.shape[-1]
    return X - (trace(X) / r)[..., None, None] * np.eye(r)


def chern_curvature(Hf: GridMetricField) -> GridFormField:
    """R(d'', h) = d''(K^-1 d' K)"""
    K = Hf.K
    B = np.linalg.solve(K, d_w(K, Hf.grid))
    return GridFormField(grid=Hf.grid, coeff=-d_wbar(B, Hf.grid), kind=FormType.ONE_ONE)


def _sup(F: np.ndarray, mask: np.ndarray) -> float:
    norms = np.abs(F) if F.ndim == 2 else np.linalg.norm(F, axis=(-2, -1))
    return float(np.max(norms[mask])) if np.any(mask) else 0.0


class FlatnessReport(BaseModel):
    """Sup residuals (dz ^ dz-bar coefficients, interior rows) of the flatness identities"""
    flat_identity: float
    curvature_identity: float
    trace_identity: float
    adjoint_identity: float
    theta_squared: float = 0.0
    theta_dagger_squared: float = 0.0
    surface_form_identity: Optional[float] = None


def flatness_residuals(Hf: GridMetricField, conn: ConnectionModel) -> FlatnessReport:
    """
    Residuals of conj(lambda)^-1 d_h theta-dagger + lambda^-1 d''_h theta = 0,
    [d_h, d''_h] + [theta, theta-dagger] = 0 and tr G = (1 + |lambda|^2) tr R(d'', h).

    (2,0)-form identities vanish by type on a one-dimensional base; the surface-only identity is None.
    """
    grid = Hf.grid
    ops = induced_ops(Hf, conn)
    lam = conn.lam
    mask = grid.interior()
    area = np.abs(grid.z[..., None, None]) ** 2

    Theta = ops.theta.coeff
    Phi = ops.theta_dagger.coeff
    Gamma = ops.dbar_h.coeff
    P = ops.d_h.coeff

    dbar_h_theta = dbar_theta(ops)
    d_h_theta_dagger = d_w(Phi, grid) + commutator(P, Phi)
    flat = d_h_theta_dagger / np.conj(lam) - dbar_h_theta / lam
    curvature = d_w(Gamma, grid) - d_wbar(P, grid) + commutator(P, Gamma) + commutator(Theta, Phi)

    G = pseudo_curvature(Hf, conn, ops).coeff
    R = chern_curvature(Hf).coeff
    trace_gap = trace(G) / (1 + abs(lam) ** 2) - trace(R)
    adjoint_gap = ops.K @ Phi - adjoint(Theta) @ ops.K

    return FlatnessReport(
        flat_identity=_sup(flat / area, mask),
        curvature_identity=_sup(curvature / area, mask),
        trace_identity=_sup(trace_gap / area[..., 0, 0], mask),
        adjoint_identity=_sup(adjoint_gap, mask),
    )


def lambda_connection_end(s: np.ndarray, Hf: GridMetricField, conn: ConnectionModel) -> Tuple[GridFormField, GridFormField]:
    """D^lambda s = (lambda d_w s + [A, s]) dw + (d_wbar s) dw-bar for an End(E)-valued field"""
    grid = Hf.grid
    A = conn.a_w(grid)
    X = conn.lam * d_w(s, grid) + commutator(A, s)
    Y = d_wbar(s, grid)
    return GridFormField(grid=grid, coeff=X, kind=FormType.ONE_ZERO), GridFormField(grid=grid, coeff=Y, kind=FormType.ZERO_ONE)


def star_operator_end(s: np.ndarray, Hf: GridMetricField, conn: ConnectionModel,
                      ops: Optional[InducedOps] = None) -> Tuple[GridFormField, GridFormField]:
    """D^{lambda*}_h s = delta'_h s - delta''_h s"""
    grid = Hf.grid
    ops = ops or induced_ops(Hf, conn)
    U = d_w(s, grid) + commutator(ops.B, s)
    V = -(np.conj(conn.lam) * d_wbar(s, grid) + commutator(ops.C, s))
    return GridFormField(grid=grid, coeff=U, kind=FormType.ONE_ZERO), GridFormField(grid=grid, coeff=V, kind=FormType.ZERO_ONE)


def scalar_laplacian(f: np.ndarray, grid: LogPolarGrid, lam: complex, weight: np.ndarray) -> np.ndarray:
    """Delta^lambda on functions: -(1 + |lambda|^2) Delta_xy f / (4 |z|^2 w)"""
    return -(1 + abs(lam) ** 2) * laplacian_xy(f, grid) / (4 * grid.abs_z ** 2 * weight)


class MetricChangeReport(BaseModel):
    residual: float
    trace_residual: float
    inequality_excess: float
    inequality_slack: float
    inequality_holds: bool


def metric_change_residual(H1f: GridMetricField, H2f: GridMetricField, conn: ConnectionModel,
                           weight: np.ndarray) -> MetricChangeReport:
    """
    With h2 = h1 s: residual of
    Delta s = s (Lambda G(h2) - Lambda G(h1)) + Lambda(D^lambda s s^-1 D^{lambda*} s)
    and the pointwise bound Delta log tr s <= |Lambda G(h1)| + |Lambda G(h2)|.
    """
    grid = H1f.grid
    if H2f.grid != grid:
        raise KmsError("metrics live on different grids")
    K1, K2 = H1f.K, H2f.K
    s = np.linalg.solve(K1, K2)
    kappa, _, _, _ = _eigen(s, K1, 1e-8)
    if np.any(kappa <= 0):
        row, col = (int(v) for v in np.argwhere(kappa.min(axis=-1) <= 0)[0])
        raise KmsError(f"transition endomorphism is not positive at row {row}, col {col}")

    ops1 = induced_ops(H1f, conn)
    G1 = lambda_G(H1f, conn, weight, ops1)
    G2 = lambda_G(H2f, conn, weight)
    X, Y = (f.coeff for f in lambda_connection_end(s, H1f, conn))
    U, V = (f.coeff for f in star_operator_end(s, H1f, conn, ops1))
    factor = (grid.abs_z ** 2 * weight)[..., None, None]
    lam = conn.lam
    DDs = -d_wbar(U, grid) + lam * d_w(V, grid) + commutator(ops1.A, V)
    s_inv = np.linalg.inv(s)
    residual = DDs / factor - s @ (G2 - G1) - (X @ s_inv @ V - Y @ s_inv @ U) / factor

    mask = grid.interior()
    lhs = scalar_laplacian(np.log(np.real(trace(s))), grid, lam, weight)
    rhs = h_norm(G1, K1) + h_norm(G2, K2)
    excess = float(np.max((lhs - rhs)[mask]))
    slack = 10 * (grid.hx ** 2 + grid.hy ** 2) * max(1.0, float(np.max(np.abs(lhs[mask]))), float(np.max(rhs[mask])))
    return MetricChangeReport(
        residual=_sup(residual, mask),
        trace_residual=_sup(trace(residual), mask),
        inequality_excess=excess,
        inequality_slack=slack,
        inequality_holds=excess <= slack,
    )
