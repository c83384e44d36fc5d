import numpy as np
import pytest
from pydantic import ValidationError
from scipy import linalg

from src.models import KmsError
from src.speccalc import (
    ConnectionModel,
    FormType,
    GridFormField,
    GridMetricField,
    LogPolarGrid,
    chern_curvature,
    check_self_adjoint,
    d_wbar,
    d_w,
    d_x,
    d_y,
    divided_difference,
    flatness_residuals,
    h_norm,
    induced_ops,
    lambda_G,
    lambda_connection_end,
    lambda_trace,
    metric_change_residual,
    pseudo_curvature,
    psi_donaldson,
    scalar_calculus,
    scalar_laplacian,
    star_operator_end,
    two_var_calculus,
)

H = np.array([[2.0, 1.0], [1.0, 3.0]], dtype=complex)


def self_adjoint_example():
    """s = H^-1 A with A hermitian positive, so H s = A is hermitian"""
    A = np.array([[4.0, 1.0 - 1.0j], [1.0 + 1.0j, 2.0]])
    return np.linalg.solve(H, A)


def test_grid_geometry():
    grid = LogPolarGrid()
    assert grid.shape == (64, 64)
    assert grid.x[0] == pytest.approx(np.log(0.1))
    assert grid.x[-1] == pytest.approx(np.log(0.9))
    assert np.sum(grid.quadrature()) == pytest.approx((np.log(0.9) - np.log(0.1)) * 2 * np.pi)
    assert np.allclose(np.abs(grid.z), grid.abs_z)


def test_grid_ranges():
    with pytest.raises(ValidationError):
        LogPolarGrid(r_min=0.5, r_max=0.4)
    with pytest.raises(ValidationError):
        LogPolarGrid(r_max=1.5)
    with pytest.raises(ValidationError):
        LogPolarGrid(n_rad=4)


def test_refined_grid_is_nested():
    grid = LogPolarGrid(n_rad=16, n_ang=16)
    fine = grid.refined()
    assert fine.shape == (31, 32)
    assert np.allclose(fine.x[::2], grid.x)
    assert np.allclose(fine.y[::2], grid.y)


def test_interior_and_annulus_masks(small_grid):
    mask = small_grid.interior()
    assert not mask[:2].any() and not mask[-2:].any()
    assert mask[2:-2].all()
    rows = small_grid.rows_within(0.1, 0.5)
    assert rows[0].all()
    assert not rows[-1].any()


def test_finite_differences():
    grid = LogPolarGrid()
    X, Y = np.meshgrid(grid.x, grid.y, indexing="ij")
    assert np.allclose(d_x(3.0 * X + 1.0, grid), 3.0)
    assert np.allclose(d_y(np.sin(Y), grid), np.cos(Y), atol=5e-3)
    # z = e^w is holomorphic in w: d_w z = z, d_wbar z = 0 up to discretization
    z = grid.z
    interior = grid.interior()
    assert np.max(np.abs(d_wbar(z, grid))[interior] / np.abs(z[interior])) < 1e-2
    assert np.max(np.abs(d_w(z, grid) - z)[interior] / np.abs(z[interior])) < 1e-2


def test_scalar_calculus_matches_matrix_functions():
    s = self_adjoint_example()
    assert np.allclose(scalar_calculus(np.exp, s, H), linalg.expm(s))
    root = scalar_calculus(np.sqrt, s, H)
    assert np.allclose(root @ root, s)
    log = scalar_calculus(np.log, s, H)
    assert np.allclose(linalg.expm(log), s)


def test_scalar_calculus_rejects_non_self_adjoint():
    with pytest.raises(KmsError):
        scalar_calculus(np.exp, np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(2))
    with pytest.raises(KmsError):
        check_self_adjoint(np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(2))


def test_two_var_calculus():
    s = self_adjoint_example()
    A = np.array([[1.0, 2.0 + 1.0j], [-1.0, 0.5j]])
    assert np.allclose(two_var_calculus(lambda t1, t2: np.ones_like(t1), s, A, H), A)
    # Psi = divided difference of exp gives the derivative of exp at s in direction A
    Psi = divided_difference(np.exp, np.exp)
    t = 1e-6
    numeric = (linalg.expm(s + t * A) - linalg.expm(s - t * A)) / (2 * t)
    assert np.allclose(two_var_calculus(Psi, s, A, H), numeric, atol=1e-5)


def test_divided_difference_and_psi():
    Psi = divided_difference(np.exp, np.exp)
    assert Psi(np.array(1.0), np.array(1.0)) == pytest.approx(np.e)
    assert Psi(np.array(0.0), np.array(1.0)) == pytest.approx(np.e - 1)
    assert psi_donaldson(np.array(0.3), np.array(0.3)) == pytest.approx(0.5)
    assert psi_donaldson(np.array(0.0), np.array(1.0)) == pytest.approx(np.e - 2)
    near = psi_donaldson(np.array(0.0), np.array(0.999e-3))
    far = psi_donaldson(np.array(0.0), np.array(1.001e-3))
    assert near == pytest.approx(far, rel=1e-5)


def test_h_norm_is_frobenius_for_identity_metric():
    X = np.array([[1.0, 2.0j], [0.0, -1.0]])
    assert h_norm(X, np.eye(2)) == pytest.approx(np.linalg.norm(X))


def test_metric_field_validation(small_grid):
    with pytest.raises(ValidationError):
        GridMetricField(grid=small_grid, H=-np.broadcast_to(np.eye(2), small_grid.shape + (2, 2)))
    with pytest.raises(ValidationError):
        GridMetricField(grid=small_grid, H=np.ones(small_grid.shape + (2, 3)))
    Hf = GridMetricField(grid=small_grid, H=np.broadcast_to(H, small_grid.shape + (2, 2)))
    assert Hf.rank == 2
    assert np.allclose(Hf.K, np.conj(Hf.H))


def test_connection_model_validation():
    with pytest.raises(ValidationError):
        ConnectionModel(lam=0, residue=[[0.0]])
    with pytest.raises(ValidationError):
        ConnectionModel(lam=1, residue=np.zeros((9, 9)))
    assert ConnectionModel(lam=1, residue=0.5).rank == 1


def rank_one_power_metric(grid, a):
    """K = |z|^(-2a) on the whole annulus"""
    K = np.exp(-2.0 * a * np.log(grid.abs_z))[..., None, None].astype(complex)
    return GridMetricField.from_K(grid, K)


def test_rank_one_power_metric_is_harmonic(medium_grid):
    Hf = rank_one_power_metric(medium_grid, 0.5)
    conn = ConnectionModel(lam=1.0, residue=[[0.25]])
    interior = medium_grid.interior()
    G = lambda_G(Hf, conn, np.ones(medium_grid.shape))
    assert np.max(np.abs(G[interior])) < 1e-8
    assert np.max(np.abs(chern_curvature(Hf).coeff[interior])) < 1e-8


def test_induced_ops_shapes_and_rank_check(small_grid):
    Hf = rank_one_power_metric(small_grid, 0.25)
    ops = induced_ops(Hf, ConnectionModel(lam=1j, residue=[[0.5]]))
    assert ops.theta.kind == FormType.ONE_ZERO
    assert ops.theta_dagger.kind == FormType.ZERO_ONE
    assert ops.theta.coeff.shape == small_grid.shape + (1, 1)
    with pytest.raises(KmsError):
        induced_ops(Hf, ConnectionModel(lam=1, residue=np.zeros((2, 2))))


def test_lambda_trace_requires_one_one_form(small_grid):
    form = GridFormField(grid=small_grid, coeff=np.ones(small_grid.shape + (1, 1)), kind=FormType.ONE_ZERO)
    with pytest.raises(KmsError):
        lambda_trace(form, np.ones(small_grid.shape))


def test_flatness_trace_and_adjoint_identities(medium_grid):
    from src.modelflow import rank2_model

    conn, sampler = rank2_model(1.0, 0.0)
    report = flatness_residuals(sampler(medium_grid), conn)
    assert report.trace_identity < 1e-8
    assert report.adjoint_identity < 1e-8
    assert report.surface_form_identity is None
    assert np.isfinite(report.flat_identity) and np.isfinite(report.curvature_identity)


def test_scalar_laplacian_of_constant(small_grid):
    f = np.full(small_grid.shape, 2.5)
    assert np.allclose(scalar_laplacian(f, small_grid, 1.0, np.ones(small_grid.shape)), 0.0)


def test_metric_change_against_itself(medium_grid):
    from src.modelflow import rank2_model

    conn, sampler = rank2_model(1.0, 0.0)
    Hf = sampler(medium_grid)
    report = metric_change_residual(Hf, Hf, conn, np.ones(medium_grid.shape))
    assert report.residual < 1e-8
    assert report.inequality_holds


def test_self_adjoint_tolerance_from_environment(monkeypatch):
    monkeypatch.setenv("KMS_HODGE_TOL", "10")
    check_self_adjoint(np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(2))
    with pytest.raises(KmsError):
        check_self_adjoint(np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(2), tol=1e-10)


def test_pseudo_curvature_is_the_one_one_form_behind_lambda_G(small_grid):
    from src.modelflow import rank2_model

    conn, sampler = rank2_model(1.0, 0.0)
    Hf = sampler(small_grid)
    weight = np.full(small_grid.shape, 2.0)
    G = pseudo_curvature(Hf, conn)
    assert G.kind == FormType.ONE_ONE
    assert np.allclose(pseudo_curvature(Hf, conn, induced_ops(Hf, conn)).coeff, G.coeff)
    factor = (small_grid.abs_z ** 2 * weight)[..., None, None]
    assert np.allclose(lambda_G(Hf, conn, weight) * factor, G.coeff)


def test_end_operators_on_scalar_fields(small_grid):
    from src.modelflow import rank2_model

    conn, sampler = rank2_model(2j, 0.0)
    Hf = sampler(small_grid)
    f = small_grid.abs_z ** 2 * np.cos(np.angle(small_grid.z))
    s = f[..., None, None] * np.eye(2)

    X, Y = lambda_connection_end(s, Hf, conn)
    assert (X.kind, Y.kind) == (FormType.ONE_ZERO, FormType.ZERO_ONE)
    assert np.allclose(X.coeff, 2j * d_w(s, small_grid))
    assert np.allclose(Y.coeff, d_wbar(s, small_grid))

    U, V = star_operator_end(s, Hf, conn)
    assert np.allclose(U.coeff, d_w(s, small_grid))
    assert np.allclose(V.coeff, 2j * d_wbar(s, small_grid))


def test_end_operators_vanish_on_constant_identity(small_grid):
    from src.modelflow import rank2_model

    conn, sampler = rank2_model(1.0, 0.0)
    Hf = sampler(small_grid)
    s = np.broadcast_to(np.eye(2, dtype=complex), small_grid.shape + (2, 2)).copy()
    for form in lambda_connection_end(s, Hf, conn) + star_operator_end(s, Hf, conn):
        assert np.allclose(form.coeff, 0.0)
