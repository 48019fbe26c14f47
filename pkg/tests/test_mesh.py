import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagflow import mesh
from lagflow.mesh import GeometryError, ScenarioError


def symbols(h, order):
    """Fourier symbols of the first and second difference stencils at one wave number."""
    if order == 2:
        return math.sin(h) / h, (2 - 2 * math.cos(h)) / h**2
    s1 = (8 * math.sin(h) - math.sin(2 * h)) / (6 * h)
    s2 = (30 - 32 * math.cos(h) + 2 * math.cos(2 * h)) / (12 * h**2)
    return s1, s2


@pytest.mark.parametrize("order", [2, 4])
@pytest.mark.parametrize("N", [32, 64])
def test_circle_curvature_matches_discrete_symbol(N, order):
    # On e^{iu} the stencils act by their symbols, so the discrete curvature
    # of a unit circle is s2 / s1^2 exactly.
    s1, s2 = symbols(2 * math.pi / N, order)
    geo = mesh.compute_geometry(mesh.circle(1.0, N), order=order)
    assert np.allclose(geo.norm_A_sq, (s2 / s1**2) ** 2, rtol=1e-12)
    assert np.allclose(geo.area_element, s1, rtol=1e-12)


def test_clifford_curvature_and_angle():
    N = 64
    s1, s2 = symbols(2 * math.pi / N, 2)
    geo = mesh.compute_geometry(mesh.clifford_torus(1.0, N))
    # frozen from the symbol law: 2 s2^2 / s1^4 = 2.00967...
    assert np.allclose(geo.norm_A_sq, 2 * s2**2 / s1**4, rtol=1e-12)
    assert abs(float(geo.norm_A_sq.mean()) - 2.00967) < 1e-5
    assert np.allclose(geo.mean_curvature_sq, geo.norm_A_sq, rtol=1e-12)
    u, v = geo.immersion.parameters()
    assert np.max(np.abs(np.exp(1j * geo.theta) - np.exp(1j * (u + v + math.pi)))) < 1e-12


def test_circle_radius_scaling():
    geo = mesh.compute_geometry(mesh.circle(0.5, 256), order=4)
    assert np.allclose(geo.norm_A_sq, 4.0, rtol=1e-6)
    assert abs(geo.volume - math.pi) < 1e-6


def test_fourth_order_converges_faster():
    errs = {}
    for N in (32, 64):
        geo = mesh.compute_geometry(mesh.clifford_torus(1.0, N), order=4)
        errs[N] = float(np.max(np.abs(geo.norm_A_sq - 2.0)))
    assert 14 < errs[32] / errs[64] < 18


def test_angle_gradient_identity():
    g1 = mesh.compute_geometry(mesh.circle(1.0, 128))
    g2 = mesh.compute_geometry(mesh.clifford_torus(1.0, 64))
    assert mesh.angle_gradient_residual(g1) < 1e-3
    assert mesh.angle_gradient_residual(g2) < 1e-3
    # second order: one refinement divides the residual by about four
    g3 = mesh.compute_geometry(mesh.circle(1.0, 256))
    assert 3.5 < mesh.angle_gradient_residual(g1) / mesh.angle_gradient_residual(g3) < 4.5


def test_flat_plane_is_flat():
    geo = mesh.compute_geometry(mesh.flat_plane(16, 0.4, 10.0))
    assert np.max(geo.norm_A_sq) < 1e-20
    assert np.allclose(geo.theta, 0.4)
    assert mesh.angle_gradient_residual(geo) < 1e-12


def test_lagrangian_residual():
    assert mesh.lagrangian_residual(mesh.clifford_torus(1.0, 32)) < 1e-14
    assert mesh.lagrangian_residual(mesh.lagrangian_graph(0.1, 0.2, 32)) < 1e-14
    # omega(F_x, F_y) = a cos y; the centred difference gives the factor sin h / h
    h = 2 * math.pi / 32
    val = mesh.lagrangian_residual(mesh.nonlagrangian_graph(0.1, 32))
    assert abs(val - 0.1 * math.sin(h) / h) < 1e-12


def test_second_fundamental_form_traces():
    im = mesh.perturbed_clifford(1.0, 0.1, 32)
    geo = mesh.compute_geometry(im)
    h = geo.second_fundamental_form
    trace = np.einsum("...aii->...a", h)
    H_frame = np.einsum("...ai,...a->...i", geo.normal_frame, trace)
    assert np.max(np.abs(H_frame - geo.mean_curvature)) < 1e-12
    assert np.max(np.abs(np.sum(h**2, axis=(-1, -2, -3)) - geo.norm_A_sq)) < 1e-10
    # h^alpha_ij is fully symmetric on Lagrangians (up to discretisation)
    assert np.max(np.abs(h[..., 0, 0, 1] - h[..., 1, 0, 0])) < 0.05


def test_orthonormal_frame():
    geo = mesh.compute_geometry(mesh.lagrangian_graph(0.2, 0.1, 16))
    E = geo.orthonormal_frame
    gram = np.einsum("...ai,...bi->...ab", E, E)
    assert np.max(np.abs(gram - np.eye(2))) < 1e-12
    N = geo.normal_frame
    assert np.max(np.abs(np.einsum("...ai,...bi->...ab", E, N))) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_unitary_invariance(seed):
    rng = np.random.default_rng(seed)
    U = mesh.random_unitary(2, rng)
    im = mesh.lagrangian_graph(0.1, 0.15, 16)
    ga = mesh.compute_geometry(im)
    gb = mesh.compute_geometry(im.transformed(U, offset=rng.normal(size=4)))
    assert np.max(np.abs(ga.norm_A_sq - gb.norm_A_sq)) < 1e-10
    assert np.max(np.abs(ga.mean_curvature @ U.T - gb.mean_curvature)) < 1e-10
    det_u = np.linalg.det(U[:2, :2] + 1j * U[2:, :2])
    assert np.max(np.abs(np.exp(1j * gb.theta) - det_u * np.exp(1j * ga.theta))) < 1e-10
    assert mesh.lagrangian_residual(im.transformed(U)) < 1e-12


def test_random_unitary_preserves_structure(rng):
    U = mesh.random_unitary(2, rng)
    J = mesh.complex_structure(2)
    assert np.allclose(U.T @ U, np.eye(4))
    assert np.allclose(U @ J, J @ U)


def test_theta_root_selects_branch():
    im = mesh.circle(1.0, 32)
    g0 = mesh.compute_geometry(im)
    g1 = mesh.compute_geometry(im, theta_root=float(g0.theta.flat[0]) + 2 * math.pi)
    assert np.allclose(g1.theta - g0.theta, 2 * math.pi)


def test_branch_jump_raises():
    # a circle wound five times on 16 vertices: the tangent turns by
    # 5 * 2 pi / 16 > pi / 2 between neighbours
    u = np.arange(16) * (2 * math.pi / 16)
    pos = np.stack([np.cos(5 * u), np.sin(5 * u)], axis=-1)
    with pytest.raises(GeometryError):
        mesh.compute_geometry(mesh.Immersion(pos, mesh.AmbientSpace(1)))


def test_degenerate_frame_raises():
    pos = np.zeros((16, 2))
    with pytest.raises(GeometryError):
        mesh.compute_geometry(mesh.Immersion(pos, mesh.AmbientSpace(1)))


def test_flow_diagnostics_agree_with_geometry():
    im = mesh.perturbed_clifford(1.0, 0.1, 32)
    geo = mesh.compute_geometry(im, order=4)
    d = mesh.flow_diagnostics(im, order=4, with_H=True)
    assert abs(d["volume"] - geo.volume) < 1e-12
    assert abs(d["max_A_sq"] - float(np.max(geo.norm_A_sq))) < 1e-10
    assert abs(d["min_cos_theta"] - float(np.min(geo.cos_theta))) < 1e-12
    assert np.max(np.abs(d["H"] - geo.mean_curvature)) < 1e-12
    assert np.max(np.abs(mesh.mean_curvature_vector(im, 4) - geo.mean_curvature)) < 1e-12


def test_laplacian_of_periodic_function():
    geo = mesh.compute_geometry(mesh.flat_plane(64, 0.0, 2 * math.pi))
    f = np.sin(geo.immersion.parameters()[0])
    lap = geo.laplacian(f)
    h = 2 * math.pi / 64
    assert np.allclose(lap, -f * (2 - 2 * math.cos(h)) / h**2, atol=1e-10)


def test_build_scenario_errors():
    with pytest.raises(ScenarioError):
        mesh.build_scenario("torus_knot")
    with pytest.raises(ScenarioError):
        mesh.build_scenario("circle", N=4)
    with pytest.raises(ScenarioError):
        mesh.build_scenario("lagrangian_graph", eps=2.0, delta=1.0)
    with pytest.raises(ScenarioError):
        mesh.build_scenario("circle", radius=1.0)
    im = mesh.build_scenario("circle", r0=2.0, N=32)
    assert im.grid_shape == (32,)


def test_immersion_validation():
    with pytest.raises(ValueError):
        mesh.Immersion(np.zeros((16, 3)), mesh.AmbientSpace(1))
    with pytest.raises(ValueError):
        mesh.Immersion(np.full((16, 2), np.nan), mesh.AmbientSpace(1))
    with pytest.raises(ValueError):
        mesh.AmbientSpace(3)


def test_lift_shifts_cover_reach():
    im = mesh.lagrangian_graph(0.1, 0.1, 16)
    shifts = im.lift_shifts(10.0)
    norms = np.linalg.norm(shifts, axis=1)
    assert np.any(norms == 0)
    assert norms.max() > 10.0
    assert mesh.circle(1.0, 16).lift_shifts(10.0).shape == (1, 2)
