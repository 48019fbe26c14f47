import math

import numpy as np
import pytest

from lagflow import flow, mesh, monitors
from lagflow.monitors import KernelSpec, PreconditionError

# Gaussian densities of the self-similar shrinkers, in closed form:
# circle  2 pi r (4 pi tau)^(-1/2) e^(-r^2 / 4 tau)       with r^2 = 2 tau
# Clifford (2 pi r)^2 (4 pi tau)^(-1) e^(-2 r^2 / 4 tau)  with r^2 = 2 tau
CIRCLE_DENSITY = math.sqrt(2 * math.pi / math.e)  # 1.5203469...
CLIFFORD_DENSITY = 2 * math.pi / math.e  # 2.3114546...


def state(im, t=0.0):
    return flow.FlowState(t, im)


def test_c_constant():
    assert monitors.c_constant(2) == pytest.approx(1.0, abs=1e-12)
    assert monitors.c_constant(1) == pytest.approx(math.sqrt(math.pi) / 2, abs=1e-12)
    for n in (1, 2, 3):
        assert monitors.c_constant(n) == pytest.approx(math.gamma(n / 2 + 1), rel=1e-12)
    assert monitors.lower_density_bound(2) == pytest.approx(1 / 8)


def test_quintic_cutoff():
    s = np.linspace(0, 1, 101)
    q = monitors.quintic_step(s)
    assert q[0] == 1.0 and q[-1] == 0.0
    assert np.all(np.diff(q) <= 0)
    assert monitors.quintic_step(-0.5) == 1.0 and monitors.quintic_step(2.0) == 0.0
    # first and second derivatives vanish at both ends
    d = monitors.quintic_step_derivative(s)
    assert d[0] == 0.0 and d[-1] == 0.0
    eps = 1e-4
    assert abs(monitors.quintic_step(eps) - 1) < 20 * eps**3
    assert abs(monitors.quintic_step(1 - eps)) < 20 * eps**3
    # derivative matches a finite difference
    fd = (monitors.quintic_step(s[1:-1] + 1e-6) - monitors.quintic_step(s[1:-1] - 1e-6)) / 2e-6
    assert np.allclose(fd, d[1:-1], atol=1e-6)


def test_kernel_spec_cutoff():
    spec = KernelSpec((0, 0, 0, 0), 1.0, cutoff_radius=0.5)
    X = np.array([[0.4, 0, 0, 0], [0.75, 0, 0, 0], [1.0, 0, 0, 0], [3.0, 0, 0, 0]])
    assert np.allclose(spec.phi(X), [1.0, 0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        spec.tau(1.0)
    with pytest.raises(ValueError):
        KernelSpec((0, 0), 1.0, cutoff_radius=0.0)


def test_plane_densities():
    plane = state(mesh.flat_plane(32, 0.0, 40.0))
    assert monitors.gaussian_density(plane, np.zeros(4), 1.0) == pytest.approx(1.0, abs=1e-10)
    assert monitors.weighted_psi(plane.__class__(0.0, plane.immersion), KernelSpec((0, 0, 0, 0), 1.0)) == pytest.approx(
        1.0, abs=1e-10
    )
    tilted = state(mesh.flat_plane(32, 0.6, 40.0))
    psi = monitors.weighted_psi(tilted, KernelSpec((0, 0, 0, 0), 1.0))
    assert psi == pytest.approx(1 / math.cos(0.6), abs=1e-10)
    # the plane through the centre is a static shrinker: no dissipation
    assert monitors.dissipation(tilted, KernelSpec((0, 0, 0, 0), 1.0)) < 1e-20


@pytest.mark.parametrize("im, value", [(mesh.circle(1.0, 128), CIRCLE_DENSITY), (mesh.clifford_torus(1.0, 32), CLIFFORD_DENSITY)])
def test_shrinker_density(im, value):
    # the area element of the centred-difference frame carries the symbol
    # sin(h)/h per direction; the trapezoid sum is otherwise spectrally exact
    h = 2 * math.pi / im.grid_shape[0]
    phi = monitors.gaussian_density(state(im), np.zeros(2 * im.n), 0.5)
    assert phi == pytest.approx(value * (math.sin(h) / h) ** im.n, rel=1e-12)
    assert phi > 1.0


def test_density_scale_covariance():
    small = monitors.gaussian_density(state(mesh.circle(1.0, 64)), np.zeros(2), 0.8)
    big = monitors.gaussian_density(state(mesh.circle(3.0, 64)), np.zeros(2), 0.8 * 9)
    assert big == pytest.approx(small, rel=1e-10)


def test_psi_refused_where_cos_theta_changes_sign():
    for im in (mesh.circle(1.0, 64), mesh.clifford_torus(1.0, 16)):
        with pytest.raises(PreconditionError):
            monitors.weighted_psi(state(im), KernelSpec(tuple(np.zeros(2 * im.n)), 0.5))


def test_psi_bounds_phi_on_graph(graph_trace):
    spec = KernelSpec((math.pi, math.pi, 0.0, 0.0), 2.0)
    for s in graph_trace.snapshots[::20]:
        assert monitors.weighted_psi(s, spec) >= monitors.gaussian_density(s, cutoff=spec)


def test_cutoff_needs_cos_theta_only_on_support():
    # the circle has cos(theta) <= 0 on half of it; a cutoff ball around a
    # point with cos(theta) > 0 away from the bad arc makes Psi defined
    im = mesh.circle(1.0, 128)
    geo = mesh.compute_geometry(im)
    k = int(np.argmax(geo.cos_theta))
    X0 = im.positions[k]
    spec = KernelSpec(tuple(X0), 0.01, cutoff_radius=0.2)
    assert monitors.weighted_psi(state(im), spec) > 0
    with pytest.raises(PreconditionError):
        monitors.weighted_psi(state(im), KernelSpec(tuple(X0), 0.01, cutoff_radius=1.5))


def test_psi_monotone_on_graph(graph_trace, graph_fine_trace):
    spec = KernelSpec((math.pi, math.pi, 0.0, 0.0), 2.0)
    short = flow.FlowTrace(
        [s for s in graph_trace.snapshots if s.t <= 0.2 + 1e-12],
        graph_trace.step_log,
        graph_trace.initial,
        graph_trace.termination,
        graph_trace.controls,
    )
    reps = [monitors.psi_monotonicity_report(short, spec), monitors.psi_monotonicity_report(graph_fine_trace, spec)]
    c_ref, consts, ratio = monitors.calibrate_c_ref(reps, [2 * math.pi / 32, 2 * math.pi / 64])
    assert c_ref > 0 and c_ref == pytest.approx(2 * max(consts))
    assert ratio > 1.5  # the identity defect shrinks under refinement
    rep = monitors.psi_monotonicity_report(graph_trace, spec, c_ref=c_ref)
    assert rep.nonincreasing
    assert rep.inequality_fraction == 1.0
    assert not rep.refusals
    assert np.all(np.diff(rep.psi) <= 0)
    d = rep.to_dict()
    assert d["inequality_fraction"] == 1.0 and len(d["times"]) == len(rep.times)


def test_first_variation(graph_trace):
    spec = KernelSpec((math.pi, math.pi, 0.0, 0.0), 2.0, cutoff_radius=1.0)
    assert monitors.first_variation_residual(graph_trace, spec) < 1e-3
    assert monitors.first_variation_residual(graph_trace) < 1e-3


def test_smooth_ball_is_exact_on_planes():
    im = mesh.flat_plane(128, 0.0, 8.0)
    geo = mesh.compute_geometry(im)
    pts = im.positions.reshape(-1, 4)
    for radius in (0.5, 1.0, 2.0):
        m = monitors.ball_mass(pts, geo.weights.ravel(), np.zeros(4), radius, 2, width=0.25)
        assert m == pytest.approx(math.pi * radius**2, rel=1e-3)
    sharp = monitors.ball_mass(pts, geo.weights.ravel(), np.zeros(4), 1.0, 2)
    assert abs(sharp - math.pi) > 1e-3  # the sharp count is noisier
    assert monitors.unit_ball_volume(2) == pytest.approx(math.pi)


def test_volume_density_on_clifford(clifford_trace):
    rep = monitors.volume_density_bound(clifford_trace, R=2.0)
    assert rep.bounded(10.0)
    assert rep.spread < 1.01
    assert len(rep.lambdas) == 4
    assert rep.to_dict()["spread"] == rep.spread


def test_volume_density_needs_singularity(graph_trace):
    with pytest.raises(flow.NoSingularityError):
        monitors.volume_density_bound(graph_trace)
