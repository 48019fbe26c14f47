import math

import numpy as np
import pytest

from lagflow import blowup, flow, mesh, synthetic
from lagflow.flow import NoSingularityError


def rotated(cloud, Q):
    return blowup.RescaledCloud(
        cloud.points @ Q.T,
        cloud.weights,
        cloud.tangent @ Q.T,
        cloud.theta,
        cloud.cos_theta,
    )


# ---------------------------------------------------------------------------
# rescalings


def test_lambda_rescale_of_circle(circle_coarse_trace):
    # at T + t / lambda^2 the circle has radius sqrt(-2 t) / lambda, so the
    # rescaled radius is sqrt(-2 t) whatever lambda is
    for lam in (1.0, 2.0, 3.0):
        cl = blowup.lambda_rescale(circle_coarse_trace, lam, -0.25 * lam**2 / 4, X0=np.zeros(2), T=0.5)
        r = np.linalg.norm(cl.points, axis=1)
        assert np.allclose(r, math.sqrt(0.5 * lam**2 / 4), rtol=1e-4)
    cl = blowup.lambda_rescale(circle_coarse_trace, 2.0, -1.0, X0=np.zeros(2), T=0.5)
    assert np.allclose(np.linalg.norm(cl.points, axis=1), math.sqrt(2.0), rtol=1e-4)


def test_lambda_one_is_the_identity(circle_coarse_trace):
    snap = circle_coarse_trace.snapshots[5]
    T = 0.5
    cl = blowup.lambda_rescale(circle_coarse_trace, 1.0, snap.t - T, X0=np.zeros(2), T=T)
    assert np.array_equal(cl.points, snap.positions)


def test_lambda_rescale_arguments(circle_coarse_trace, graph_trace):
    with pytest.raises(ValueError):
        blowup.lambda_rescale(circle_coarse_trace, 0.0, -1.0)
    with pytest.raises(ValueError):
        blowup.lambda_rescale(circle_coarse_trace, 1.0, 0.5)
    with pytest.raises(ValueError):
        blowup.lambda_rescale(circle_coarse_trace, 1.0, -5.0)  # before the flow starts
    with pytest.raises(NoSingularityError):
        blowup.lambda_rescale(graph_trace, 1.0, -0.5)


def test_interpolate_state(circle_coarse_trace):
    tr = circle_coarse_trace
    a, b = tr.snapshots[3], tr.snapshots[4]
    mid = blowup.interpolate_state(tr, 0.5 * (a.t + b.t))
    assert np.allclose(mid.positions, 0.5 * (a.positions + b.positions))
    assert blowup.interpolate_state(tr, a.t) is a


def test_time_rescale_identities(circle_coarse_trace, clifford_coarse_trace):
    for tr, radius in ((circle_coarse_trace, 1.0), (clifford_coarse_trace, math.sqrt(2.0))):
        seq = blowup.time_rescale(tr)
        assert len(seq) > 5
        assert np.all(np.diff([c.scale for c in seq]) > 0)
        assert max(blowup.scaling_identity_errors(tr, seq).values()) < 1e-10
        dev = max(float(np.max(np.abs(np.linalg.norm(c.points, axis=1) - radius))) for c in seq)
        assert dev < 2e-3
        assert blowup.rescaled_flow_residual(seq) < 0.05
        assert max(blowup.self_shrinker_residual(c) for c in seq) < 1e-6


def test_time_rescale_refuses_smooth_flow(graph_trace):
    with pytest.raises(NoSingularityError):
        blowup.time_rescale(graph_trace)
    # an explicit centre is accepted
    seq = blowup.time_rescale(graph_trace, T=2.0, X0=np.zeros(4), stride=50)
    assert seq[0].source["factor"] == pytest.approx(0.5)


def test_self_shrinker_residual_of_translated_plane():
    d = 0.3
    basis = synthetic.lagrangian_plane(0.2)
    normal = mesh.complex_structure(2) @ basis[0]  # J maps Lagrangian tangents to normals
    cloud = synthetic.plane_cloud(basis, N=80, extent=6.0, offset=d * normal)
    res = blowup.self_shrinker_residual(cloud)
    assert res == pytest.approx(d * math.sqrt(blowup.gaussian_mass(cloud)), rel=1e-12)
    assert blowup.gaussian_mass(cloud) == pytest.approx(2 * math.pi * math.exp(-d * d / 2), rel=1e-6)
    assert blowup.self_shrinker_residual(synthetic.plane_cloud(basis)) < 1e-14


def test_gaussian_density_counts_planes_with_multiplicity():
    # a plane through the origin carries Gaussian mass 2*pi, so the density counts sheets
    for cloud, k in ((synthetic.two_plane_union(N=100, extent=8.0), 2), (synthetic.duplicated_plane(N=100, extent=8.0), 2)):
        assert blowup.gaussian_mass(cloud) / (2 * math.pi) == pytest.approx(k, abs=1e-3)
    one = synthetic.plane_cloud(synthetic.lagrangian_plane(0.3), N=100, extent=8.0)
    assert blowup.gaussian_mass(one) / (2 * math.pi) == pytest.approx(1.0, abs=1e-3)


def test_flat_plane_theta_identity_vanishes():
    tr = flow.run(mesh.flat_plane(16, 0.3, 10.0), until=0.05, controls=flow.FlowControls(snapshot_every=2))
    seq = blowup.time_rescale(tr, T=1.0, X0=np.zeros(4))
    assert blowup.rescaled_theta_identity(seq) < 1e-10
    # a static sheet has F~ = e^(s - s0) F~(s0); what is left is the
    # trapezoid-rule error of the exponential
    assert blowup.rescaled_flow_residual(seq) < 1e-4


def test_rescaled_theta_identity_converges(circle_coarse_trace, clifford_coarse_trace):
    assert blowup.rescaled_theta_identity(blowup.time_rescale(circle_coarse_trace)) < 1e-3
    assert blowup.rescaled_theta_identity(blowup.time_rescale(clifford_coarse_trace)) < 1e-2


def test_rescaled_psi_on_planes():
    vals = []
    for theta in (0.0, 0.6):
        cloud = synthetic.plane_cloud(synthetic.lagrangian_plane(theta), N=120, extent=8.0)
        psi, shr, grad, hh = blowup.rescaled_psi(cloud)
        assert psi == pytest.approx(2 * math.pi / math.cos(theta), rel=1e-8)
        assert max(shr, grad, hh) < 1e-25
        vals.append(psi)
    seq = [synthetic.plane_cloud(synthetic.lagrangian_plane(0.6), N=60, extent=8.0) for _ in range(3)]
    for k, c in enumerate(seq):
        c.scale = float(k)
    rep = blowup.rescaled_psi_monotonicity(seq)
    assert np.all(rep.rate == 0.0) and rep.nonincreasing


def test_rescaled_psi_matches_original_on_graph(graph_trace):
    from lagflow import monitors

    spec = monitors.KernelSpec((0.0, 0.0, 0.0, 0.0), 2.0)
    seq = blowup.time_rescale(graph_trace, T=2.0, X0=np.zeros(4), stride=25)
    rep = blowup.rescaled_psi_monotonicity(seq)
    assert rep.nonincreasing and not rep.refusals
    for cl in seq[:3]:
        snap = [s for s in graph_trace.snapshots if s.t == cl.source["t"]][0]
        assert rep.psi[0] > 0
        assert blowup.rescaled_psi(cl)[0] == pytest.approx(2 * math.pi * monitors.weighted_psi(snap, spec), rel=1e-10)


def test_rescaled_psi_refused_on_circle(circle_coarse_trace):
    seq = blowup.time_rescale(circle_coarse_trace, stride=10)
    rep = blowup.rescaled_psi_monotonicity(seq)
    assert len(rep.refusals) == len(seq)


# ---------------------------------------------------------------------------
# decay of integrals


def test_decay_vanishes_on_a_plane():
    rep = blowup.integral_decay_report(synthetic.perturbed_plane_provider(0.0, N=32), [1, 2], R=1.5, s1=-1.0, s2=-0.5)
    for key in ("grad_cos", "H", "perp"):
        assert max(getattr(rep, key)) < 1e-25


def test_perturbed_plane_decays_like_lambda_squared():
    rep = blowup.integral_decay_report(synthetic.perturbed_plane_provider(0.1), [2, 4, 8], R=1.5, s1=-1.0, s2=-0.5)
    for key in ("H", "perp"):
        assert all(abs(r - 0.25) < 0.01 for r in rep.ratios(key))
    assert all(0.2 < r < 0.35 for r in rep.ratios("grad_cos"))
    assert [row["lambda"] for row in rep.rows()] == [2.0, 4.0, 8.0]


def test_circle_integrals_do_not_decay(circle_coarse_trace):
    lams = [1.0, 2.0, 4.0]
    lo, hi = -math.inf, math.inf
    for lam in lams:
        a, b = blowup.covered_window(circle_coarse_trace, lam)
        lo, hi = max(lo, a), min(hi, b)
    rep = blowup.integral_decay_report(circle_coarse_trace, lams, R=2.0, s1=lo, s2=hi)
    for key in ("H", "perp"):
        ratios = rep.ratios(key)
        assert all(abs(r - 1) < 0.05 for r in ratios), (key, ratios)
    with pytest.raises(ValueError):
        blowup.integral_decay_report(circle_coarse_trace, lams, R=2.0, s1=-0.1, s2=0.1)


# ---------------------------------------------------------------------------
# densities and plane fitting


def test_density_ratio_of_planes():
    rhos = [0.5, 0.75, 1.0, 1.5]
    one = blowup.density_ratio(synthetic.plane_cloud(synthetic.lagrangian_plane(0.3)), np.zeros(4), rhos, width=0.25)
    assert np.allclose(one, 1.0, atol=2e-3)
    two = blowup.density_ratio(synthetic.two_plane_union(), np.zeros(4), rhos, width=0.25)
    assert np.allclose(two, 2.0, atol=4e-3)
    assert blowup.density_monotone(two)
    with pytest.raises(ValueError):
        blowup.density_ratio(synthetic.plane_cloud(synthetic.lagrangian_plane(0.3)), np.full(4, 10.0), rhos)
    with pytest.raises(ValueError):
        blowup.density_ratio(synthetic.plane_cloud(synthetic.lagrangian_plane(0.3)), np.zeros(4), [1.0, 0.5])


def test_density_ratio_of_circle():
    # a ball of radius rho about a point of the unit circle contains the
    # arc of length 4 arcsin(rho / 2), so the ratio is 2 arcsin(rho / 2) / rho
    cloud = blowup.cloud_from_immersion(mesh.circle(1.0, 4096))
    rhos = np.array([0.25, 0.5, 1.0, 1.5])
    got = blowup.density_ratio(cloud, cloud.points[0], rhos)
    assert np.allclose(got, 2 * np.arcsin(rhos / 2) / rhos, atol=2e-3)


def test_fit_planes_on_synthetic_union():
    bases = synthetic.jprime_lagrangian_pair(0.8)
    cluster = blowup.fit_planes(synthetic.two_plane_union(bases))
    assert len(cluster.planes) == 2 and cluster.plane_like
    for p in cluster.planes:
        assert min(float(np.max(blowup.principal_angles(p.basis, b))) for b in bases) < 1e-10
        assert p.multiplicity == 1
        assert p.cos_theta == pytest.approx(0.8, abs=1e-10)
        assert p.residual < 1e-10
    # the pair is transverse
    assert float(np.min(blowup.principal_angles(bases[0], bases[1]))) > 0.1
    assert cluster.to_dict()["method"] == "grassmann"


def test_fit_planes_is_rotation_equivariant(rng):
    cloud = synthetic.two_plane_union()
    base = blowup.fit_planes(cloud)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    moved = blowup.fit_planes(rotated(cloud, Q))
    assert len(moved.planes) == len(base.planes) == 2
    for p in base.planes:
        target = p.basis @ Q.T
        assert min(float(np.max(blowup.principal_angles(target, m.basis))) for m in moved.planes) < 1e-8


def test_fit_planes_multiplicity():
    dup = blowup.fit_planes(synthetic.duplicated_plane())
    assert len(dup.planes) == 1 and dup.planes[0].multiplicity == 2
    one = blowup.fit_planes(synthetic.plane_cloud(synthetic.lagrangian_plane(0.3)))
    assert len(one.planes) == 1 and one.planes[0].multiplicity == 1


def test_curved_clouds_are_not_plane_like(clifford_coarse_trace):
    cl = blowup.fit_planes(blowup.time_rescale(clifford_coarse_trace)[-1])
    assert not cl.plane_like
    assert cl.unassigned_fraction > 0.5
    circle = blowup.fit_planes(blowup.cloud_from_immersion(mesh.circle(1.0, 256)))
    assert not circle.plane_like


def test_principal_angles():
    A = synthetic.lagrangian_plane(0.0)
    assert np.allclose(blowup.principal_angles(A, A), 0.0, atol=1e-12)
    B = synthetic.lagrangian_plane(2 * 0.4)  # e^{0.4 i} R^2
    assert np.allclose(blowup.principal_angles(A, B), [0.4, 0.4], atol=1e-12)
    assert blowup.plane_angle(B) == pytest.approx(0.8)


def test_angle_constancy(graph_trace, clifford_coarse_trace):
    flat = blowup.angle_constancy(synthetic.two_plane_union(), 0.5)
    assert flat["oscillation"] < 1e-12
    g = blowup.angle_constancy(blowup.cloud_from_immersion(graph_trace.final.immersion), 0.5)
    assert g["constant"] is not None and g["oscillation"] <= 2 * g["constant"] * g["gradient_integral"]
    cl = blowup.angle_constancy(blowup.time_rescale(clifford_coarse_trace)[-1], 0.3)
    assert cl["oscillation"] > 1.0


# ---------------------------------------------------------------------------
# complex structures


def test_structures_are_complex():
    for th in (0.3, 0.8, 1.0):
        for J in (blowup.j_star(th), blowup.j_prime(th)):
            assert np.allclose(J @ J, -np.eye(4))
    # with theta0 = 1 the structure J' fixes span(x1, y1)
    assert np.allclose(blowup.j_prime(1.0)[:, [0, 2]][[1, 3]], 0.0)


def test_witness_found_on_jprime_pair():
    cluster = blowup.fit_planes(synthetic.two_plane_union())
    wit = blowup.complex_structure_witness(cluster)
    assert wit["found"] and max(wit["residuals"]) < 1e-10
    assert wit["theta0"] == pytest.approx(0.8)


def test_witness_on_complex_planes():
    cluster = blowup.fit_planes(synthetic.two_plane_union(synthetic.complex_planes(), cos_theta=1.0))
    assert len(cluster.planes) == 2
    assert blowup.complex_structure_witness(cluster)["found"]


def test_witness_refuses_mismatched_angles():
    parts = [synthetic.plane_cloud(synthetic.jprime_lagrangian_pair(0.8)[0]), synthetic.plane_cloud(synthetic.lagrangian_plane(math.acos(0.5)))]
    cluster = blowup.fit_planes(synthetic.union(parts))
    wit = blowup.complex_structure_witness(cluster)
    assert not wit["found"] and "disagree" in wit["reason"]
    assert not blowup.complex_structure_witness(blowup.PlaneCluster([], 1.0))["found"]


def test_witness_rejects_non_invariant_planes():
    # two Lagrangian planes with equal angle that are not J'-complex
    cluster = blowup.fit_planes(synthetic.two_plane_union([synthetic.lagrangian_plane(0.5), synthetic.lagrangian_plane(-0.5)]))
    wit = blowup.complex_structure_witness(cluster, theta0=math.cos(0.5))
    assert not wit["found"]


# ---------------------------------------------------------------------------
# flatness and intrinsic balls


def test_flatness_check(clifford_coarse_trace):
    assert blowup.flatness_check(synthetic.plane_cloud(synthetic.lagrangian_plane(0.3)))["A_L2"] == 0.0
    cluster = blowup.fit_planes(synthetic.two_plane_union())
    assert blowup.flatness_check(cluster)["planes"] == 2
    first = blowup.time_rescale(clifford_coarse_trace)[0]
    assert blowup.flatness_check(first)["max_A_sq"] == pytest.approx(2.0, rel=0.02)
    a = blowup.flatness_check(blowup.cloud_from_immersion(synthetic.perturbed_plane_immersion(0.02)), R=1.5)
    b = blowup.flatness_check(blowup.cloud_from_immersion(synthetic.perturbed_plane_immersion(0.01)), R=1.5)
    assert a["A_L2"] / b["A_L2"] == pytest.approx(2.0, rel=0.01)


def test_isoperimetric_profile():
    cloud = blowup.cloud_from_immersion(mesh.flat_plane(64, 0.0, 8.0))
    prof = blowup.isoperimetric_profile(cloud, 32 * 64 + 32, [0.5, 1.0, 2.0])
    assert np.all(np.diff(prof["area"]) > 0)
    # graph distance with diagonal edges gives octagonal balls, whose area
    # lies between that of the inscribed and circumscribed discs
    for r in prof["ratio"]:
        assert 2.6 < r < 3.6
    circ = blowup.isoperimetric_profile(blowup.cloud_from_immersion(mesh.circle(1.0, 256)), 0, [0.5, 1.0])
    assert circ["ratio"] == pytest.approx([2.0, 2.0], rel=0.02)
    with pytest.raises(ValueError):
        blowup.isoperimetric_profile(synthetic.two_plane_union(), 0, [1.0])
