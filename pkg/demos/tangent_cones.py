"""Tangent-cone analysis on a curved shrinker and on a synthetic cone.

The Clifford torus is its own blow-up: the rescaled flow is static and
curved, so no union of planes fits it.  A union of two transverse
Lagrangian planes with equal cos theta is recovered exactly, together
with a complex structure that makes both planes complex lines.
"""

import numpy as np

from lagflow import blowup, flow, mesh, monitors, synthetic

trace = flow.run(mesh.clifford_torus(1.0, 32), controls=flow.FlowControls(snapshot_every=10))
seq = blowup.time_rescale(trace)
print(f"Clifford: {len(seq)} rescaled clouds, self-shrinker residual "
      f"{max(blowup.self_shrinker_residual(c) for c in seq):.1e}")
cluster = blowup.fit_planes(seq[-1])
print(f"  plane-like: {cluster.plane_like} (unassigned weight {cluster.unassigned_fraction:.2f})")
vd = monitors.volume_density_bound(trace, R=2.0)
print(f"  volume density over lambda = {vd.lambdas}: spread {vd.spread:.4f}")

bases = synthetic.jprime_lagrangian_pair(0.8)
cloud = synthetic.two_plane_union(bases)
pair = blowup.fit_planes(cloud)
print(f"plane pair: {len(pair.planes)} planes, multiplicities {[p.multiplicity for p in pair.planes]}")
print(f"  cos theta per plane {[round(p.cos_theta, 6) for p in pair.planes]}")
wit = blowup.complex_structure_witness(pair)
print(f"  witness found: {wit['found']}, residuals {wit['residuals']}")
print(f"  density ratios {blowup.density_ratio(cloud, np.zeros(4), [0.5, 1.0, 1.5], width=0.25)}")
