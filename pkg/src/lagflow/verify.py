"""Named property suites with machine-readable pass/fail results.

Each suite runs a fixed list of checks against reference scenarios and
returns :class:`CheckResult` records sorted by check id.  Bounds come from
``data/tolerances.json`` and may be overridden per check in the config.
Expected values for exact solutions come from closed-form laws or from
:func:`oracle_quadrature`, which does not use the mesh code.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Callable, Dict, List, Optional

import numpy as np

from . import blowup, flow, mesh, monitors, synthetic
from .flow import FlowControls

log = logging.getLogger(__name__)

SUITES = ("geometry", "flow_exact", "monotonicity", "rescaling", "tangent_cone", "type_classification")

DEFAULT_CONFIG = {
    "resolutions": {"circle": 128, "clifford": 64, "graph": 32, "graph_fine": 64},
    "cfl": 0.2,
    "seed": 0,
    "tolerances": {},
}


class UnknownSuiteError(KeyError):
    pass


class OracleError(ArithmeticError):
    pass


@dataclass
class CheckResult:
    check_id: str
    scenario: str
    value: float
    bound: float
    margin: float
    status: str
    reason: str = ""
    provenance: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def load_tolerances() -> Dict[str, float]:
    text = resources.files("lagflow").joinpath("data/tolerances.json").read_text()
    return json.loads(text)["bounds"]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LAGFLOW_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# oracles (independent of the grid code)


def _refine(fn: Callable[[int], float], base: int, refinement: int, tol: float) -> float:
    coarse, fine = fn(base), fn(base * refinement)
    if abs(fine - coarse) > tol * max(1.0, abs(fine)):
        raise OracleError(f"quadrature not converged: {coarse!r} vs {fine!r}")
    return fine


def oracle_quadrature(name: str, refinement: int = 2, n: int = 2, tol: float = 1e-9) -> float:
    """Closed-form integrals evaluated by refined trapezoid quadrature.

    ``circle_density`` / ``clifford_density``: Gaussian density of the
    shrinking circle / Clifford torus at its singular point, evaluated at
    a time with tau = T - t = 1/2.  ``c_n``: 2 int_0^inf exp(-y^2) y^(n+1) dy.
    ``plane_gaussian_mass``: integral of the backward heat kernel over R^n.
    """
    if refinement < 2:
        raise ValueError("refinement must be >= 2")
    tau = 0.5

    def circle(m: int) -> float:
        r = math.sqrt(2 * tau)
        u = np.linspace(0, 2 * math.pi, m, endpoint=False)
        pts = np.stack([r * np.cos(u), r * np.sin(u)], axis=-1)
        k = np.exp(-np.sum(pts**2, axis=1) / (4 * tau)) / math.sqrt(4 * math.pi * tau)
        return float(np.sum(k) * r * 2 * math.pi / m)

    def clifford(m: int) -> float:
        r = math.sqrt(2 * tau)  # each factor circle has radius sqrt(2 tau)
        u = np.linspace(0, 2 * math.pi, m, endpoint=False)
        uu, vv = np.meshgrid(u, u, indexing="ij")
        sq = (r * np.cos(uu)) ** 2 + (r * np.sin(uu)) ** 2 + (r * np.cos(vv)) ** 2 + (r * np.sin(vv)) ** 2
        k = np.exp(-sq / (4 * tau)) / (4 * math.pi * tau)
        return float(np.sum(k) * (r * 2 * math.pi / m) ** 2)

    def c_n(m: int) -> float:
        y = np.linspace(0.0, 12.0, m + 1)
        return float(2 * np.trapezoid(np.exp(-(y**2)) * y ** (n + 1), y))

    def plane(m: int) -> float:
        x = np.linspace(-30.0, 30.0, m + 1)
        one = float(np.trapezoid(np.exp(-(x**2) / (4 * tau)), x) / math.sqrt(4 * math.pi * tau))
        return one**n

    table = {
        "circle_density": (circle, 64),
        "clifford_density": (clifford, 64),
        "c_n": (c_n, 4000),
        "plane_gaussian_mass": (plane, 400),
    }
    if name not in table:
        raise ValueError(f"unknown oracle {name!r}; choose from {sorted(table)}")
    fn, base = table[name]
    return _refine(fn, base, refinement, tol)


# ---------------------------------------------------------------------------
# check plumbing


class _Context:
    """Per-run cache of flows and derived objects so suites share expensive work."""

    def __init__(self, config: dict):
        cfg = json.loads(json.dumps(DEFAULT_CONFIG))
        for key, val in (config or {}).items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
        self.config = cfg
        self.bounds = load_tolerances()
        self.bounds.update(cfg.get("tolerances", {}))
        self._cache: dict = {}
        self._lock = threading.RLock()

    def res(self, key: str) -> int:
        return int(self.config["resolutions"][key])

    def cached(self, key, fn):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = fn()
            return self._cache[key]

    def controls(self, **kw) -> FlowControls:
        return FlowControls(cfl=float(self.config["cfl"]), **kw)

    # flows
    def shrinker(self, name: str):
        def go():
            if name == "circle":
                im = mesh.circle(1.0, self.res("circle"))
            else:
                im = mesh.clifford_torus(1.0, self.res("clifford"))
            return flow.run(im, controls=self.controls(snapshot_every=10), scenario={"name": name, "r0": 1.0})

        return self.cached(("shrinker", name), go)

    def graph(self, key: str = "graph", until: float = 1.0, every: int = 1):
        def go():
            im = mesh.lagrangian_graph(0.1, 0.1, self.res(key))
            return flow.run(
                im, until=until, controls=self.controls(snapshot_every=every), scenario={"name": "lagrangian_graph"}
            )

        return self.cached(("graph", key, until, every), go)


def _result(ctx: _Context, check_id: str, scenario: str, value: float, kind: str = "upper", provenance: str = "") -> CheckResult:
    bound = float(ctx.bounds[check_id])
    value = float(value)
    margin = bound - value if kind == "upper" else value - bound
    if not math.isfinite(value):
        status = "fail"
    else:
        status = "pass" if margin >= 0 else "fail"
    return CheckResult(check_id, scenario, value, bound, float(margin), status, "", provenance)


def _skipped(ctx: _Context, check_id: str, scenario: str, reason: str) -> CheckResult:
    bound = float(ctx.bounds.get(check_id, math.nan))
    return CheckResult(check_id, scenario, math.nan, bound, math.nan, "skipped", reason, "")


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------------------
# suites


def _geometry(ctx: _Context) -> List[CheckResult]:
    out = []
    N = ctx.res("circle")
    geo = mesh.compute_geometry(mesh.circle(1.0, N))
    out.append(_result(ctx, "geometry.angle_gradient.circle", f"circle(1,{N})", mesh.angle_gradient_residual(geo)))
    out.append(
        _result(ctx, "geometry.curvature_law.circle", f"circle(1,{N})", float(np.max(np.abs(geo.norm_A_sq - 1))), provenance="closed form |A|^2 = 1/r^2")
    )
    Nc = 2 * ctx.res("clifford")
    cg = mesh.compute_geometry(mesh.clifford_torus(1.0, Nc))
    out.append(_result(ctx, "geometry.angle_gradient.clifford", f"clifford_torus(1,{Nc})", mesh.angle_gradient_residual(cg)))
    theta_err = float(np.max(np.abs(np.cos(cg.theta) - np.cos(cg.immersion.parameters()[0] + cg.immersion.parameters()[1] + np.pi))))
    out.append(_result(ctx, "geometry.theta_law.clifford", f"clifford_torus(1,{Nc})", theta_err, provenance="closed form theta = u + v + pi"))
    out.append(_result(ctx, "geometry.lagrangian.clifford", f"clifford_torus(1,{Nc})", mesh.lagrangian_residual(cg.immersion)))
    out.append(
        _result(ctx, "geometry.nonlagrangian_detected", "nonlagrangian_graph(0.1)", mesh.lagrangian_residual(mesh.nonlagrangian_graph(0.1, 32)), kind="lower")
    )
    rng = np.random.default_rng(int(ctx.config["seed"]))
    U = mesh.random_unitary(2, rng)
    im = mesh.lagrangian_graph(0.1, 0.1, 32)
    ga, gb = mesh.compute_geometry(im), mesh.compute_geometry(im.transformed(U))
    det_u = np.linalg.det(U[:2, :2] + 1j * U[2:, :2])
    phase_err = np.abs(np.exp(1j * gb.theta) - det_u * np.exp(1j * ga.theta))
    inv = max(float(np.max(np.abs(ga.norm_A_sq - gb.norm_A_sq))), float(np.max(phase_err)))
    out.append(_result(ctx, "geometry.unitary_invariance", "lagrangian_graph(0.1,0.1,32)", inv))
    return out


def _flow_exact(ctx: _Context) -> List[CheckResult]:
    out = []
    for name in ("circle", "clifford"):
        tr = ctx.shrinker(name)
        label = f"{name}(1,{ctx.res(name)})"
        out.append(_result(ctx, f"flow_exact.radius_law.{name}", label, flow.radius_law_error(tr), provenance="r(t) = sqrt(1 - 2t)"))
        out.append(_result(ctx, f"flow_exact.blowup_time.{name}", label, _rel(tr.singularity_report.T, 0.5), provenance="T = r0^2 / 2"))
        out.append(_result(ctx, f"flow_exact.center.{name}", label, float(np.linalg.norm(tr.singularity_report.X0))))
    g = ctx.graph()
    mins = g.full_series("min_cos_theta")
    drop = float(max(0.0, -np.min(np.diff(mins)))) if mins.size > 1 else 0.0
    out.append(_result(ctx, "flow_exact.max_principle.lagrangian_graph", "lagrangian_graph(0.1,0.1)", drop))
    vol = g.full_series("volume")
    out.append(_result(ctx, "flow_exact.volume_decrease.lagrangian_graph", "lagrangian_graph(0.1,0.1)", float(max(0.0, np.max(np.diff(vol))))))
    out.append(_result(ctx, "flow_exact.lagrangian_drift.clifford", label, float(np.max(flow.lagrangian_drift(ctx.shrinker("clifford"))))))
    return out


def _type_classification(ctx: _Context) -> List[CheckResult]:
    out = []
    for name, plateau in (("circle", 0.5), ("clifford", 1.0)):
        tr = ctx.shrinker(name)
        cls = flow.classify_type(tr)
        label = f"{name}(1,{ctx.res(name)})"
        out.append(_result(ctx, f"type.plateau.{name}", label, abs(cls["plateau"] - plateau) / plateau, provenance="(T - t) max|A|^2 = n / 2"))
        out.append(_result(ctx, f"type.middle_deviation.{name}", label, cls["max_deviation"] / plateau))
        out.append(_result(ctx, f"type.is_type_I.{name}", label, 0.0 if cls["type"] == "I" else 1.0))
    return out


def _monotonicity(ctx: _Context) -> List[CheckResult]:
    out = []
    out.append(_result(ctx, "monotonicity.c2", "c(2)", abs(monitors.c_constant(2) - oracle_quadrature("c_n", n=2)), provenance="oracle c_n"))
    for name, oracle in (("circle", "circle_density"), ("clifford", "clifford_density")):
        tr = ctx.shrinker(name)
        rep = tr.singularity_report
        phi = monitors.gaussian_density(tr.snapshots[0], rep.X0, rep.T)
        label = f"{name}(1,{ctx.res(name)})"
        out.append(_result(ctx, f"monotonicity.gaussian_density.{name}", label, _rel(phi, oracle_quadrature(oracle)), provenance=f"oracle {oracle}"))
        out.append(_result(ctx, f"monotonicity.density_exceeds_one.{name}", label, phi, kind="lower"))
        try:
            monitors.weighted_psi(tr.snapshots[0], monitors.KernelSpec(tuple(rep.X0), rep.T))
            refused = 0.0
        except monitors.PreconditionError:
            refused = 1.0
        out.append(_result(ctx, f"monotonicity.psi_refuses.{name}", label, refused, kind="lower"))
    spec = monitors.KernelSpec((math.pi, math.pi, 0.0, 0.0), 2.0)
    coarse = ctx.graph("graph", until=0.2)
    fine = ctx.graph("graph_fine", until=0.2, every=4)
    hs = [2 * math.pi / ctx.res("graph"), 2 * math.pi / ctx.res("graph_fine")]
    c_ref, _, _ = monitors.calibrate_c_ref(
        [monitors.psi_monotonicity_report(coarse, spec), monitors.psi_monotonicity_report(fine, spec)], hs
    )
    report = monitors.psi_monotonicity_report(ctx.graph(), spec, c_ref=c_ref)
    label = f"lagrangian_graph(0.1,0.1,{ctx.res('graph')})"
    frac_mono = float(np.mean(report.rate <= report.tol_disc))
    out.append(_result(ctx, "monotonicity.psi_nonincreasing", label, frac_mono, kind="lower"))
    out.append(_result(ctx, "monotonicity.psi_inequality_fraction", label, report.inequality_fraction, kind="lower"))
    out.append(_result(ctx, "monotonicity.first_variation", label, monitors.first_variation_residual(ctx.graph(), spec)))
    plane = flow.FlowState(0.0, mesh.flat_plane(32, 0.0, 40.0))
    out.append(
        _result(ctx, "monotonicity.plane_density", "flat_plane", abs(monitors.gaussian_density(plane, np.zeros(4), 1.0) - oracle_quadrature("plane_gaussian_mass")), provenance="oracle plane_gaussian_mass")
    )
    return out


def _rescaling(ctx: _Context) -> List[CheckResult]:
    out = []
    for name in ("circle", "clifford"):
        tr = ctx.shrinker(name)
        label = f"{name}(1,{ctx.res(name)})"
        seq = blowup.time_rescale(tr)
        radius = 1.0 if name == "circle" else math.sqrt(2.0)
        dev = max(float(np.max(np.abs(np.linalg.norm(c.points, axis=1) - radius))) for c in seq)
        out.append(_result(ctx, f"rescaling.static_cloud.{name}", label, dev, provenance="exact shrinker"))
        errs = blowup.scaling_identity_errors(tr, seq)
        out.append(_result(ctx, f"rescaling.scaling_identities.{name}", label, max(errs.values())))
        out.append(_result(ctx, f"rescaling.flow_residual.{name}", label, blowup.rescaled_flow_residual(seq)))
        out.append(_result(ctx, f"rescaling.self_shrinker.{name}", label, max(blowup.self_shrinker_residual(c) for c in seq)))
        out.append(_result(ctx, f"rescaling.theta_identity.{name}", label, blowup.rescaled_theta_identity(seq)))
    tr = ctx.shrinker("clifford")
    vd = monitors.volume_density_bound(tr, R=2.0)
    out.append(_result(ctx, "rescaling.volume_density_spread.clifford", f"clifford(1,{ctx.res('clifford')})", vd.spread))
    return out


def _tangent_cone(ctx: _Context) -> List[CheckResult]:
    out = []
    bases = synthetic.jprime_lagrangian_pair(0.8)
    cloud = synthetic.two_plane_union(bases)
    cluster = blowup.fit_planes(cloud)
    label = "synthetic plane pair (cos theta = 0.8)"
    out.append(_result(ctx, "tangent_cone.plane_count", label, abs(len(cluster.planes) - 2)))
    err = 0.0
    for p in cluster.planes:
        err = max(err, min(float(np.max(blowup.principal_angles(p.basis, b))) for b in bases))
    if not cluster.planes:
        err = math.inf
    out.append(_result(ctx, "tangent_cone.principal_angle", label, err))
    out.append(_result(ctx, "tangent_cone.multiplicity", label, max((abs(p.multiplicity - 1) for p in cluster.planes), default=math.inf)))
    out.append(_result(ctx, "tangent_cone.angle_constancy", label, blowup.angle_constancy(cloud, 0.5)["oscillation"]))
    wit = blowup.complex_structure_witness(cluster)
    out.append(_result(ctx, "tangent_cone.witness_residual", label, max(wit.get("residuals", [math.inf])) if wit["found"] else math.inf))
    dup = blowup.fit_planes(synthetic.duplicated_plane())
    out.append(_result(ctx, "tangent_cone.duplicated_multiplicity", "duplicated plane", abs(dup.planes[0].multiplicity - 2) if len(dup.planes) == 1 else math.inf))
    ratios = blowup.density_ratio(synthetic.plane_cloud(synthetic.lagrangian_plane(0.3)), np.zeros(4), [0.5, 0.75, 1.0, 1.5], width=0.25)
    out.append(_result(ctx, "tangent_cone.density_monotone", "plane", float(max(0.0, -np.min(np.diff(ratios))))))
    seq = blowup.time_rescale(ctx.shrinker("clifford"))
    cl = blowup.fit_planes(seq[-1])
    out.append(_result(ctx, "tangent_cone.clifford_not_planar", f"clifford(1,{ctx.res('clifford')})", cl.unassigned_fraction, kind="lower"))
    return out


_SUITE_FUNCS = {
    "geometry": _geometry,
    "flow_exact": _flow_exact,
    "monotonicity": _monotonicity,
    "rescaling": _rescaling,
    "tangent_cone": _tangent_cone,
    "type_classification": _type_classification,
}


def run_suite(name: str, config: Optional[dict] = None, context: Optional[_Context] = None) -> List[CheckResult]:
    """Run one named suite; results are sorted by check id."""
    if name not in _SUITE_FUNCS:
        raise UnknownSuiteError(f"unknown suite {name!r}; choose from {list(SUITES)}")
    ctx = context or _Context(config or {})
    results = _SUITE_FUNCS[name](ctx)
    return sorted(results, key=lambda r: r.check_id)


def run_suites(names, config: Optional[dict] = None) -> List[CheckResult]:
    """Run several suites sharing one cache; up to LAGFLOW_THREADS in parallel."""
    names = list(names)
    for name in names:
        if name not in _SUITE_FUNCS:
            raise UnknownSuiteError(f"unknown suite {name!r}; choose from {list(SUITES)}")
    ctx = _Context(config or {})
    workers = min(_threads(), len(names)) or 1
    if workers == 1:
        chunks = [run_suite(n, context=ctx) for n in names]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda n: run_suite(n, context=ctx), names))
    results = [r for chunk in chunks for r in chunk]
    return sorted(results, key=lambda r: r.check_id)


def report_json(results: List[CheckResult]) -> str:
    """Serialised report: stable key order, sorted checks, repr-exact floats."""
    body = {
        "format_version": 1,
        "passed": all(r.status != "fail" for r in results),
        "checks": [r.to_dict() for r in sorted(results, key=lambda r: r.check_id)],
    }
    return json.dumps(body, indent=2, sort_keys=True, allow_nan=True) + "\n"
