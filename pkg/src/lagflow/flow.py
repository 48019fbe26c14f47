"""Explicit mean curvature flow on periodic grids.

The integrator moves every vertex with the discrete mean curvature vector,
dF/dt = H.  Time steps follow a parabolic CFL rule capped by the curvature,
and a run stops either at a target time or when the grid can no longer
resolve the developing singularity.  In the latter case a
:class:`SingularityReport` estimates the blow-up time T and point X0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import mesh
from .mesh import GeometryCache, Immersion, compute_geometry, wrap_phase

log = logging.getLogger(__name__)

STEP_COLUMNS = ("t", "dt", "volume", "max_A_sq", "min_cos_theta", "max_H")

REACHED_TIME = "reached_time"
RESOLUTION_EXHAUSTED = "resolution_exhausted"
STEP_LIMIT = "step_limit"


class FlowError(RuntimeError):
    """Numerical failure while advancing a flow (nonfinite state)."""


class NoSingularityError(ValueError):
    """Raised by analyses that need a singularity report the trace lacks."""


# ---------------------------------------------------------------------------
# state and controls


class FlowState:
    """An immersion at time ``t`` with lazily computed geometry.

    ``theta_root`` pins the 2 pi k branch of the Lagrangian angle at grid
    vertex 0 so that theta is continuous along a trajectory.
    """

    def __init__(
        self,
        t: float,
        immersion: Immersion,
        order: int = 2,
        theta_root: Optional[float] = None,
    ):
        self.t = float(t)
        self.immersion = immersion
        self.order = order
        self.theta_root = theta_root
        self._geometry: Optional[GeometryCache] = None

    @property
    def geometry(self) -> GeometryCache:
        if self._geometry is None:
            self._geometry = compute_geometry(self.immersion, self.theta_root, self.order)
        return self._geometry

    def geometry_at(self, order: int) -> GeometryCache:
        """Geometry with a specific stencil (same theta branch)."""
        if order == self.order:
            return self.geometry
        return compute_geometry(self.immersion, self.theta_root, order)

    @property
    def positions(self) -> np.ndarray:
        return self.immersion.positions

    def __repr__(self):
        return f"FlowState(t={self.t:.6g}, grid={self.immersion.grid_shape})"


@dataclass
class FlowControls:
    """Integrator settings.

    ``curvature_gain`` stops a run once max|A|^2 exceeds that multiple of
    its initial value; it is the part of the resolution budget that
    applies to self-similar shrinkers (whose max|A| * h_min is constant).
    ``order`` is the stencil used for the mean curvature during the flow.
    """

    cfl: float = 0.2
    method: str = "rk2"
    order: int = 4
    snapshot_every: int = 50
    resolution_budget: float = 0.5
    curvature_gain: Optional[float] = 100.0
    fit_fraction: float = 0.2
    max_steps: Optional[int] = None
    redistribute_every: int = 0

    def __post_init__(self):
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")
        if self.method not in ("euler", "rk2"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.order not in (2, 4):
            raise ValueError("order must be 2 or 4")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if not 0 < self.fit_fraction <= 1:
            raise ValueError("fit_fraction must lie in (0, 1]")


@dataclass
class SingularityReport:
    T: float
    X0: np.ndarray
    X0_raw: np.ndarray
    t: np.ndarray
    indicator: np.ndarray
    fit_slope: float
    fit_residual: float
    reliable: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "estimated_T": self.T,
            "X0": [float(x) for x in self.X0],
            "X0_raw": [float(x) for x in self.X0_raw],
            "fit_slope": self.fit_slope,
            "fit_residual": self.fit_residual,
            "reliable": self.reliable,
            "note": self.note,
        }


@dataclass
class FlowTrace:
    snapshots: List[FlowState]
    step_log: np.ndarray
    initial: dict
    termination: str
    controls: FlowControls
    singularity_report: Optional[SingularityReport] = None
    scenario: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.step_log[:, STEP_COLUMNS.index(name)]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def final(self) -> FlowState:
        return self.snapshots[-1]

    def snapshot_near(self, t: float) -> FlowState:
        return self.snapshots[int(np.argmin(np.abs(self.times - t)))]

    def full_series(self, name: str) -> np.ndarray:
        """Column ``name`` with the initial state prepended."""
        first = 0.0 if name == "dt" else self.initial[name]
        return np.concatenate([[first], self.column(name)])


# ---------------------------------------------------------------------------
# stepping


def stable_dt(h_min: float, max_A_sq: float, cfl: float) -> float:
    if not np.isfinite(max_A_sq) or not np.isfinite(h_min):
        raise FlowError("nonfinite curvature or spacing; cannot choose a time step")
    bound = h_min**2 / 4
    if max_A_sq > 0:
        bound = min(bound, 1.0 / (2.0 * max_A_sq))
    return cfl * bound


def adaptive_dt(geo: GeometryCache, cfl: float = 0.2) -> float:
    """dt = cfl * min(h_min^2 / 4, 1 / (2 max|A|^2))."""
    if not 0 < cfl <= 1:
        raise ValueError("cfl must lie in (0, 1]")
    h_min = mesh.min_spacing(geo.metric, geo.immersion.spacing)
    return stable_dt(h_min, float(np.max(geo.norm_A_sq)), cfl)


def _advance(im: Immersion, dt: float, method: str, order: int, H0=None) -> np.ndarray:
    if H0 is None:
        H0 = mesh.mean_curvature_vector(im, order)
    if method == "euler":
        new = im.positions + dt * H0
    else:
        # Heun's method: the trapezoid rule on an Euler predictor
        trial = im.positions + dt * H0
        if not np.all(np.isfinite(trial)):
            raise FlowError("nonfinite positions in predictor stage")
        H1 = mesh.mean_curvature_vector(im.with_positions(trial), order)
        new = im.positions + 0.5 * dt * (H0 + H1)
    if not np.all(np.isfinite(new)):
        raise FlowError("nonfinite positions after step; dt exceeded the stability bound")
    return new


def step(state: FlowState, dt: float, method: str = "rk2", order: Optional[int] = None) -> FlowState:
    """Advance ``state`` by one explicit step of length ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    order = state.order if order is None else order
    new = _advance(state.immersion, dt, method, order)
    root = state.theta_root
    nxt = FlowState(state.t + dt, state.immersion.with_positions(new), order, None)
    if root is None and state._geometry is not None:
        root = float(state.geometry.theta.flat[0])
    if root is not None:
        nxt.theta_root = root + wrap_phase(_root_phase(nxt.immersion, order) - root)
    return nxt


def _root_phase(im: Immersion, order: int) -> float:
    frame = mesh.tangent_frame(im, order)
    z = mesh.to_complex(frame.reshape(-1, im.n, 2 * im.n)[0])
    return float(np.angle(np.linalg.det(z)))


def redistribute_arclength(im: Immersion) -> Immersion:
    """Resample a curve (n = 1) at equal arclength; the image is unchanged."""
    from scipy.interpolate import CubicSpline

    if im.n != 1:
        raise ValueError("arclength redistribution is only defined for curves")
    N = im.grid_shape[0]
    wrap = im.wraps[0]
    closed = np.vstack([im.positions, im.positions[:1] + wrap])
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
    L = s[-1]
    # the periodic part in s is what the spline interpolates
    periodic = closed - np.outer(s / L, wrap)
    spline = CubicSpline(s, periodic, bc_type="periodic", axis=0)
    s_new = np.arange(N) * (L / N)
    return im.with_positions(spline(s_new) + np.outer(s_new / L, wrap))


# ---------------------------------------------------------------------------
# driver


def run(
    im: Immersion,
    until: Union[float, str] = "singularity",
    controls: Optional[FlowControls] = None,
    scenario: Optional[dict] = None,
) -> FlowTrace:
    """Integrate the flow from ``im``.

    ``until`` is a final time or ``"singularity"``.  The run ends with
    ``reached_time`` or, when the curvature outgrows the grid, with
    ``resolution_exhausted`` and a singularity report.
    """
    controls = controls or FlowControls()
    if isinstance(until, str):
        if until != "singularity":
            raise ValueError("until must be a time or 'singularity'")
        t_end = math.inf
    else:
        t_end = float(until)
        if t_end < 0:
            raise ValueError("until must be nonnegative")
    order, method = controls.order, controls.method

    state0 = FlowState(0.0, im, order)
    theta_root = float(state0.geometry.theta.flat[0])
    state0.theta_root = theta_root
    diag = mesh.flow_diagnostics(im, order, with_H=True)
    initial = {k: diag[k] for k in STEP_COLUMNS[2:]}
    initial["t"] = 0.0
    max_A0 = diag["max_A_sq"]

    snapshots = [state0]
    rows = []
    t = 0.0
    termination = REACHED_TIME
    n_steps = 0
    cur = im
    while t < t_end:
        if controls.max_steps is not None and n_steps >= controls.max_steps:
            termination = STEP_LIMIT
            break
        dt = stable_dt(diag["h_min"], diag["max_A_sq"], controls.cfl)
        if t + dt > t_end:
            dt = t_end - t
        new = _advance(cur, dt, method, order, diag["H"])
        if not np.all(np.isfinite(new)):
            raise FlowError(f"step {n_steps + 1} produced non-finite positions at t={t:.6g}")
        cur = cur.with_positions(new)
        n_steps += 1
        if controls.redistribute_every and im.n == 1 and n_steps % controls.redistribute_every == 0:
            cur = redistribute_arclength(cur)
        t = t + dt if t + dt < t_end else t_end
        try:
            diag = mesh.flow_diagnostics(cur, order, with_H=True)
        except mesh.GeometryError as exc:
            raise FlowError(f"step {n_steps} produced a degenerate immersion: {exc}") from exc
        theta_root += wrap_phase(diag["root_phase"] - theta_root)
        rows.append([t, dt] + [diag[k] for k in STEP_COLUMNS[2:]])

        exhausted = math.sqrt(diag["max_A_sq"]) * diag["h_min"] > controls.resolution_budget
        if controls.curvature_gain and max_A0 > 0:
            exhausted |= diag["max_A_sq"] >= controls.curvature_gain * max_A0
        done = exhausted or t >= t_end
        if done or n_steps % controls.snapshot_every == 0:
            snapshots.append(FlowState(t, cur, order, theta_root))
        if exhausted:
            termination = RESOLUTION_EXHAUSTED
            break

    step_log = np.array(rows, dtype=float).reshape(-1, len(STEP_COLUMNS))
    trace = FlowTrace(snapshots, step_log, initial, termination, controls, None, dict(scenario or {}))
    log.info("flow finished: %s after %d steps at t=%.6g", termination, n_steps, t)
    if termination == RESOLUTION_EXHAUSTED:
        trace.singularity_report = estimate_singularity(trace)
    return trace


def estimate_singularity(trace: FlowTrace) -> SingularityReport:
    """Fit 1/max|A|^2 = a (T - t) on the trailing steps and locate X0.

    X0 is first taken as the vertex of largest |A| in the last snapshot.
    Its trajectory over the last two snapshots is then extrapolated
    linearly in sigma = sqrt(T - t) to sigma = 0, which removes the
    O(sqrt(T - t)) offset of a vertex that is still shrinking towards X0.
    """
    ctl = trace.controls
    t = trace.column("t")
    y = 1.0 / trace.column("max_A_sq")
    m = max(5, int(math.ceil(ctl.fit_fraction * len(t))))
    tt, yy = t[-m:], y[-m:]
    slope, intercept = np.polyfit(tt, yy, 1)
    reliable = True
    notes = []
    if len(t) < 5:
        reliable = False
        notes.append("too few steps for a fit")
    if not slope < 0:
        reliable = False
        notes.append("1/max|A|^2 is not decreasing in the fit window")
    elif np.any(np.diff(yy) > 1e-12 * np.max(np.abs(yy))):
        reliable = False
        notes.append("1/max|A|^2 is not monotone in the fit window")
    T = -intercept / slope if slope != 0 else math.inf
    fit = slope * tt + intercept
    resid = float(np.sqrt(np.mean((fit - yy) ** 2)) / max(np.max(np.abs(yy)), 1e-300))

    last = trace.snapshots[-1]
    geo = last.geometry
    idx = int(np.argmax(geo.norm_A_sq))
    X0_raw = last.positions.reshape(-1, 2 * last.immersion.n)[idx].copy()
    X0 = X0_raw.copy()
    if len(trace.snapshots) >= 2 and np.isfinite(T):
        prev = trace.snapshots[-2]
        if prev.t < last.t < T:
            p1 = prev.positions.reshape(-1, X0.size)[idx]
            s1, s2 = math.sqrt(T - prev.t), math.sqrt(T - last.t)
            X0 = X0_raw - s2 * (p1 - X0_raw) / (s1 - s2)
        else:
            notes.append("X0 not extrapolated (snapshot times past estimated T)")

    keep = t < T
    indicator = (T - t[keep]) * trace.column("max_A_sq")[keep]
    return SingularityReport(
        T=float(T),
        X0=X0,
        X0_raw=X0_raw,
        t=t[keep],
        indicator=indicator,
        fit_slope=float(-slope),
        fit_residual=resid,
        reliable=reliable,
        note="; ".join(notes),
    )


# ---------------------------------------------------------------------------
# analyses of finished traces


def classify_type(trace: FlowTrace, window=(0.1, 0.9), tolerance: float = 0.2) -> dict:
    """Type I / II decision from (T - t) max|A|^2.

    The plateau is the median of the indicator over the middle of the
    flow (``window`` as fractions of the final time).  Type I requires the
    relative oscillation there to stay below ``tolerance`` and the sup over
    the trailing fit window to stay within the same band.
    """
    rep = trace.singularity_report
    if rep is None:
        raise NoSingularityError("trace has no singularity report")
    out = {"t": rep.t.tolist(), "indicator": rep.indicator.tolist()}
    if not rep.reliable or rep.indicator.size == 0:
        out.update(type="indeterminate", plateau=None, oscillation=None, trailing_sup=None, max_deviation=None)
        return out
    t_final = trace.column("t")[-1]
    mid = (rep.t >= window[0] * t_final) & (rep.t <= window[1] * t_final)
    if not np.any(mid):
        out.update(type="indeterminate", plateau=None, oscillation=None, trailing_sup=None, max_deviation=None)
        return out
    vals = rep.indicator[mid]
    plateau = float(np.median(vals))
    osc = float((vals.max() - vals.min()) / plateau) if plateau > 0 else math.inf
    m = max(1, int(math.ceil(trace.controls.fit_fraction * rep.indicator.size)))
    trailing_sup = float(np.max(rep.indicator[-m:]))
    type_one = np.isfinite(plateau) and osc < tolerance and trailing_sup <= (1 + tolerance) * plateau
    out.update(
        type="I" if type_one else "II",
        plateau=plateau,
        oscillation=osc,
        trailing_sup=trailing_sup,
        max_deviation=float(np.max(np.abs(vals / plateau - 1))) if plateau > 0 else math.inf,
    )
    return out


def _pairs(trace: FlowTrace, pairs):
    snaps = trace.snapshots
    if len(snaps) < 2:
        raise ValueError("need at least two snapshots")
    if pairs is None:
        pairs = range(len(snaps) - 1)
    return [(snaps[k], snaps[k + 1]) for k in pairs]


def _check_same_grid(a: FlowState, b: FlowState):
    if a.immersion.grid_shape != b.immersion.grid_shape:
        raise ValueError("snapshots have different grids")


def _norm(geo: GeometryCache, f):
    return mesh.l2_norm(geo, f)


def _relative(num, scales, floor=1e-12):
    scale = max(scales)
    return num / scale if scale > floor else num


def theta_heat_residual(trace: FlowTrace, pairs=None, order: int = 2) -> float:
    """Residual of d(theta)/dt = Laplacian(theta) between snapshots.

    The time derivative is the difference quotient of consecutive
    snapshots, the right-hand side the average of the two endpoint
    Laplacians.  Each pair is normalised by the largest of the two sides
    and the curvature scale |||A|^2|| (which has the units of a Laplacian
    and keeps the ratio meaningful when both sides vanish, as on shrinkers
    whose angle is static); the maximum over pairs is returned.  When
    every scale is below 1e-12 (a flat sheet) the absolute residual is
    used instead, so round-off is not divided by round-off.
    """
    worst = 0.0
    for a, b in _pairs(trace, pairs):
        _check_same_grid(a, b)
        ga, gb = a.geometry_at(order), b.geometry_at(order)
        if np.max(np.abs(gb.theta - ga.theta)) > math.pi:
            raise ValueError("theta branch mismatch between snapshots")
        dt = b.t - a.t
        dth = (gb.theta - ga.theta) / dt
        lap = 0.5 * (ga.laplacian(ga.theta, phase=True) + gb.laplacian(gb.theta, phase=True))
        num = _norm(ga, dth - lap)
        scales = [_norm(ga, dth), _norm(ga, lap), _norm(ga, ga.norm_A_sq)]
        worst = max(worst, _relative(num, scales))
    return float(worst)


def cos_theta_reaction_residual(trace: FlowTrace, pairs=None, order: int = 2) -> float:
    """Residual of d(cos theta)/dt = Laplacian(cos theta) + |H|^2 cos theta.

    Normalised per pair by the largest of the three terms and the
    curvature scale, as in :func:`theta_heat_residual`.
    """
    worst = 0.0
    for a, b in _pairs(trace, pairs):
        _check_same_grid(a, b)
        ga, gb = a.geometry_at(order), b.geometry_at(order)
        dt = b.t - a.t
        dv = (gb.cos_theta - ga.cos_theta) / dt
        lap = 0.5 * (ga.laplacian(ga.cos_theta) + gb.laplacian(gb.cos_theta))
        react = 0.5 * (ga.mean_curvature_sq * ga.cos_theta + gb.mean_curvature_sq * gb.cos_theta)
        num = _norm(ga, dv - lap - react)
        scales = [_norm(ga, dv), _norm(ga, lap), _norm(ga, react), _norm(ga, ga.norm_A_sq)]
        worst = max(worst, _relative(num, scales))
    return float(worst)


def shrinker_radius(t, r0: float = 1.0):
    """sqrt(r0^2 - 2t): factor radius of a shrinking circle or Clifford torus."""
    return np.sqrt(np.maximum(r0**2 - 2 * np.asarray(t, dtype=float), 0.0))


def factor_radii(im: Immersion) -> np.ndarray:
    """Mean distance from the origin in each complex coordinate plane."""
    n = im.n
    pos = im.positions.reshape(-1, 2 * n)
    return np.array([np.mean(np.hypot(pos[:, j], pos[:, n + j])) for j in range(n)])


def radius_law_error(trace: FlowTrace, r0: float = 1.0, r_min: float = 0.2) -> float:
    """Max relative deviation of snapshot factor radii from sqrt(r0^2 - 2t)."""
    worst = 0.0
    for s in trace.snapshots:
        exact = float(shrinker_radius(s.t, r0))
        if exact <= r_min:
            continue
        err = np.max(np.abs(factor_radii(s.immersion) / exact - 1))
        worst = max(worst, float(err))
    return worst


def lagrangian_drift(trace: FlowTrace) -> np.ndarray:
    return np.array([mesh.lagrangian_residual(s.immersion) for s in trace.snapshots])
