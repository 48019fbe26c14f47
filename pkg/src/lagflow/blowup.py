"""Blow-up analysis: rescaled clouds, shrinker identities and tangent cones.

A :class:`RescaledCloud` is a weighted point sample of a (rescaled)
submanifold that carries its tangent planes and angle, and optionally the
curvature data and the grid immersion it came from.  Clouds are produced
from flow traces by parabolic (``lambda_rescale``) or time-dependent
(``time_rescale``) rescaling, or built synthetically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import mesh
from .flow import FlowState, FlowTrace, NoSingularityError
from .mesh import Immersion, compute_geometry
from .monitors import GAUSS_CUT, PreconditionError, smooth_ball, unit_ball_volume

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# clouds


@dataclass
class RescaledCloud:
    points: np.ndarray
    weights: np.ndarray
    tangent: np.ndarray
    theta: np.ndarray
    cos_theta: np.ndarray
    mean_curvature: Optional[np.ndarray] = None
    grad_cos_theta: Optional[np.ndarray] = None
    norm_A_sq: Optional[np.ndarray] = None
    sff: Optional[np.ndarray] = None
    scale: float = 1.0
    kind: str = "synthetic"
    source: dict = field(default_factory=dict)
    shifts: Optional[np.ndarray] = None
    immersion: Optional[Immersion] = None
    theta_root: Optional[float] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("cloud weights must be positive")
        if self.shifts is None:
            self.shifts = np.zeros((1, self.points.shape[1]))

    @property
    def n(self) -> int:
        return self.points.shape[1] // 2

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def normal_part(self, vectors: np.ndarray) -> np.ndarray:
        coeff = np.einsum("mai,mi->ma", self.tangent, vectors)
        return vectors - np.einsum("ma,mai->mi", coeff, self.tangent)

    def projectors(self) -> np.ndarray:
        return np.einsum("mai,maj->mij", self.tangent, self.tangent)

    def translates(self, center=None, reach: float = math.inf):
        """Points of the deck translates that come within ``reach`` of ``center``."""
        c = np.zeros(2 * self.n) if center is None else np.asarray(center, dtype=float)
        for s in self.shifts:
            X = self.points + s
            if reach < math.inf:
                if float(np.min(np.linalg.norm(X - c, axis=1))) > reach:
                    continue
            yield X

    def ball_mass(self, center, radius: float, width: float = 0.0) -> float:
        total = 0.0
        reach = radius * (1 + width) ** (1 / self.n) if width > 0 else radius
        for X in self.translates(center, reach):
            d = np.linalg.norm(X - np.asarray(center), axis=1)
            total += float(np.sum(self.weights * smooth_ball(d, radius, self.n, width)))
        return total

    def geometry(self, order: int = 2):
        """Recompute grid geometry of the underlying immersion (if any)."""
        if self.immersion is None:
            raise ValueError("cloud has no immersion attached")
        return compute_geometry(self.immersion, self.theta_root, order)

    def subset(self, mask) -> "RescaledCloud":
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return RescaledCloud(
            self.points[mask],
            self.weights[mask],
            self.tangent[mask],
            self.theta[mask],
            self.cos_theta[mask],
            pick(self.mean_curvature),
            pick(self.grad_cos_theta),
            pick(self.norm_A_sq),
            pick(self.sff),
            self.scale,
            self.kind,
            dict(self.source),
            self.shifts,
        )

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "scale": self.scale,
            "source": self.source,
            "points": self.points.ravel().tolist(),
            "weights": self.weights.tolist(),
            "tangent": self.tangent.ravel().tolist(),
            "theta": self.theta.tolist(),
            "cos_theta": self.cos_theta.tolist(),
            "n": self.n,
        }
        if self.immersion is not None:
            out["grid_shape"] = list(self.immersion.grid_shape)
        return out


def cloud_from_immersion(
    im: Immersion,
    order: int = 2,
    theta_root: Optional[float] = None,
    scale: float = 1.0,
    kind: str = "immersion",
    source: Optional[dict] = None,
) -> RescaledCloud:
    geo = compute_geometry(im, theta_root, order)
    n = im.n
    flat = lambda a, tail: a.reshape((-1,) + tail)  # noqa: E731
    shifts = None
    if np.any(im.wraps):
        shifts = im.lift_shifts(float(np.max(np.linalg.norm(im.positions, axis=-1))) + 12.0)
    return RescaledCloud(
        points=flat(im.positions, (2 * n,)),
        weights=geo.weights.ravel(),
        tangent=flat(geo.orthonormal_frame, (n, 2 * n)),
        theta=geo.theta.ravel(),
        cos_theta=geo.cos_theta.ravel(),
        mean_curvature=flat(geo.mean_curvature, (2 * n,)),
        grad_cos_theta=flat(geo.grad_cos_theta, (2 * n,)),
        norm_A_sq=geo.norm_A_sq.ravel(),
        sff=flat(geo.second_fundamental_form, (n, n, n)),
        scale=scale,
        kind=kind,
        source=dict(source or {}),
        shifts=shifts,
        immersion=im,
        theta_root=float(geo.theta.flat[0]),
    )


# ---------------------------------------------------------------------------
# rescalings


def _report(trace: FlowTrace):
    rep = trace.singularity_report
    if rep is None:
        raise NoSingularityError("trace has no singularity report")
    return rep


def covered_window(trace: FlowTrace, lam: float, T: Optional[float] = None) -> tuple:
    """Rescaled times lambda^2 (t - T) spanned by the trace snapshots."""
    T = _report(trace).T if T is None else T
    times = trace.times
    return lam**2 * (times[0] - T), lam**2 * (times[-1] - T)


def interpolate_state(trace: FlowTrace, t: float) -> FlowState:
    """State at time ``t`` by linear interpolation between snapshots."""
    times = trace.times
    if t < times[0] - 1e-15 or t > times[-1] + 1e-15:
        raise ValueError(f"time {t} outside the trace [{times[0]}, {times[-1]}]")
    k = int(np.searchsorted(times, t))
    if k < len(times) and abs(times[k] - t) <= 1e-15 * max(1.0, abs(t)):
        return trace.snapshots[k]
    if k == 0:
        return trace.snapshots[0]
    a, b = trace.snapshots[k - 1], trace.snapshots[min(k, len(times) - 1)]
    if b.t == a.t:
        return a
    w = (t - a.t) / (b.t - a.t)
    pos = (1 - w) * a.positions + w * b.positions
    root = None
    if a.theta_root is not None and b.theta_root is not None:
        root = (1 - w) * a.theta_root + w * b.theta_root
    return FlowState(t, a.immersion.with_positions(pos), a.order, root)


def lambda_rescale(trace: FlowTrace, lam: float, t: float, X0=None, T: Optional[float] = None) -> RescaledCloud:
    """Cloud of lambda (F(., T + t / lambda^2) - X0) at rescaled time t < 0."""
    rep = _report(trace)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not t < 0:
        raise ValueError("rescaled time must be negative")
    T = rep.T if T is None else T
    X0 = rep.X0 if X0 is None else np.asarray(X0, dtype=float)
    state = interpolate_state(trace, T + t / lam**2)
    im = state.immersion.scaled(lam, X0)
    return cloud_from_immersion(
        im,
        state.order,
        state.theta_root,
        scale=lam,
        kind="lambda",
        source={"scenario": trace.scenario, "t": t, "original_t": state.t},
    )


def time_rescale(
    trace: FlowTrace,
    T: Optional[float] = None,
    X0=None,
    stride: int = 1,
    t_min: Optional[float] = None,
    t_max: Optional[float] = None,
    order: Optional[int] = None,
) -> List[RescaledCloud]:
    """Clouds of F~ = (F - X0) / sqrt(2 (T - t)) indexed by s = -log(T - t) / 2.

    ``T`` and ``X0`` default to the singularity report; passing both allows
    an artificial centre on smooth flows.
    """
    rep = trace.singularity_report
    if T is None or X0 is None:
        if rep is None:
            raise NoSingularityError("time rescaling needs T and X0 (no singularity report)")
        if not rep.reliable:
            raise NoSingularityError(f"estimated T is unreliable: {rep.note}")
    T = rep.T if T is None else float(T)
    X0 = rep.X0 if X0 is None else np.asarray(X0, dtype=float)
    out = []
    for snap in trace.snapshots[::stride]:
        if snap.t >= T:
            continue
        if t_min is not None and snap.t < t_min:
            continue
        if t_max is not None and snap.t > t_max:
            continue
        c = 1.0 / math.sqrt(2 * (T - snap.t))
        s = -0.5 * math.log(T - snap.t)
        cloud = cloud_from_immersion(
            snap.immersion.scaled(c, X0),
            snap.order if order is None else order,
            snap.theta_root,
            scale=s,
            kind="time",
            source={"scenario": trace.scenario, "t": snap.t, "factor": c, "order": snap.order if order is None else order},
        )
        out.append(cloud)
    return out


def scaling_identity_errors(trace: FlowTrace, clouds: Sequence[RescaledCloud]) -> dict:
    """Max deviations of cos, |H|^2 and |A|^2 from their exact scaling laws."""
    by_t = {s.t: s for s in trace.snapshots}
    errs = {"cos_theta": 0.0, "H_sq": 0.0, "A_sq": 0.0}
    for cl in clouds:
        snap = by_t[cl.source["t"]]
        geo = snap.geometry_at(cl.source.get("order", snap.order))
        c2 = cl.source["factor"] ** -2 if "factor" in cl.source else cl.scale**-2
        H2 = np.sum(cl.mean_curvature**2, axis=1)
        rel = lambda a, b: float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))  # noqa: E731
        errs["cos_theta"] = max(errs["cos_theta"], rel(cl.cos_theta, geo.cos_theta.ravel()))
        errs["H_sq"] = max(errs["H_sq"], rel(H2, c2 * geo.mean_curvature_sq.ravel()))
        errs["A_sq"] = max(errs["A_sq"], rel(cl.norm_A_sq, c2 * geo.norm_A_sq.ravel()))
    return errs


# ---------------------------------------------------------------------------
# rescaled-flow identities


def _check_pair(a: RescaledCloud, b: RescaledCloud):
    if a.points.shape != b.points.shape:
        raise ValueError("rescaled clouds have different grids")


def _l2(weights, f) -> float:
    f = np.asarray(f)
    sq = f**2 if f.ndim == 1 else np.sum(f**2, axis=1)
    return float(np.sqrt(np.sum(weights * sq)))


def _scaled_residual(num, scales):
    scale = max(scales)
    return num / scale if scale > 1e-12 else num


def rescaled_flow_residual(seq: Sequence[RescaledCloud]) -> float:
    """Residual of dF~/ds = H~ + F~ between consecutive clouds (max over pairs)."""
    if len(seq) < 2:
        raise ValueError("need at least two rescaled clouds")
    worst = 0.0
    for a, b in zip(seq[:-1], seq[1:]):
        _check_pair(a, b)
        ds = b.scale - a.scale
        lhs = (b.points - a.points) / ds
        rhs = 0.5 * (a.mean_curvature + a.points + b.mean_curvature + b.points)
        num = _l2(a.weights, lhs - rhs)
        scales = [_l2(a.weights, lhs), _l2(a.weights, rhs), _l2(a.weights, a.points)]
        worst = max(worst, _scaled_residual(num, scales))
    return float(worst)


def gaussian_weight_terms(cloud: RescaledCloud):
    """Yield (X, exp(-|X|^2 / 2)) over deck translates with non-negligible weight."""
    reach = math.sqrt(2 * GAUSS_CUT)
    for X in cloud.translates(None, reach):
        yield X, np.exp(-0.5 * np.sum(X**2, axis=1))


def self_shrinker_residual(cloud: RescaledCloud) -> float:
    """Gaussian-weighted L2 norm of H~ + F~^perp (zero on self-shrinkers)."""
    if cloud.mean_curvature is None:
        raise ValueError("cloud carries no mean curvature")
    total = 0.0
    for X, rho in gaussian_weight_terms(cloud):
        v = cloud.mean_curvature + cloud.normal_part(X)
        total += float(np.sum(cloud.weights * rho * np.sum(v**2, axis=1)))
    return math.sqrt(total)


def gaussian_mass(cloud: RescaledCloud) -> float:
    return float(sum(np.sum(cloud.weights * rho) for _, rho in gaussian_weight_terms(cloud)))


def rescaled_theta_identity(seq: Sequence[RescaledCloud], order: int = 2) -> float:
    """Residual of (d/ds - Laplacian~) v~ - |H~|^2 v~ with v~ = cos(theta~).

    Spatial operators use the ``order`` stencil on each cloud's immersion;
    time is the trapezoid rule in s.  Normalised per pair by the largest
    term and the curvature scale |||A~|^2||; max over pairs.
    """
    if len(seq) < 2:
        raise ValueError("need at least two rescaled clouds")
    worst = 0.0
    for a, b in zip(seq[:-1], seq[1:]):
        _check_pair(a, b)
        ga, gb = a.geometry(order), b.geometry(order)
        ds = b.scale - a.scale
        dv = (gb.cos_theta - ga.cos_theta) / ds
        lap = 0.5 * (ga.laplacian(ga.cos_theta) + gb.laplacian(gb.cos_theta))
        react = 0.5 * (ga.mean_curvature_sq * ga.cos_theta + gb.mean_curvature_sq * gb.cos_theta)
        num = mesh.l2_norm(ga, dv - lap - react)
        scales = [mesh.l2_norm(ga, x) for x in (dv, lap, react, ga.norm_A_sq)]
        worst = max(worst, _scaled_residual(num, scales))
    return float(worst)


@dataclass
class RescaledPsiReport:
    s: np.ndarray
    psi: np.ndarray
    rate: np.ndarray
    shrinker_term: np.ndarray
    gradient_term: np.ndarray
    H_term: np.ndarray
    tol_disc: np.ndarray
    refusals: list

    @property
    def nonincreasing(self) -> bool:
        return bool(np.all(self.rate <= self.tol_disc))

    def to_dict(self) -> dict:
        return {
            "s": self.s.tolist(),
            "psi": self.psi.tolist(),
            "rate": self.rate.tolist(),
            "shrinker_term": self.shrinker_term.tolist(),
            "gradient_term": self.gradient_term.tolist(),
            "H_term": self.H_term.tolist(),
            "refusals": list(self.refusals),
        }


def rescaled_psi(cloud: RescaledCloud, cutoff=None) -> tuple:
    """Psi~ and the three dissipation integrals for one rescaled cloud.

    Returns ``(psi, int |H~ + F~^perp|^2 rho~/v, int |grad v|^2 rho~/v^3,
    int |H~|^2 rho~/v)`` with rho~ = exp(-|X|^2 / 2).  ``cutoff`` is an
    optional :class:`KernelSpec` whose phi multiplies the kernel.
    """
    v = cloud.cos_theta
    psi = shr = grad = hh = 0.0
    for X, rho in gaussian_weight_terms(cloud):
        phi = np.ones(len(X)) if cutoff is None else cutoff.phi(X)
        on = phi > 0
        if np.any(on & (v <= 0)):
            raise PreconditionError("cos(theta~) <= 0 on the cutoff support")
        k = cloud.weights * phi * rho
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(on, 1.0 / v, 0.0)
        psi += float(np.sum(k * inv))
        if cloud.mean_curvature is not None:
            sv = cloud.mean_curvature + cloud.normal_part(X)
            shr += float(np.sum(k * inv * np.sum(sv**2, axis=1)))
            hh += float(np.sum(k * inv * np.sum(cloud.mean_curvature**2, axis=1)))
        if cloud.grad_cos_theta is not None:
            grad += float(np.sum(k * inv**3 * np.sum(cloud.grad_cos_theta**2, axis=1)))
    return psi, shr, grad, hh


def rescaled_psi_monotonicity(
    seq: Sequence[RescaledCloud], cutoff=None, c_ref: float = 0.0
) -> RescaledPsiReport:
    rows, refusals = [], []
    vals = []
    for cl in seq:
        try:
            vals.append((cl, rescaled_psi(cl, cutoff)))
        except PreconditionError as exc:
            refusals.append(f"s={cl.scale:.6g}: {exc}")
    for (a, va), (b, vb) in zip(vals[:-1], vals[1:]):
        ds = b.scale - a.scale
        h = max(a.immersion.spacing) if a.immersion is not None else 0.0
        rows.append((a.scale, va[0], (vb[0] - va[0]) / ds, va[1], va[2], va[3], c_ref * (h**2 + ds)))
    arr = np.array(rows, dtype=float).reshape(-1, 7)
    return RescaledPsiReport(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5], arr[:, 6], refusals)


# ---------------------------------------------------------------------------
# decay of integrals under lambda -> infinity


@dataclass
class DecayReport:
    lambdas: list
    grad_cos: list
    H: list
    perp: list
    notes: list

    def ratios(self, key: str) -> list:
        vals = getattr(self, key)
        return [b / a if a and np.isfinite(a) and np.isfinite(b) else math.nan for a, b in zip(vals[:-1], vals[1:])]

    def rows(self) -> list:
        return [
            {"lambda": lam, "grad_cos": g, "H": h, "perp": p, "note": note}
            for lam, g, h, p, note in zip(self.lambdas, self.grad_cos, self.H, self.perp, self.notes)
        ]


def integral_decay_report(
    source,
    lambdas: Sequence[float],
    R: float,
    s1: float,
    s2: float,
    n_times: int = 9,
    width: float = 0.0,
) -> DecayReport:
    """Space-time integrals of |grad cos theta|^2, |H|^2, |F^perp|^2 on B_R x [s1, s2].

    ``source`` is a :class:`FlowTrace` (rescaled with :func:`lambda_rescale`)
    or a callable ``(lam, t) -> RescaledCloud`` for constructed inputs.
    Time integration is the trapezoid rule on ``n_times`` points.
    """
    if not s1 < s2 < 0 or s1 >= 0:
        raise ValueError("need s1 < s2 < 0")
    if isinstance(source, FlowTrace):
        _report(source)
        provider: Callable = lambda lam, t: lambda_rescale(source, lam, t)  # noqa: E731
    else:
        provider = source
    ts = np.linspace(s1, s2, n_times)
    out = DecayReport([], [], [], [], [])
    for lam in lambdas:
        note = ""
        try:
            rows = []
            for t in ts:
                cl = provider(lam, t)
                acc = np.zeros(3)
                for X in cl.translates(None, R):
                    d = np.linalg.norm(X, axis=1)
                    k = cl.weights * smooth_ball(d, R, cl.n, width)
                    acc[0] += np.sum(k * np.sum(cl.grad_cos_theta**2, axis=1))
                    acc[1] += np.sum(k * np.sum(cl.mean_curvature**2, axis=1))
                    acc[2] += np.sum(k * np.sum(cl.normal_part(X) ** 2, axis=1))
                rows.append(acc)
            vals = np.trapezoid(np.array(rows), ts, axis=0)
        except ValueError as exc:
            vals = np.full(3, math.nan)
            note = str(exc)
        out.lambdas.append(float(lam))
        out.grad_cos.append(float(vals[0]))
        out.H.append(float(vals[1]))
        out.perp.append(float(vals[2]))
        out.notes.append(note)
    return out


# ---------------------------------------------------------------------------
# density ratios and plane fitting


def density_ratio(cloud: RescaledCloud, xi, rhos: Sequence[float], width: float = 0.0) -> np.ndarray:
    """rho^-n mass(B_rho(xi)) / omega_n for each radius."""
    rhos = np.asarray(rhos, dtype=float)
    if np.any(rhos <= 0) or np.any(np.diff(rhos) <= 0):
        raise ValueError("radii must be positive and increasing")
    n = cloud.n
    out = np.empty(len(rhos))
    for k, r in enumerate(rhos):
        m = cloud.ball_mass(xi, r, width)
        if m <= 0:
            raise ValueError(f"empty ball of radius {r}")
        out[k] = m / (unit_ball_volume(n) * r**n)
    return out


def density_monotone(ratios: np.ndarray, tol: float = 1e-3) -> bool:
    return bool(np.all(np.diff(ratios) >= -tol))


@dataclass
class PlaneFitParams:
    threshold: float = 0.2
    min_cluster_fraction: float = 0.02
    max_unassigned: float = 0.1
    refine_iterations: int = 3
    candidates: int = 256
    density_radius: Optional[float] = None
    density_width: float = 0.25
    ransac_trials: int = 400
    ransac_tolerance: float = 0.02
    max_planes: int = 8
    seed: int = 0


@dataclass
class PlaneRecord:
    basis: np.ndarray
    multiplicity: int
    theta: float
    cos_theta: float
    residual: float
    weight_fraction: float
    density: float

    def projector(self) -> np.ndarray:
        return self.basis.T @ self.basis

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.tolist(),
            "multiplicity": self.multiplicity,
            "theta": self.theta,
            "cos_theta": self.cos_theta,
            "residual": self.residual,
            "weight_fraction": self.weight_fraction,
            "density": self.density,
        }


@dataclass
class PlaneCluster:
    planes: List[PlaneRecord]
    unassigned_fraction: float
    method: str = "grassmann"
    notes: list = field(default_factory=list)

    @property
    def plane_like(self) -> bool:
        return bool(self.planes) and self.unassigned_fraction <= 0.1

    @property
    def max_residual(self) -> float:
        return max((p.residual for p in self.planes), default=math.inf)

    def to_dict(self) -> dict:
        return {
            "planes": [p.to_dict() for p in self.planes],
            "unassigned_fraction": self.unassigned_fraction,
            "method": self.method,
            "notes": list(self.notes),
        }


def plane_angle(basis: np.ndarray) -> float:
    """Lagrangian angle of the n-plane spanned by the rows of ``basis``."""
    n = basis.shape[0]
    z = basis[:, :n] + 1j * basis[:, n:]
    return float(np.angle(np.linalg.det(z)))


def principal_angles(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles (ascending) between row spaces of orthonormal ``A`` and ``B``."""
    cos = np.sort(np.linalg.svd(A @ B.T, compute_uv=False))[::-1]
    resid = B - (B @ A.T) @ A
    sin = np.sort(np.linalg.svd(resid, compute_uv=False))
    return np.arctan2(sin[: len(cos)], cos)


def _top_subspace(M: np.ndarray, n: int) -> np.ndarray:
    vals, vecs = np.linalg.eigh(M)
    return vecs[:, ::-1][:, :n].T


def _fit_plane(points, weights, n):
    M = (points * weights[:, None]).T @ points
    basis = _top_subspace(M, n)
    # sign convention: make the largest entry of each row positive
    for r in basis:
        if r[np.argmax(np.abs(r))] < 0:
            r *= -1
    resid_vec = points - (points @ basis.T) @ basis
    rms = float(np.sqrt(np.sum(weights * np.sum(resid_vec**2, axis=1)) / np.sum(weights)))
    return basis, rms


def _projector_distance(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((P - Q) ** 2, axis=(-1, -2)))


def _records(cloud, labels, planes_basis, params, R):
    n = cloud.n
    total_w = cloud.weights.sum()
    records = []
    for k, basis0 in enumerate(planes_basis):
        mask = labels == k
        sub = cloud.subset(mask)
        basis, rms = _fit_plane(sub.points, sub.weights, n)
        rho = 0.5 * R
        dens = float(sub.ball_mass(np.zeros(2 * n), rho, params.density_width) / (unit_ball_volume(n) * rho**n))
        mean_cos = float(np.average(sub.cos_theta, weights=sub.weights))
        mean_theta = float(np.angle(np.sum(sub.weights * np.exp(1j * sub.theta))))
        records.append(
            PlaneRecord(
                basis=basis,
                multiplicity=max(1, int(round(dens))),
                theta=mean_theta,
                cos_theta=mean_cos,
                residual=rms,
                weight_fraction=float(sub.weights.sum() / total_w),
                density=dens,
            )
        )
    return records


def _grassmann_clusters(cloud: RescaledCloud, params: PlaneFitParams):
    n, M = cloud.n, cloud.size
    P = cloud.projectors()
    rng = np.random.default_rng(params.seed)
    labels = np.full(M, -1)
    bases = []
    total_w = cloud.weights.sum()
    while len(bases) < params.max_planes:
        free = np.flatnonzero(labels < 0)
        if free.size == 0 or cloud.weights[free].sum() < params.min_cluster_fraction * total_w:
            break
        cand = free if free.size <= params.candidates else rng.choice(free, params.candidates, replace=False)
        cand = np.sort(cand)
        best, best_w = None, 0.0
        for c in cand:
            near = _projector_distance(P[free], P[c]) < params.threshold
            w = cloud.weights[free][near].sum()
            if w > best_w:
                best, best_w = c, w
        if best is None or best_w < params.min_cluster_fraction * total_w:
            break
        Q = P[best]
        for _ in range(params.refine_iterations):
            near = free[_projector_distance(P[free], Q) < params.threshold]
            mean = np.einsum("m,mij->ij", cloud.weights[near], P[near]) / cloud.weights[near].sum()
            basis = _top_subspace(mean, n)
            Q = basis.T @ basis
        near = free[_projector_distance(P[free], Q) < params.threshold]
        if cloud.weights[near].sum() < params.min_cluster_fraction * total_w:
            break
        labels[near] = len(bases)
        bases.append(_top_subspace(Q, n))
    return labels, bases


def _ransac_clusters(cloud: RescaledCloud, params: PlaneFitParams, scale: float):
    n, M = cloud.n, cloud.size
    rng = np.random.default_rng(params.seed)
    labels = np.full(M, -1)
    bases = []
    total_w = cloud.weights.sum()
    tol = params.ransac_tolerance * scale
    for _ in range(params.max_planes):
        free = np.flatnonzero(labels < 0)
        if free.size < n:
            break
        best, best_w = None, 0.0
        for _ in range(params.ransac_trials):
            pick = rng.choice(free, n, replace=False)
            q, r = np.linalg.qr(cloud.points[pick].T)
            if np.min(np.abs(np.diag(r))) < 1e-9 * scale:
                continue
            basis = q.T
            d = np.linalg.norm(cloud.points[free] - (cloud.points[free] @ basis.T) @ basis, axis=1)
            w = cloud.weights[free][d < tol].sum()
            if w > best_w:
                best, best_w = basis, w
        if best is None or best_w < params.min_cluster_fraction * total_w:
            break
        d = np.linalg.norm(cloud.points[free] - (cloud.points[free] @ best.T) @ best, axis=1)
        labels[free[d < tol]] = len(bases)
        bases.append(best)
    return labels, bases


def fit_planes(cloud: RescaledCloud, params: Optional[PlaneFitParams] = None) -> PlaneCluster:
    """Cluster tangent planes and fit planes through the origin.

    Points are grouped by the Frobenius distance between tangent-plane
    projectors (greedy seeding, then refinement of each seed to the
    dominant subspace of its neighbourhood mean).  When more than
    ``max_unassigned`` of the weight is left over, a RANSAC pass on the
    positions is tried and kept if it assigns more weight.
    """
    params = params or PlaneFitParams()
    if cloud.n not in (1, 2):
        raise ValueError("plane fitting is defined for n = 1 or 2")
    total_w = cloud.weights.sum()
    R = params.density_radius or float(np.max(np.linalg.norm(cloud.points, axis=1)))
    labels, bases = _grassmann_clusters(cloud, params)
    unassigned = float(cloud.weights[labels < 0].sum() / total_w)
    method, notes = "grassmann", []
    if unassigned > params.max_unassigned:
        r_labels, r_bases = _ransac_clusters(cloud, params, R)
        r_unassigned = float(cloud.weights[r_labels < 0].sum() / total_w)
        notes.append(f"tangent clustering left {unassigned:.3f} unassigned; RANSAC left {r_unassigned:.3f}")
        if r_unassigned < unassigned:
            labels, bases, unassigned, method = r_labels, r_bases, r_unassigned, "ransac"
    if unassigned > params.max_unassigned:
        notes.append("cloud is not plane-like at the configured thresholds")
    records = _records(cloud, labels, bases, params, R)
    return PlaneCluster(records, unassigned, method, notes)


# ---------------------------------------------------------------------------
# angle constancy, complex structures, flatness


def angle_constancy(cloud: RescaledCloud, r: float, centers=None, n_centers: int = 48, R: Optional[float] = None) -> dict:
    """Oscillation of ball averages of cos(theta) and the gradient integral.

    ``centers`` defaults to ``n_centers`` cloud points chosen with a fixed
    stride.  Returns the oscillation, the integral of |grad cos theta| over
    B_R (when gradients are carried) and their quotient.
    """
    if centers is None:
        step = max(1, cloud.size // n_centers)
        centers = cloud.points[::step][:n_centers]
    avgs = []
    for c in centers:
        d = np.linalg.norm(cloud.points - c, axis=1)
        inside = d <= r
        if np.any(inside):
            avgs.append(np.average(cloud.cos_theta[inside], weights=cloud.weights[inside]))
    avgs = np.array(avgs)
    osc = float(avgs.max() - avgs.min()) if avgs.size else 0.0
    R = R or float(np.max(np.linalg.norm(cloud.points, axis=1)))
    grad_int = None
    if cloud.grad_cos_theta is not None:
        inside = np.linalg.norm(cloud.points, axis=1) <= R
        grad_int = float(np.sum(cloud.weights[inside] * np.linalg.norm(cloud.grad_cos_theta[inside], axis=1)))
    ratio = osc / grad_int if grad_int else None
    return {"oscillation": osc, "gradient_integral": grad_int, "constant": ratio, "balls": int(avgs.size)}


def j_star(theta0: float) -> np.ndarray:
    """The complex structure J* built from the cos-angle weight theta0.

    Coordinates are ordered (x1, x2, y1, y2); columns are images of the
    basis vectors.
    """
    x1, x2, y1, y2 = range(4)
    J = np.zeros((4, 4))
    J[y1, x1] = theta0
    J[x1, y1] = -1 / theta0
    J[y2, x2] = 1 / theta0
    J[x2, y2] = -theta0
    return J


def j_prime(theta0: float) -> np.ndarray:
    """diag(I, -I) in the coordinates (x1, y1/theta0, x2/theta0, y2), pulled back."""
    x1, x2, y1, y2 = range(4)
    J = np.zeros((4, 4))
    J[y1, x1] = theta0
    J[x1, y1] = -1 / theta0
    J[y2, x2] = -1 / theta0
    J[x2, y2] = theta0
    return J


def complex_structure_witness(
    cluster: PlaneCluster, theta0: Optional[float] = None, angle_tol: float = 1e-3, tol: float = 1e-6
) -> dict:
    """Check that every fitted plane is invariant under J' built from theta0.

    theta0 (the common value of cos theta on the planes) is taken from the
    cluster unless given.  Planes whose cos theta values disagree by more
    than ``angle_tol`` yield no witness.
    """
    if not cluster.planes:
        return {"found": False, "reason": "no planes"}
    if cluster.planes[0].basis.shape[1] != 4:
        return {"found": False, "reason": "the witness is defined for surfaces in C^2"}
    cosines = [p.cos_theta for p in cluster.planes]
    if theta0 is None:
        spread = max(cosines) - min(cosines)
        if spread > angle_tol:
            return {
                "found": False,
                "reason": f"plane angles disagree (cos theta spread {spread:.3g} > {angle_tol:g})",
                "cos_theta": cosines,
            }
        theta0 = float(np.mean(cosines))
    if not theta0 > 0:
        return {"found": False, "reason": f"theta0 = {theta0:.3g} is not positive", "cos_theta": cosines}
    Jp = j_prime(theta0)
    residuals = []
    for p in cluster.planes:
        P = p.projector()
        residuals.append(float(np.linalg.norm(Jp @ P - P @ Jp @ P)))
    found = max(residuals) < tol
    return {
        "found": bool(found),
        "theta0": theta0,
        "residuals": residuals,
        "J_star": j_star(theta0).tolist(),
        "J_prime": j_prime(theta0).tolist(),
        "reason": "" if found else "some plane is not J'-invariant",
    }


def flatness_check(obj, R: Optional[float] = None) -> dict:
    """Weighted L2 norm of |A| on B_R and the mean |det h^alpha_ij|.

    Accepts a :class:`RescaledCloud` carrying second fundamental forms, or
    a :class:`PlaneCluster` (fitted planes are flat, so both vanish).
    """
    if isinstance(obj, PlaneCluster):
        return {"A_L2": 0.0, "det_h": [0.0] * len(obj.planes), "planes": len(obj.planes)}
    cloud = obj
    if cloud.norm_A_sq is None:
        raise ValueError("cloud carries no second fundamental form")
    R = R or float(np.max(np.linalg.norm(cloud.points, axis=1)))
    inside = np.linalg.norm(cloud.points, axis=1) <= R
    w = cloud.weights[inside]
    A_l2 = float(np.sqrt(np.sum(w * cloud.norm_A_sq[inside])))
    dets = []
    if cloud.sff is not None:
        for a in range(cloud.n):
            d = np.linalg.det(cloud.sff[inside, a]) if cloud.n > 1 else cloud.sff[inside, a, 0, 0]
            dets.append(float(np.sum(w * np.abs(d)) / np.sum(w)))
    return {"A_L2": A_l2, "det_h": dets, "max_A_sq": float(np.max(cloud.norm_A_sq[inside]))}


def isoperimetric_profile(cloud: RescaledCloud, center_index: int, rhos: Sequence[float]) -> dict:
    """Area of intrinsic balls about a vertex against rho^n.

    Intrinsic distance is the graph distance along grid edges (including
    diagonals for surfaces) computed with Dijkstra's algorithm.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    im = cloud.immersion
    if im is None:
        raise ValueError("intrinsic balls need the grid immersion")
    shape = im.grid_shape
    idx = np.arange(cloud.size).reshape(shape)
    offsets = [(1,)] if im.n == 1 else [(1, 0), (0, 1), (1, 1), (1, -1)]
    rows, cols, vals = [], [], []
    lin = im.linear_part()
    periodic = im.positions - lin
    for off in offsets:
        nb = np.roll(idx, tuple(-o for o in off), axis=tuple(range(im.n)))
        # neighbour position across the seam includes the deck translation
        shifted = np.roll(periodic, tuple(-o for o in off), axis=tuple(range(im.n)))
        du = np.array(off, dtype=float) * np.array(im.spacing)
        step = shifted - periodic + (du @ im.wraps) / (2 * math.pi)
        d = np.linalg.norm(step, axis=-1)
        rows.append(idx.ravel())
        cols.append(nb.ravel())
        vals.append(d.ravel())
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    graph = coo_matrix((vals, (rows, cols)), shape=(cloud.size, cloud.size)).tocsr()
    dist = dijkstra(graph, directed=False, indices=center_index)
    areas = [float(np.sum(cloud.weights[dist <= r])) for r in rhos]
    n = im.n
    return {"rho": list(map(float, rhos)), "area": areas, "ratio": [a / r**n for a, r in zip(areas, rhos)]}
