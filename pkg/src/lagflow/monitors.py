"""Integral functionals evaluated on flow states.

All integrals are trapezoidal sums over the parameter grid, which is
spectrally accurate for smooth periodic integrands.  Immersions with
nonzero ``wraps`` are fundamental domains of complete submanifolds, so
kernel integrals over them sum every deck translate that the kernel can
see (see :meth:`Immersion.lift_shifts`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy import integrate

from .flow import FlowState, FlowTrace
from .mesh import GeometryCache

log = logging.getLogger(__name__)

# images whose closest point sees a kernel factor below exp(-GAUSS_CUT) are dropped
GAUSS_CUT = 46.0


class PreconditionError(ValueError):
    """A functional's hypothesis fails on the given data."""


def quintic_step(s):
    """1 - 10 s^3 + 15 s^4 - 6 s^5 on [0, 1], clamped outside: C^2 from 1 to 0."""
    s = np.clip(s, 0.0, 1.0)
    return 1 - s**3 * (10 - 15 * s + 6 * s**2)


def quintic_step_derivative(s):
    inside = (s > 0) & (s < 1)
    return np.where(inside, -30 * s**2 * (1 - s) ** 2, 0.0)


@dataclass(frozen=True)
class KernelSpec:
    """Backward heat kernel centred at (X0, t0) with an optional cutoff.

    The cutoff equals 1 on the ball of radius r about X0 and decays to 0 at
    radius 2r through :func:`quintic_step` in s = (|X - X0| - r) / r.
    ``cutoff_radius=None`` means phi = 1.
    """

    center: tuple
    t0: float
    cutoff_radius: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.ravel(self.center)))
        if self.cutoff_radius is not None and not self.cutoff_radius > 0:
            raise ValueError("cutoff radius must be positive")

    @property
    def X0(self) -> np.ndarray:
        return np.asarray(self.center)

    @property
    def n(self) -> int:
        return len(self.center) // 2

    def tau(self, t: float) -> float:
        tau = self.t0 - t
        if not tau > 0:
            raise ValueError(f"kernel evaluated at t={t} >= t0={self.t0}")
        return tau

    def phi(self, X: np.ndarray) -> np.ndarray:
        if self.cutoff_radius is None:
            return np.ones(np.shape(X)[:-1])
        r = self.cutoff_radius
        d = np.linalg.norm(X - self.X0, axis=-1)
        return quintic_step((d - r) / r)

    def phi_gradient(self, X: np.ndarray) -> np.ndarray:
        """Ambient gradient of the cutoff."""
        if self.cutoff_radius is None:
            return np.zeros_like(X)
        r = self.cutoff_radius
        diff = X - self.X0
        d = np.linalg.norm(diff, axis=-1)
        dq = quintic_step_derivative((d - r) / r) / r
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(d[..., None] > 0, diff / d[..., None], 0.0)
        return dq[..., None] * unit

    def support_radius(self) -> float:
        return math.inf if self.cutoff_radius is None else 2 * self.cutoff_radius


def backward_kernel(X, spec: KernelSpec, t: float, n: Optional[int] = None):
    """(4 pi tau)^(-n/2) exp(-|X - X0|^2 / (4 tau)), tau = t0 - t.

    ``n`` is the dimension of the submanifold (defaults to half the
    ambient dimension).
    """
    tau = spec.tau(t)
    X = np.asarray(X, dtype=float)
    n = spec.n if n is None else n
    d2 = np.sum((X - spec.X0) ** 2, axis=-1)
    return (4 * math.pi * tau) ** (-n / 2) * np.exp(-d2 / (4 * tau))


# ---------------------------------------------------------------------------
# integration over immersions (with deck translates)


def _images(geo: GeometryCache, spec: KernelSpec, tau: float) -> Iterator[np.ndarray]:
    """Deck translates of the sample points that the kernel can see.

    A translate is dropped when its bounding ball lies entirely beyond the
    cutoff support or where the Gaussian factor is below exp(-GAUSS_CUT).
    """
    im = geo.immersion
    if not np.any(im.wraps):
        yield im.positions
        return
    pts = im.positions.reshape(-1, 2 * im.n)
    centre = pts.mean(axis=0)
    rad = float(np.max(np.linalg.norm(pts - centre, axis=-1)))
    cut = min(math.sqrt(4 * tau * GAUSS_CUT), spec.support_radius())
    offset = float(np.linalg.norm(centre - spec.X0))
    shifts = im.lift_shifts(offset + rad + cut)
    lower = np.linalg.norm(centre + shifts - spec.X0, axis=-1) - rad
    for shift in shifts[lower <= cut]:
        yield im.positions + shift


def _support_check(geo: GeometryCache, spec: KernelSpec, tau: float):
    """Refuse when cos(theta) <= 0 where the cutoff is positive."""
    v = geo.cos_theta
    if spec.cutoff_radius is None:
        bad = v <= 0
    else:
        bad = np.zeros(v.shape, dtype=bool)
        for X in _images(geo, spec, tau):
            bad |= (spec.phi(X) > 0) & (v <= 0)
    if np.any(bad):
        raise PreconditionError(
            f"cos(theta) <= 0 on the cutoff support (min {float(np.min(v[bad])):.3g}); "
            "the weight 1/cos(theta) is undefined"
        )


def _kernel_integral(geo: GeometryCache, spec: KernelSpec, t: float, weight=None) -> float:
    tau = spec.tau(t)
    w = geo.weights if weight is None else geo.weights * weight
    total = 0.0
    for X in _images(geo, spec, tau):
        total += float(np.sum(w * spec.phi(X) * backward_kernel(X, spec, t, geo.n)))
    return total


def weighted_psi(state: FlowState, spec: KernelSpec) -> float:
    """Psi = integral of (1 / cos theta) phi rho over the state."""
    geo = state.geometry
    tau = spec.tau(state.t)
    _support_check(geo, spec, tau)
    with np.errstate(divide="ignore"):
        inv_v = np.where(geo.cos_theta > 0, 1.0 / geo.cos_theta, 0.0)
    return _kernel_integral(geo, spec, state.t, inv_v)


def gaussian_density(state: FlowState, X0=None, t0: Optional[float] = None, cutoff=None) -> float:
    """Phi = integral of phi rho (the unweighted Gaussian density).

    Either pass a :class:`KernelSpec` as ``cutoff`` (its centre and t0 are
    used), or ``X0`` and ``t0`` directly with ``cutoff`` a radius or None.
    """
    if isinstance(cutoff, KernelSpec):
        spec = cutoff
    else:
        spec = KernelSpec(X0, t0, cutoff)
    return _kernel_integral(state.geometry, spec, state.t)


def dissipation(state: FlowState, spec: KernelSpec, H_factor: float = 0.5) -> float:
    """Integral of (1/v) phi rho (2|grad v|^2/v^2 + |H + (F-X0)^perp / 2 tau|^2 + c|H|^2).

    ``H_factor = 0.5`` is the term of the stated inequality; ``1.0`` gives
    the exact flat-space rate with phi = 1.
    """
    geo = state.geometry
    tau = spec.tau(state.t)
    _support_check(geo, spec, tau)
    v = geo.cos_theta
    H = geo.mean_curvature
    grad_v_sq = np.sum(geo.grad_cos_theta**2, axis=-1)
    total = 0.0
    for X in _images(geo, spec, tau):
        perp = geo.normal_part(X - spec.X0)
        shr = np.sum((H + perp / (2 * tau)) ** 2, axis=-1)
        dens = 2 * grad_v_sq / v**2 + shr + H_factor * np.sum(H**2, axis=-1)
        kern = spec.phi(X) * backward_kernel(X, spec, state.t, geo.n)
        total += float(np.sum(geo.weights * kern * dens / v))
    return total


# ---------------------------------------------------------------------------
# monotonicity of Psi


@dataclass
class PsiReport:
    times: np.ndarray
    psi: np.ndarray
    rate: np.ndarray
    dissipation: np.ndarray
    dissipation_exact: np.ndarray
    tol_disc: np.ndarray
    refusals: List[str] = field(default_factory=list)
    c_ref: float = 0.0

    @property
    def defect(self) -> np.ndarray:
        """Rate plus exact dissipation: zero up to discretisation."""
        return self.rate + self.dissipation_exact

    @property
    def margin(self) -> np.ndarray:
        """-D + tol - dPsi/dt; nonnegative where the inequality holds."""
        return -self.dissipation + self.tol_disc - self.rate

    @property
    def inequality_fraction(self) -> float:
        return float(np.mean(self.margin >= 0)) if self.margin.size else 1.0

    @property
    def nonincreasing(self) -> bool:
        return bool(np.all(self.rate <= self.tol_disc))

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "psi": self.psi.tolist(),
            "rate": self.rate.tolist(),
            "dissipation": self.dissipation.tolist(),
            "margin": self.margin.tolist(),
            "c_ref": self.c_ref,
            "inequality_fraction": self.inequality_fraction,
            "refusals": list(self.refusals),
        }


def _pair_indices(trace: FlowTrace, spec: KernelSpec, pairs):
    valid = [k for k, s in enumerate(trace.snapshots) if s.t < spec.t0]
    if pairs is None:
        return [(a, b) for a, b in zip(valid[:-1], valid[1:])]
    return [(k, k + 1) for k in pairs if k + 1 in valid]


def psi_monotonicity_report(
    trace: FlowTrace, spec: KernelSpec, c_ref: float = 0.0, pairs: Optional[Sequence[int]] = None
) -> PsiReport:
    """dPsi/dt between consecutive snapshots against -D (trapezoid in time).

    ``c_ref`` sets tol_disc = c_ref (h^2 + dt) per pair; obtain it from
    :func:`calibrate_c_ref`.  Snapshots where the weight is undefined are
    recorded in ``refusals`` and skipped.
    """
    cache = {}
    refusals = []

    def values(k):
        if k not in cache:
            s = trace.snapshots[k]
            try:
                cache[k] = (
                    weighted_psi(s, spec),
                    dissipation(s, spec, 0.5),
                    dissipation(s, spec, 1.0),
                )
            except PreconditionError as exc:
                cache[k] = None
                refusals.append(f"t={s.t:.6g}: {exc}")
        return cache[k]

    rows = []
    for a, b in _pair_indices(trace, spec, pairs):
        va, vb = values(a), values(b)
        if va is None or vb is None:
            continue
        sa, sb = trace.snapshots[a], trace.snapshots[b]
        dt = sb.t - sa.t
        h = max(sa.immersion.spacing)
        rows.append(
            (
                0.5 * (sa.t + sb.t),
                (vb[0] - va[0]) / dt,
                0.5 * (va[1] + vb[1]),
                0.5 * (va[2] + vb[2]),
                c_ref * (h**2 + dt),
                va[0],
            )
        )
    arr = np.array(rows, dtype=float).reshape(-1, 6)
    return PsiReport(
        times=arr[:, 0],
        psi=arr[:, 5],
        rate=arr[:, 1],
        dissipation=arr[:, 2],
        dissipation_exact=arr[:, 3],
        tol_disc=arr[:, 4],
        refusals=refusals,
        c_ref=c_ref,
    )


def calibrate_c_ref(reports: Sequence[PsiReport], hs: Sequence[float], dts=None, safety: float = 2.0):
    """C_ref from the identity defect observed at several resolutions.

    For each report the observed constant is max|defect| / (h^2 + dt); the
    result is ``safety`` times the largest, together with the observed
    constants and the defect ratio between the first two resolutions.
    """
    consts = []
    maxima = []
    for k, (rep, h) in enumerate(zip(reports, hs)):
        if rep.rate.size == 0:
            continue
        dt = np.diff(rep.times).mean() if dts is None else dts[k]
        worst = float(np.max(np.abs(rep.defect)))
        maxima.append(worst)
        consts.append(worst / (h**2 + dt))
    ratio = maxima[0] / maxima[1] if len(maxima) >= 2 and maxima[1] > 0 else math.nan
    return safety * max(consts), consts, ratio


# ---------------------------------------------------------------------------
# areas, densities, first variation


def c_constant(n: int) -> float:
    """c(n) = 2 * int_0^inf exp(-y^2) y^(n+1) dy, by adaptive quadrature."""
    val, _ = integrate.quad(lambda y: 2 * math.exp(-y * y) * y ** (n + 1), 0, math.inf, epsabs=1e-14, epsrel=1e-13)
    return val


def lower_density_bound(n: int) -> float:
    """The non-sharp density floor 1 / (4 c(n) + 4), reported only."""
    return 1.0 / (4 * c_constant(n) + 4)


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def smooth_ball(dist: np.ndarray, radius: float, n: int, width: float = 0.0) -> np.ndarray:
    """Indicator of B_radius, optionally smoothed in the variable q = (d/radius)^n.

    The transition is antisymmetric about q = 1, so for any n-plane through
    the centre the smoothed area equals the sharp area omega_n radius^n.
    ``width = 0`` gives the sharp indicator.
    """
    q = (np.asarray(dist) / radius) ** n
    if width <= 0:
        return (q <= 1).astype(float)
    return quintic_step((q - 1 + width) / (2 * width))


def ball_mass(points, weights, center, radius, n, width=0.0) -> float:
    d = np.linalg.norm(np.asarray(points) - np.asarray(center), axis=-1)
    return float(np.sum(np.asarray(weights) * smooth_ball(d, radius, n, width)))


@dataclass
class VolumeDensityReport:
    R: float
    lambdas: list
    times: list
    ratios: np.ndarray  # (len(lambdas), len(times))

    @property
    def sup_per_lambda(self) -> np.ndarray:
        return np.max(self.ratios, axis=1)

    @property
    def spread(self) -> float:
        sup = self.sup_per_lambda
        return float(np.max(sup) / np.min(sup)) if np.min(sup) > 0 else math.inf

    def bounded(self, limit: float = 10.0) -> bool:
        return self.spread <= limit

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "lambdas": list(self.lambdas),
            "times": list(self.times),
            "ratios": self.ratios.tolist(),
            "sup_per_lambda": self.sup_per_lambda.tolist(),
            "spread": self.spread,
        }


def volume_density_bound(
    trace: FlowTrace,
    R: float = 1.0,
    lambdas: Sequence[float] = (1, 2, 4, 8),
    times: Optional[Sequence[float]] = None,
    n_times: int = 6,
    width: float = 0.0,
) -> VolumeDensityReport:
    """R^-n area(Sigma^lambda_t in B_R) for each lambda over common rescaled times.

    Rescaled times default to ``n_times`` points in the window covered by
    the trace for every lambda, so that all lambdas see the same stretch of
    the rescaled flow.
    """
    from .blowup import covered_window, lambda_rescale

    rep = trace.singularity_report
    if rep is None:
        from .flow import NoSingularityError

        raise NoSingularityError("volume density ratios need a singularity report")
    lambdas = list(lambdas)
    if times is None:
        lo, hi = -math.inf, math.inf
        for lam in lambdas:
            a, b = covered_window(trace, lam)
            lo, hi = max(lo, a), min(hi, b)
        if not lo < hi:
            raise ValueError("no rescaled time is covered by the trace for every lambda")
        times = list(np.linspace(lo, hi, n_times))
    n = trace.snapshots[0].immersion.n
    out = np.zeros((len(lambdas), len(times)))
    for i, lam in enumerate(lambdas):
        for j, tt in enumerate(times):
            cloud = lambda_rescale(trace, lam, tt)
            out[i, j] = cloud.ball_mass(np.zeros(2 * n), R, width) / R**n
    return VolumeDensityReport(R, lambdas, [float(x) for x in times], out)


def first_variation_residual(
    trace: FlowTrace, spec: Optional[KernelSpec] = None, pairs: Optional[Sequence[int]] = None
) -> float:
    """Residual of d/dt int phi = int (D phi . H - phi |H|^2) between snapshots.

    phi is the spatial cutoff of ``spec`` (phi = 1 when ``spec`` is None or
    has no radius).  Normalised per pair by the largest term; the maximum
    over pairs is returned.
    """
    snaps = trace.snapshots
    if len(snaps) < 2:
        raise ValueError("need at least two snapshots")
    if spec is None:
        dim = 2 * snaps[0].immersion.n
        spec = KernelSpec(np.zeros(dim), math.inf, None)

    def terms(s: FlowState):
        geo = s.geometry
        im = geo.immersion
        if spec.cutoff_radius is None:
            shifts = [np.zeros(2 * im.n)]
        else:
            span = float(np.max(np.linalg.norm(im.positions - spec.X0, axis=-1)))
            shifts = im.lift_shifts(span + spec.support_radius())
        mass = flux = absorb = 0.0
        H = geo.mean_curvature
        H2 = geo.mean_curvature_sq
        for shift in shifts:
            X = im.positions + shift
            phi = spec.phi(X)
            mass += float(np.sum(geo.weights * phi))
            flux += float(np.sum(geo.weights * np.sum(spec.phi_gradient(X) * H, axis=-1)))
            absorb += float(np.sum(geo.weights * phi * H2))
        return mass, flux, absorb

    idx = range(len(snaps) - 1) if pairs is None else pairs
    worst = 0.0
    for k in idx:
        a, b = snaps[k], snaps[k + 1]
        ma, fa, aa = terms(a)
        mb, fb, ab = terms(b)
        rate = (mb - ma) / (b.t - a.t)
        flux, absorb = 0.5 * (fa + fb), 0.5 * (aa + ab)
        num = abs(rate - flux + absorb)
        scale = max(abs(rate), abs(flux), abs(absorb))
        worst = max(worst, num / scale if scale > 1e-300 else num)
    return float(worst)
