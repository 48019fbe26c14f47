"""Discrete Lagrangian immersions on periodic grids in flat C^n (n = 1, 2).

Points of C^n are stored as real vectors ordered ``(x_1, ..., x_n, y_1, ..., y_n)``
with ``z_j = x_j + i y_j``.  The parameter domain is the torus ``[0, 2*pi)^n``
sampled uniformly; an immersion may additionally carry one *wrap* vector per
grid direction, the translation picked up when the parameter winds once
around that direction (zero for closed surfaces, a lattice vector for graphs
over a flat torus).

All derivatives are second-order central differences; integrals use the
periodic trapezoidal rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

# Neighbour phase increments beyond this are treated as an under-resolved branch.
BRANCH_JUMP_LIMIT = 0.5 * np.pi


class GeometryError(ValueError):
    """Degenerate frame/metric or an ambiguous Lagrangian angle branch."""


class ScenarioError(ValueError):
    """Unknown scenario or parameters outside the documented ranges."""


@dataclass(frozen=True)
class AmbientSpace:
    """Flat C^n, optionally quotiented by the lattice ``periods[j] * e_{x_j}``."""

    n: int
    periods: Optional[tuple] = None

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError(f"complex dimension must be 1 or 2, got {self.n}")
        if self.periods is not None:
            periods = tuple(float(p) for p in self.periods)
            if len(periods) != self.n or any(not p > 0 for p in periods):
                raise ValueError(f"periods must be {self.n} positive reals")
            object.__setattr__(self, "periods", periods)

    @property
    def real_dim(self) -> int:
        return 2 * self.n

    def complex_structure(self) -> np.ndarray:
        return complex_structure(self.n)


def complex_structure(n: int) -> np.ndarray:
    """Matrix of J (J d/dx_j = d/dy_j) in the ``(x, y)`` ordering."""
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, -eye], [eye, zero]])


def symplectic_pairing(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """omega(a, b) = <J a, b> for the standard Kaehler form, broadcast over leading axes."""
    n = a.shape[-1] // 2
    return np.sum(a[..., :n] * b[..., n:] - a[..., n:] * b[..., :n], axis=-1)


def to_complex(v: np.ndarray) -> np.ndarray:
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]


def wrap_phase(x):
    """Reduce angles to [-pi, pi)."""
    return (np.asarray(x) + np.pi) % TWO_PI - np.pi


@dataclass
class Immersion:
    """Periodic-grid sample of F: T^n -> R^{2n}.

    ``positions`` has shape ``grid_shape + (2n,)``; ``wraps`` has shape
    ``(n, 2n)`` and row ``j`` is the jump of F across the seam of direction j.
    """

    positions: np.ndarray
    ambient: AmbientSpace
    wraps: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.ambient.n
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != n + 1 or self.positions.shape[-1] != 2 * n:
            raise ValueError(
                f"positions must have shape (N_1, ..., N_{n}, {2 * n}); "
                f"got {self.positions.shape}"
            )
        if any(s < 8 for s in self.grid_shape):
            raise ValueError(f"every grid resolution must be >= 8, got {self.grid_shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.wraps is None:
            self.wraps = np.zeros((n, 2 * n))
        else:
            self.wraps = np.asarray(self.wraps, dtype=float).reshape(n, 2 * n)

    @property
    def n(self) -> int:
        return self.ambient.n

    @property
    def grid_shape(self) -> tuple:
        return tuple(self.positions.shape[:-1])

    @property
    def spacing(self) -> tuple:
        return tuple(TWO_PI / s for s in self.grid_shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def parameters(self) -> list:
        axes = [np.arange(s) * h for s, h in zip(self.grid_shape, self.spacing)]
        return np.meshgrid(*axes, indexing="ij")

    def linear_part(self) -> np.ndarray:
        """The non-periodic part sum_j u_j * wraps[j] / (2 pi)."""
        lin = np.zeros_like(self.positions)
        for u, w in zip(self.parameters(), self.wraps):
            lin += u[..., None] * (w / TWO_PI)
        return lin

    def with_positions(self, positions: np.ndarray) -> "Immersion":
        return Immersion(positions, self.ambient, self.wraps.copy())

    def transformed(self, matrix: np.ndarray, offset=None) -> "Immersion":
        """Apply X -> matrix @ X + offset (wraps transform linearly)."""
        pos = self.positions @ matrix.T
        if offset is not None:
            pos = pos + offset
        return Immersion(pos, AmbientSpace(self.n), self.wraps @ matrix.T)

    def scaled(self, factor: float, center=None) -> "Immersion":
        c = np.zeros(2 * self.n) if center is None else np.asarray(center, dtype=float)
        return Immersion(factor * (self.positions - c), AmbientSpace(self.n), factor * self.wraps)

    def lift_shifts(self, reach: float) -> np.ndarray:
        """Deck translations sum_j k_j * wraps[j] needed to cover distance ``reach``.

        A periodic (non-closed) immersion is the fundamental domain of a
        complete submanifold of R^{2n}; integrals of decaying kernels over that
        submanifold are sums over these translated copies.
        """
        ranges = []
        for w in self.wraps:
            norm = float(np.linalg.norm(w))
            if norm == 0.0:
                ranges.append(np.array([0]))
            else:
                k = int(np.ceil(reach / norm)) + 1
                ranges.append(np.arange(-k, k + 1))
        grids = np.meshgrid(*ranges, indexing="ij")
        ks = np.stack([g.ravel() for g in grids], axis=-1)
        return ks.astype(float) @ self.wraps


# ---------------------------------------------------------------------------
# finite differences on the periodic grid


def _shift(f, offsets, lead=0):
    """f at grid index i + offsets (periodic); grid axes start at ``lead``."""
    axes = tuple(range(lead, lead + len(offsets)))
    return np.roll(f, tuple(-o for o in offsets), axis=axes)


def _unit(n, axis, step=1):
    o = [0] * n
    o[axis] = step
    return o


def _differences(f, spacing, phase=False, order=2, lead=0):
    """First and second central differences of a grid field.

    With ``phase=True`` the field is an angle and every difference is taken
    modulo 2 pi, which makes the result independent of the branch.
    ``order`` selects the 3-point (2) or 5-point (4) stencils.
    Grid axes are ``lead, lead + 1, ...``; leading axes are carried along.
    Returns ``(first, second)`` where ``first[i]`` and ``second[i][j]`` have
    the shape of ``f``.
    """
    if order == 4:
        return _differences4(f, spacing, phase, lead)
    if order != 2:
        raise ValueError(f"unsupported stencil order {order}")
    n = len(spacing)
    diff = wrap_phase if phase else (lambda x: x)

    def d(a, b):
        return diff(a - b)

    first = []
    for i in range(n):
        fp = _shift(f, _unit(n, i, 1), lead)
        fm = _shift(f, _unit(n, i, -1), lead)
        first.append(d(fp, fm) / (2 * spacing[i]))
    second = [[None] * n for _ in range(n)]
    for i in range(n):
        fp = _shift(f, _unit(n, i, 1), lead)
        fm = _shift(f, _unit(n, i, -1), lead)
        second[i][i] = (d(fp, f) - d(f, fm)) / spacing[i] ** 2
        for j in range(i + 1, n):
            o_pp = [0] * n
            o_pp[i], o_pp[j] = 1, 1
            o_pm = [0] * n
            o_pm[i], o_pm[j] = 1, -1
            o_mp = [0] * n
            o_mp[i], o_mp[j] = -1, 1
            o_mm = [0] * n
            o_mm[i], o_mm[j] = -1, -1
            mixed = (
                d(_shift(f, o_pp, lead), _shift(f, o_pm, lead)) - d(_shift(f, o_mp, lead), _shift(f, o_mm, lead))
            ) / (4 * spacing[i] * spacing[j])
            second[i][j] = second[j][i] = mixed
    return first, second


def _differences4(f, spacing, phase, lead=0):
    # every wide difference is a sum of (wrapped) neighbour differences, so
    # phases are handled without ever wrapping a jump larger than one cell
    n = len(spacing)
    diff = wrap_phase if phase else (lambda x: x)
    first, second = [], [[None] * n for _ in range(n)]
    for i in range(n):
        ax = i + lead
        d0 = diff(np.roll(f, -1, axis=ax) - f)  # f[k+1] - f[k]
        dm1 = np.roll(d0, 1, axis=ax)
        dp1 = np.roll(d0, -1, axis=ax)
        dm2 = np.roll(d0, 2, axis=ax)
        first.append((7 * (d0 + dm1) - dp1 - dm2) / (12 * spacing[i]))
        second[i][i] = (15 * (d0 - dm1) - dp1 + dm2) / (12 * spacing[i] ** 2)
    for i in range(n):
        for j in range(i + 1, n):
            g, ax = first[i], j + lead
            gp1, gm1 = np.roll(g, -1, axis=ax), np.roll(g, 1, axis=ax)
            gp2, gm2 = np.roll(g, -2, axis=ax), np.roll(g, 2, axis=ax)
            second[i][j] = second[j][i] = (8 * (gp1 - gm1) - (gp2 - gm2)) / (12 * spacing[j])
    return first, second


def _unwrap_grid(phase: np.ndarray) -> np.ndarray:
    """Continuous branch along rows then columns from vertex (0, ..., 0)."""
    out = np.unwrap(phase, axis=0)
    if phase.ndim == 2:
        # fix the first column, then unwrap every row starting from it
        out = np.unwrap(np.concatenate([out[:, :1], phase[:, 1:]], axis=1), axis=1)
    return out


@dataclass
class GeometryCache:
    """Per-vertex first and second order geometry of an immersion.

    Index conventions: ``tangent_frame[..., i, :]`` is dF/du_i,
    ``second_fundamental_form[..., a, i, j]`` is h^a_ij in the orthonormal
    frame ``e_i`` with normals ``nu_a = J e_a``.
    """

    immersion: Immersion
    tangent_frame: np.ndarray
    metric: np.ndarray
    metric_inv: np.ndarray
    area_element: np.ndarray
    orthonormal_frame: np.ndarray
    normal_frame: np.ndarray
    christoffel: np.ndarray
    second_fundamental_form: np.ndarray
    mean_curvature: np.ndarray
    norm_A_sq: np.ndarray
    theta: np.ndarray
    cos_theta: np.ndarray
    grad_theta: np.ndarray
    grad_cos_theta: np.ndarray
    frame_determinant: np.ndarray
    order: int = 2
    _theta_derivs: tuple = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.immersion.n

    @property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights (area element times cell volume)."""
        return self.area_element * self.immersion.cell_volume

    @property
    def volume(self) -> float:
        return float(np.sum(self.weights))

    @property
    def mean_curvature_sq(self) -> np.ndarray:
        return np.sum(self.mean_curvature**2, axis=-1)

    @property
    def positions(self) -> np.ndarray:
        return self.immersion.positions

    def tangent_projector(self) -> np.ndarray:
        e = self.orthonormal_frame
        return np.einsum("...ai,...aj->...ij", e, e)

    def normal_part(self, vectors: np.ndarray) -> np.ndarray:
        e = self.orthonormal_frame
        coeff = np.einsum("...ai,...i->...a", e, vectors)
        return vectors - np.einsum("...a,...ai->...i", coeff, e)

    def laplacian(self, f: np.ndarray, phase: bool = False) -> np.ndarray:
        """Laplace-Beltrami operator g^ij (f_ij - Gamma^k_ij f_k) of a scalar field."""
        if phase and self._theta_derivs is not None and f is self.theta:
            first, second = self._theta_derivs
        else:
            first, second = _differences(f, self.immersion.spacing, phase, self.order)
        return _laplacian_from(first, second, self.metric_inv, self.christoffel)

    def gradient(self, f: np.ndarray, phase: bool = False) -> np.ndarray:
        """Tangential gradient g^ij f_j dF/du_i as a vector in R^{2n}."""
        first, _ = _differences(f, self.immersion.spacing, phase, self.order)
        return _gradient_from(first, self.metric_inv, self.tangent_frame)


def _laplacian_from(first, second, ginv, gamma):
    n = len(first)
    out = np.zeros_like(first[0])
    for i in range(n):
        for j in range(n):
            term = second[i][j]
            for k in range(n):
                term = term - gamma[..., k, i, j] * first[k]
            out = out + ginv[..., i, j] * term
    return out


def _gradient_from(first, ginv, frame):
    df = np.stack(first, axis=-1)[..., None, :]
    return ((df @ ginv) @ frame)[..., 0, :]


def _frame_cf(im: Immersion, order: int = 2):
    """Tangent vectors and Hessian in component-first layout.

    Returns lists ``F[i]`` and ``D[i][j]`` of arrays shaped ``(2n, *grid)``;
    keeping the component axis first makes every later pass contiguous.
    """
    n = im.n
    periodic = np.ascontiguousarray(np.moveaxis(im.positions - im.linear_part(), -1, 0))
    first, second = _differences(periodic, im.spacing, order=order, lead=1)
    expand = (slice(None),) + (None,) * n
    F = [first[i] + (im.wraps[i] / TWO_PI)[expand] for i in range(n)]
    return F, second


def _frame(im: Immersion, order: int = 2):
    F, D = _frame_cf(im, order)
    frame = np.stack([np.moveaxis(f, 0, -1) for f in F], axis=-2)  # (..., n, 2n)
    hess = np.stack(
        [np.stack([np.moveaxis(d, 0, -1) for d in row], axis=-2) for row in D], axis=-3
    )  # (..., n, n, 2n)
    return frame, hess


def tangent_frame(im: Immersion, order: int = 2) -> np.ndarray:
    return _frame(im, order)[0]


def lagrangian_residual(im: Immersion) -> float:
    """max |omega(dF/du_i, dF/du_j)| over vertices and pairs i < j."""
    frame = tangent_frame(im)
    _check_rank(frame)
    if im.n == 1:
        return 0.0
    return float(np.max(np.abs(symplectic_pairing(frame[..., 0, :], frame[..., 1, :]))))


def _metric_cf(F):
    """Metric, its determinant and inverse as nested lists of grid arrays."""
    n = len(F)
    g = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            g[i][j] = g[j][i] = _dot_cf(F[i], F[j])
    det = g[0][0] if n == 1 else g[0][0] * g[1][1] - g[0][1] * g[1][0]
    scale = max(float(np.max(np.abs(g[i][i]))) for i in range(n)) ** n
    if not np.all(np.isfinite(det)) or np.any(det <= 1e-14 * max(scale, 1e-300)):
        raise GeometryError("degenerate tangent frame (rank < n) at some vertex")
    if n == 1:
        ginv = [[1.0 / det]]
    else:
        off = -g[0][1] / det
        ginv = [[g[1][1] / det, off], [off, g[0][0] / det]]
    return g, det, ginv


def _as_matrix(m):
    n = len(m)
    return np.stack([np.stack([m[i][j] for j in range(n)], axis=-1) for i in range(n)], axis=-2)


def _check_rank(frame):
    n = frame.shape[-2]
    F = [np.moveaxis(frame[..., i, :], -1, 0) for i in range(n)]
    g, det, _ = _metric_cf(F)
    return _as_matrix(g), det


def _inv_small(g, det):
    if g.shape[-1] == 1:
        return 1.0 / g
    inv = np.empty_like(g)
    inv[..., 0, 0] = g[..., 1, 1] / det
    inv[..., 1, 1] = g[..., 0, 0] / det
    inv[..., 0, 1] = inv[..., 1, 0] = -g[..., 0, 1] / det
    return inv


def _dot_cf(a, b):
    # inner product over the leading component axis
    out = a[0] * b[0]
    for c in range(1, a.shape[0]):
        out += a[c] * b[c]
    return out


def _curvature_cf(im: Immersion, order: int = 2, want_A: bool = True):
    """Metric, Christoffel symbols, second fundamental form, H and |A|^2.

    Written with explicit loops over the (at most two) tangent indices so
    that every operation is a contiguous vectorised pass over the grid.
    All vector quantities are component-first.
    """
    n = im.n
    F, D = _frame_cf(im, order)
    g, det, ginv = _metric_cf(F)
    gamma = [[[None] * n for _ in range(n)] for _ in range(n)]
    A = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            proj = [_dot_cf(D[i][j], F[l]) for l in range(n)]
            a = D[i][j].copy()
            for k in range(n):
                gk = ginv[k][0] * proj[0]
                for l in range(1, n):
                    gk = gk + ginv[k][l] * proj[l]
                gamma[k][i][j] = gamma[k][j][i] = gk
                a -= gk * F[k]
            A[i][j] = A[j][i] = a
    H = ginv[0][0] * A[0][0]
    for i in range(n):
        for j in range(n):
            if i or j:
                H += ginv[i][j] * A[i][j]
    A_sq = None
    if want_A:
        A_sq = np.zeros_like(det)
        pairs = [(i, j) for i in range(n) for j in range(n)]
        for p, (i, j) in enumerate(pairs):
            for (k, l) in pairs[p:]:
                w = ginv[i][k] * ginv[j][l]
                if (k, l) != (i, j):
                    w = 2 * w
                A_sq += w * _dot_cf(A[i][j], A[k][l])
    return F, g, det, ginv, gamma, A, H, A_sq


def _curvature_core(im: Immersion, order: int = 2):
    """Component-last view of :func:`_curvature_cf` for the geometry cache."""
    n = im.n
    F, g, det, ginv, gamma, A, H, A_sq = _curvature_cf(im, order)
    last = lambda v: np.moveaxis(v, 0, -1)  # noqa: E731
    frame = np.stack([last(f) for f in F], axis=-2)
    A_arr = np.stack([np.stack([last(A[i][j]) for j in range(n)], axis=-2) for i in range(n)], axis=-3)
    christoffel = np.stack([_as_matrix(gamma[k]) for k in range(n)], axis=-3)
    return frame, _as_matrix(g), det, _as_matrix(ginv), christoffel, A_arr, last(H), A_sq


def mean_curvature_vector(im: Immersion, order: int = 2) -> np.ndarray:
    """Mean curvature vector alone: the normal part of g^ij F_ij.

    This is the cheap path used by time integrators.
    """
    n = im.n
    F, D = _frame_cf(im, order)
    _, _, ginv = _metric_cf(F)
    L = ginv[0][0] * D[0][0]
    for i in range(n):
        for j in range(n):
            if i or j:
                L += ginv[i][j] * D[i][j]
    proj = [_dot_cf(L, F[l]) for l in range(n)]
    for k in range(n):
        coeff = ginv[k][0] * proj[0]
        for l in range(1, n):
            coeff = coeff + ginv[k][l] * proj[l]
        L -= coeff * F[k]
    return np.moveaxis(L, 0, -1)


def _frame_det_cf(F):
    # complex determinant of the frame written in z_j = x_j + i y_j
    n = len(F)
    z = [F[i][:n] + 1j * F[i][n:] for i in range(n)]
    if n == 1:
        return z[0][0]
    return z[0][0] * z[1][1] - z[0][1] * z[1][0]


def flow_diagnostics(im: Immersion, order: int = 2, with_H: bool = False) -> dict:
    """Per-step scalars: volume, max |A|^2, min cos(theta), max |H|, h_min.

    With ``with_H`` the mean curvature vector (component-last) is included
    under key ``"H"`` so an integrator does not recompute it.
    """
    F, g, det, ginv, _, _, H, A_sq = _curvature_cf(im, order)
    det_z = _frame_det_cf(F)
    cos_theta = det_z.real / np.abs(det_z)
    out = {
        "volume": float(np.sum(np.sqrt(det)) * im.cell_volume),
        "max_A_sq": float(np.max(A_sq)),
        "min_cos_theta": float(np.min(cos_theta)),
        "max_H": float(np.sqrt(np.max(_dot_cf(H, H)))),
        "h_min": float(min_spacing(_as_matrix(g), im.spacing)),
        "argmax_A": int(np.argmax(A_sq)),
        "root_phase": float(np.angle(det_z.flat[0])),
    }
    if with_H:
        out["H"] = np.moveaxis(H, 0, -1)
    return out


def min_spacing(g: np.ndarray, spacing) -> float:
    """Smallest parametric spacing times the smallest sqrt metric eigenvalue."""
    if g.shape[-1] == 1:
        lam = g[..., 0, 0]
    else:
        tr = g[..., 0, 0] + g[..., 1, 1]
        det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
        lam = 0.5 * tr - np.sqrt(np.maximum(0.25 * tr**2 - det, 0.0))
    return min(spacing) * float(np.sqrt(np.min(lam)))


def compute_geometry(
    im: Immersion, theta_root: Optional[float] = None, order: int = 2
) -> GeometryCache:
    """Populate a :class:`GeometryCache` for ``im``.

    The Lagrangian angle is the argument of det(dF/du) written in complex
    coordinates, normalised by sqrt(det g).  It is unwrapped from vertex
    (0, ..., 0); ``theta_root`` selects the 2*pi*k branch at that vertex
    (nearest to the given value), which is how flows keep a continuous
    branch in time.  ``order`` (2 or 4) is the finite-difference stencil.
    """
    n = im.n
    frame, g, detg, ginv, christoffel, A, H, A_sq = _curvature_core(im, order)
    sqrt_g = np.sqrt(detg)

    # orthonormal tangent frame by Gram-Schmidt and its J-image
    f1 = frame[..., 0, :]
    e1 = f1 / np.sqrt(g[..., 0, 0])[..., None]
    if n == 2:
        f2 = frame[..., 1, :]
        f2 = f2 - np.sum(f2 * e1, axis=-1, keepdims=True) * e1
        e2 = f2 / np.sqrt(np.sum(f2 * f2, axis=-1))[..., None]
        ortho = np.stack([e1, e2], axis=-2)
    else:
        ortho = e1[..., None, :]
    normals = np.concatenate([-ortho[..., n:], ortho[..., :n]], axis=-1)  # J e_a

    frame_t = np.swapaxes(frame, -1, -2)

    # coefficients of e_a in the coordinate frame: e_a = E[a, i] F_i
    E = (ortho @ frame_t) @ ginv
    E_t = np.swapaxes(E, -1, -2)
    h = np.stack(
        [E @ np.sum(A * normals[..., None, None, g_, :], axis=-1) @ E_t for g_ in range(n)], axis=-3
    )  # h[g, a, b] = <A(e_a, e_b), nu_g>

    if n == 2:
        z = to_complex(frame)
        det_z = z[..., 0, 0] * z[..., 1, 1] - z[..., 0, 1] * z[..., 1, 0]
    else:
        det_z = f1[..., 0] + 1j * f1[..., 1]
    phase = np.angle(det_z)
    theta = _unwrap_grid(phase)
    _check_branch(phase)
    first_t, second_t = _differences(phase, im.spacing, True, order)
    root = theta.flat[0]
    if theta_root is not None:
        root_target = theta_root + wrap_phase(root - theta_root)
        theta = theta + (root_target - root)

    grad_theta = _gradient_from(first_t, ginv, frame)
    cos_theta = np.cos(theta)
    grad_cos = -np.sin(theta)[..., None] * grad_theta

    return GeometryCache(
        immersion=im,
        tangent_frame=frame,
        metric=g,
        metric_inv=ginv,
        area_element=sqrt_g,
        orthonormal_frame=ortho,
        normal_frame=normals,
        christoffel=christoffel,
        second_fundamental_form=h,
        mean_curvature=H,
        norm_A_sq=A_sq,
        theta=theta,
        cos_theta=cos_theta,
        grad_theta=grad_theta,
        grad_cos_theta=grad_cos,
        frame_determinant=det_z,
        order=order,
        _theta_derivs=(first_t, second_t),
    )


def _check_branch(phase):
    for axis in range(phase.ndim):
        jump = np.abs(wrap_phase(np.roll(phase, -1, axis=axis) - phase))
        if np.any(jump > BRANCH_JUMP_LIMIT):
            raise GeometryError(
                f"Lagrangian angle jumps by {np.max(jump):.3f} > pi/2 between neighbours "
                f"along grid axis {axis}; refine the grid"
            )


def angle_gradient_residual(geo: GeometryCache) -> float:
    """Relative L2 norm of H - J grad(theta); 0 when both sides vanish."""
    J = complex_structure(geo.n)
    diff = geo.mean_curvature - geo.grad_theta @ J.T
    num = np.sum(geo.weights * np.sum(diff**2, axis=-1))
    den = np.sum(geo.weights * geo.mean_curvature_sq)
    if den <= 1e-20 * float(np.sum(geo.weights)):
        # no curvature to compare against: report the absolute residual
        return float(np.sqrt(num))
    return float(np.sqrt(num / den))


def l2_norm(geo: GeometryCache, f: np.ndarray) -> float:
    f = np.asarray(f)
    sq = f**2 if f.ndim == geo.n else np.sum(f**2, axis=-1)
    return float(np.sqrt(np.sum(geo.weights * sq)))


# ---------------------------------------------------------------------------
# scenario catalogue


def _grid(N, n):
    u = np.arange(N) * (TWO_PI / N)
    return np.meshgrid(*([u] * n), indexing="ij")


def circle(r0: float = 1.0, N: int = 64, center=(0.0, 0.0)) -> Immersion:
    if r0 <= 0:
        raise ScenarioError("radius must be positive")
    (u,) = _grid(N, 1)
    pos = np.stack([r0 * np.cos(u), r0 * np.sin(u)], axis=-1) + np.asarray(center, float)
    return Immersion(pos, AmbientSpace(1))


def graph_curve(eps: float = 0.1, N: int = 64) -> Immersion:
    """Graph y = eps sin x over the circle x in [0, 2 pi)."""
    (u,) = _grid(N, 1)
    pos = np.stack([u, eps * np.sin(u)], axis=-1)
    return Immersion(pos, AmbientSpace(1, (TWO_PI,)), wraps=[[TWO_PI, 0.0]])


def clifford_torus(r0: float = 1.0, N: int = 32) -> Immersion:
    """(u, v) -> (r0 e^{iu}, r0 e^{iv})."""
    if r0 <= 0:
        raise ScenarioError("radius must be positive")
    u, v = _grid(N, 2)
    pos = r0 * np.stack([np.cos(u), np.cos(v), np.sin(u), np.sin(v)], axis=-1)
    return Immersion(pos, AmbientSpace(2))


def lagrangian_graph(eps: float = 0.1, delta: float = 0.1, N: int = 32) -> Immersion:
    """Graph of d(eps cos x + delta cos y) over the flat torus: (x, y, -eps sin x, -delta sin y).

    Its Lagrangian angle is -arctan(eps cos x) - arctan(delta cos y), so it is
    almost calibrated exactly when arctan|eps| + arctan|delta| < pi/2.
    """
    if np.arctan(abs(eps)) + np.arctan(abs(delta)) >= np.pi / 2:
        raise ScenarioError(
            f"lagrangian_graph({eps}, {delta}) is not almost calibrated (need |eps*delta| < 1)"
        )
    u, v = _grid(N, 2)
    pos = np.stack([u, v, -eps * np.sin(u), -delta * np.sin(v)], axis=-1)
    wraps = [[TWO_PI, 0, 0, 0], [0, TWO_PI, 0, 0]]
    return Immersion(pos, AmbientSpace(2, (TWO_PI, TWO_PI)), wraps=wraps)


def perturbed_clifford(r0: float = 1.0, eps: float = 0.05, N: int = 32, k: int = 3) -> Immersion:
    """Product of two perturbed circles r0 (1 + eps cos k u) e^{iu}; Lagrangian for any eps."""
    if not 0 <= abs(eps) < 1:
        raise ScenarioError("perturbation amplitude must satisfy |eps| < 1")
    u, v = _grid(N, 2)
    ru = r0 * (1 + eps * np.cos(k * u))
    rv = r0 * (1 + eps * np.cos(k * v))
    pos = np.stack([ru * np.cos(u), rv * np.cos(v), ru * np.sin(u), rv * np.sin(v)], axis=-1)
    return Immersion(pos, AmbientSpace(2))


def flat_line(N: int = 64, theta0: float = 0.0, length: float = TWO_PI) -> Immersion:
    """Straight line through the origin in direction e^{i theta0}, centred on 0."""
    (u,) = _grid(N, 1)
    s = (u - np.pi) * (length / TWO_PI)
    d = np.array([np.cos(theta0), np.sin(theta0)])
    ambient = AmbientSpace(1, (length,)) if theta0 == 0.0 else AmbientSpace(1)
    return Immersion(s[..., None] * d, ambient, wraps=[length * d])


def flat_plane(N: int = 32, theta0: float = 0.0, length: float = TWO_PI) -> Immersion:
    """Lagrangian plane {(e^{i theta0} s, t)} through the origin with constant angle theta0."""
    u, v = _grid(N, 2)
    scale = length / TWO_PI
    s, t = (u - np.pi) * scale, (v - np.pi) * scale
    d1 = np.array([np.cos(theta0), 0.0, np.sin(theta0), 0.0])
    d2 = np.array([0.0, 1.0, 0.0, 0.0])
    pos = s[..., None] * d1 + t[..., None] * d2
    ambient = AmbientSpace(2, (length, length)) if theta0 == 0.0 else AmbientSpace(2)
    return Immersion(pos, ambient, wraps=[length * d1, length * d2])


def nonlagrangian_graph(amplitude: float = 0.1, N: int = 32) -> Immersion:
    """(x, y, a sin y, 0): a graph that is not Lagrangian (omega = a cos y)."""
    u, v = _grid(N, 2)
    pos = np.stack([u, v, amplitude * np.sin(v), np.zeros_like(u)], axis=-1)
    wraps = [[TWO_PI, 0, 0, 0], [0, TWO_PI, 0, 0]]
    return Immersion(pos, AmbientSpace(2, (TWO_PI, TWO_PI)), wraps=wraps)


SCENARIOS = {
    "circle": circle,
    "graph_curve": graph_curve,
    "clifford_torus": clifford_torus,
    "lagrangian_graph": lagrangian_graph,
    "perturbed_clifford": perturbed_clifford,
    "flat_line": flat_line,
    "flat_plane": flat_plane,
    "nonlagrangian_graph": nonlagrangian_graph,
}

ALMOST_CALIBRATED = frozenset({"graph_curve", "lagrangian_graph", "flat_line", "flat_plane"})


def build_scenario(name: str, **params) -> Immersion:
    """Build a named analytic immersion, e.g. ``build_scenario("circle", r0=1.0, N=64)``."""
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    N = params.get("N")
    if N is not None and int(N) < 8:
        raise ScenarioError(f"resolution must be >= 8, got {N}")
    try:
        return factory(**params)
    except TypeError as exc:
        raise ScenarioError(f"bad parameters for {name}: {exc}") from None


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    """A Haar-random U(n) acting on R^{2n} (x, y ordering); preserves omega and J."""
    z = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    q, r = np.linalg.qr(z)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    return np.block([[q.real, -q.imag], [q.imag, q.real]])
