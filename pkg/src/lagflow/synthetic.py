"""Constructed clouds with known tangent-cone structure.

These are the reference inputs for the plane-fitting, density and
complex-structure checks: unions of planes through the origin sampled on
square grids, and a static plane carrying a small Lagrangian perturbation.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .blowup import RescaledCloud, cloud_from_immersion, plane_angle
from .mesh import TWO_PI, AmbientSpace, Immersion


def orthonormal_rows(vectors) -> np.ndarray:
    q, r = np.linalg.qr(np.asarray(vectors, dtype=float).T)
    if np.min(np.abs(np.diag(r))) < 1e-12:
        raise ValueError("vectors are linearly dependent")
    return q.T


def plane_cloud(
    basis,
    N: int = 100,
    extent: float = 2.0,
    offset=None,
    cos_theta: Optional[float] = None,
) -> RescaledCloud:
    """Cell-centred grid sample of the n-plane spanned by ``basis`` on [-extent, extent]^n.

    ``offset`` translates the plane; ``cos_theta`` overrides the carried
    angle weight (for complex planes, where the Lagrangian angle is undefined).
    """
    basis = orthonormal_rows(basis)
    n, dim = basis.shape
    if dim != 2 * n:
        raise ValueError("basis must span an n-plane in R^{2n}")
    h = 2 * extent / N
    axis = -extent + h * (np.arange(N) + 0.5)
    coords = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    pts = coords @ basis
    if offset is not None:
        pts = pts + np.asarray(offset, dtype=float)
    M = len(pts)
    theta = plane_angle(basis)
    if cos_theta is None:
        cos_theta = math.cos(theta)
    else:
        theta = math.acos(cos_theta)
    return RescaledCloud(
        points=pts,
        weights=np.full(M, h**n),
        tangent=np.broadcast_to(basis, (M, n, dim)).copy(),
        theta=np.full(M, theta),
        cos_theta=np.full(M, float(cos_theta)),
        mean_curvature=np.zeros((M, dim)),
        grad_cos_theta=np.zeros((M, dim)),
        norm_A_sq=np.zeros(M),
        sff=np.zeros((M, n, n, n)),
        kind="synthetic",
        source={"construction": "plane", "basis": basis.tolist()},
    )


def union(clouds: Sequence[RescaledCloud], label: str = "union") -> RescaledCloud:
    cat = lambda name: np.concatenate([getattr(c, name) for c in clouds])  # noqa: E731
    return RescaledCloud(
        points=cat("points"),
        weights=cat("weights"),
        tangent=cat("tangent"),
        theta=cat("theta"),
        cos_theta=cat("cos_theta"),
        mean_curvature=cat("mean_curvature"),
        grad_cos_theta=cat("grad_cos_theta"),
        norm_A_sq=cat("norm_A_sq"),
        sff=cat("sff"),
        kind="synthetic",
        source={"construction": label, "parts": [c.source for c in clouds]},
    )


def lagrangian_plane(theta: float, n: int = 2) -> np.ndarray:
    """Basis of the Lagrangian plane e^{i theta / n} R^n (angle theta)."""
    c, s = math.cos(theta / n), math.sin(theta / n)
    return np.hstack([c * np.eye(n), s * np.eye(n)])


def complex_planes() -> list:
    """span(x1, y1) and span(x2, y2) in (x1, x2, y1, y2) coordinates."""
    return [np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]]), np.array([[0, 1.0, 0, 0], [0, 0, 0, 1.0]])]


def jprime_lagrangian_pair(theta0: float = 0.8) -> list:
    """Two transverse Lagrangian planes invariant under J'(theta0) with cos theta = theta0.

    In the complex coordinates w1 = x1 + i y1 / theta0, w2 = x2 / theta0 - i y2
    for J', the planes w2 = c w1 with |c| = 1 are J'-complex and Lagrangian.
    Writing c = e^{i phi}, cos theta = theta0 forces
    sin^2 phi = (1 + theta0^2)^2 / (5 - 2 theta0^2 + theta0^4) with sin phi < 0;
    phi and pi - phi give the pair.
    """
    if not 0 < theta0 <= 1:
        raise ValueError("theta0 must lie in (0, 1]")
    s = -(1 + theta0**2) / math.sqrt(5 - 2 * theta0**2 + theta0**4)
    planes = []
    for cphi in (math.sqrt(1 - s * s), -math.sqrt(1 - s * s)):
        re, im = cphi, s
        dp = [1.0, theta0 * re, 0.0, -im]
        dq = [0.0, -theta0 * im, theta0, -re]
        planes.append(orthonormal_rows([dp, dq]))
    return planes


def two_plane_union(bases=None, N: int = 100, extent: float = 2.0, cos_theta: Optional[float] = None) -> RescaledCloud:
    bases = jprime_lagrangian_pair() if bases is None else bases
    return union([plane_cloud(b, N, extent, cos_theta=cos_theta) for b in bases], "plane_union")


def duplicated_plane(basis=None, N: int = 100, extent: float = 2.0) -> RescaledCloud:
    basis = lagrangian_plane(0.3) if basis is None else basis
    one = plane_cloud(basis, N, extent)
    return union([one, one], "duplicated_plane")


def perturbed_plane_immersion(eps: float, N: int = 64, length: float = 4.0, tilt: float = 0.5) -> Immersion:
    """Lagrangian graph (x, y, -eps sin kx, -eps sin ky), k = 2 pi / length, rotated by e^{i tilt} in z1.

    Centred on the origin; the tilt makes cos theta vary to first order in eps.
    """
    u = np.arange(N) * (length / N) - length / 2
    x, y = np.meshgrid(u, u, indexing="ij")
    k = TWO_PI / length
    pos = np.stack([x, y, -eps * np.sin(k * x), -eps * np.sin(k * y)], axis=-1)
    wraps = [[length, 0, 0, 0], [0, length, 0, 0]]
    im = Immersion(pos, AmbientSpace(2), wraps=wraps)
    c, s = math.cos(tilt), math.sin(tilt)
    U = np.eye(4)
    U[0, 0], U[0, 2], U[2, 0], U[2, 2] = c, -s, s, c
    return im.transformed(U)


def perturbed_plane_provider(amplitude: float = 0.1, N: int = 64, length: float = 4.0, tilt: float = 0.5) -> Callable:
    """Provider (lam, t) -> cloud of a static plane with perturbation amplitude / lam."""

    def provide(lam: float, t: float) -> RescaledCloud:
        im = perturbed_plane_immersion(amplitude / lam, N, length, tilt)
        return cloud_from_immersion(im, 2, scale=lam, kind="synthetic", source={"amplitude": amplitude / lam, "t": t})

    return provide


def plane_union_trace_cloud(theta0: float = 0.8, N: int = 100) -> RescaledCloud:
    return two_plane_union(jprime_lagrangian_pair(theta0), N)
