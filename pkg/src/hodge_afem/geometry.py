"""Implicit surfaces, the closest-point map onto them, and quadrature.

A surface ``M`` is described by its signed distance function ``delta``.  Points
``x`` of a flat triangle of the approximating surface are carried onto ``M`` by
the normal projection ``a(x) = x - delta(x) nu(x)``; all integrals over ``M`` are
evaluated by pulling them back to the flat triangles through this map.

All surface callables are vectorised over a leading batch axis: they take an
array of shape ``(..., 3)``.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import DegenerateTriangle, OutsideTube, UnknownSurface, UnsupportedDegree


@dataclass(frozen=True)
class ImplicitSurface:
    """Signed-distance description of a closed hypersurface of R^3.

    Attributes:
        name: preset string this surface was built from.
        signed_distance: ``x -> delta(x)``, positive outside.
        gradient: ``x -> nu(x)``, the unit outward normal at ``a(x)``.
        shape_operator: ``x -> S(x) = -grad nu(x)`` as a symmetric 3x3 matrix.
        tubular_radius: ``delta_0``; the map ``a`` is only used where
            ``|delta| < delta_0``.
        scale: characteristic length used for relative tolerances.
        exact: whether ``signed_distance`` is an exact distance, in which case a
            single projection step lands on the surface.
    """

    name: str
    signed_distance: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    shape_operator: Callable[[np.ndarray], np.ndarray]
    tubular_radius: float
    scale: float = 1.0
    exact: bool = True

    def check_tube(self, x):
        d = self.signed_distance(x)
        if np.any(np.abs(d) >= self.tubular_radius):
            worst = float(np.max(np.abs(d)))
            raise OutsideTube(
                f"|delta| = {worst:.3g} exceeds tubular radius {self.tubular_radius:.3g} "
                f"of surface {self.name!r}"
            )
        return d


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sphere(radius=1.0):
    """Sphere of the given radius centred at the origin (tube radius ``0.9 R``)."""

    def delta(x):
        return np.linalg.norm(x, axis=-1) - radius

    def nu(x):
        return _normalize(np.asarray(x, dtype=float))

    def shape(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        n = x / r[..., None]
        P = np.eye(3) - n[..., :, None] * n[..., None, :]
        return -P / r[..., None, None]

    return ImplicitSurface("sphere", delta, nu, shape, 0.9 * radius, scale=radius)


def torus(R=2.0, r=0.5):
    """Torus around the z axis with centre-circle radius ``R`` and tube radius ``r``."""
    if not 0 < r < R:
        raise UnknownSurface(f"torus needs 0 < r < R, got R={R}, r={r}")

    def _parts(x):
        x = np.asarray(x, dtype=float)
        rho = np.hypot(x[..., 0], x[..., 1])
        e_rho = np.zeros_like(x)
        e_rho[..., 0] = x[..., 0] / rho
        e_rho[..., 1] = x[..., 1] / rho
        v = x - R * e_rho
        q = np.linalg.norm(v, axis=-1)
        return rho, e_rho, v, q

    def delta(x):
        return _parts(x)[3] - r

    def nu(x):
        _, _, v, q = _parts(x)
        return v / q[..., None]

    def shape(x):
        rho, e_rho, v, q = _parts(x)
        n = v / q[..., None]
        e_phi = np.zeros_like(e_rho)
        e_phi[..., 0] = -e_rho[..., 1]
        e_phi[..., 1] = e_rho[..., 0]
        P = np.eye(3) - n[..., :, None] * n[..., None, :]
        hess = P - (R / rho)[..., None, None] * (e_phi[..., :, None] * e_phi[..., None, :])
        return -hess / q[..., None, None]

    return ImplicitSurface(f"torus:R={R:g},r={r:g}", delta, nu, shape, 0.9 * r, scale=r)


def plane():
    """The plane z = 0 with normal +z. Used to check that flat geometry is reproduced."""

    def delta(x):
        return np.asarray(x, dtype=float)[..., 2].copy()

    def nu(x):
        out = np.zeros_like(np.asarray(x, dtype=float))
        out[..., 2] = 1.0
        return out

    def shape(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (3, 3))

    return ImplicitSurface("plane", delta, nu, shape, np.inf)


def implicit(name, signed_distance, tubular_radius, scale=1.0):
    """Surface from a signed distance callable; derivatives by central differences.

    The gradient uses step ``1e-6 * scale``; the Hessian differentiates that
    gradient again with step ``1e-4 * scale`` to keep the nested difference
    quotient away from round-off.
    """
    h1 = 1e-6 * scale
    h2 = 1e-4 * scale
    eye = np.eye(3)

    def grad(x):
        x = np.asarray(x, dtype=float)
        cols = [
            (signed_distance(x + h1 * e) - signed_distance(x - h1 * e)) / (2 * h1) for e in eye
        ]
        return _normalize(np.stack(cols, axis=-1))

    def shape(x):
        x = np.asarray(x, dtype=float)
        cols = [(grad(x + h2 * e) - grad(x - h2 * e)) / (2 * h2) for e in eye]
        H = np.stack(cols, axis=-1)
        return -0.5 * (H + np.swapaxes(H, -1, -2))

    return ImplicitSurface(name, signed_distance, grad, shape, tubular_radius, scale, exact=False)


def get_surface(spec):
    """Build a surface from a preset string: ``sphere``, ``plane`` or ``torus:R=2,r=0.5``."""
    name, _, args = spec.partition(":")
    kwargs = {}
    if args:
        for item in args.split(","):
            key, sep, val = item.partition("=")
            if not sep:
                raise UnknownSurface(f"malformed surface argument {item!r} in {spec!r}")
            kwargs[key.strip()] = float(val)
    try:
        if name == "sphere":
            return sphere(**kwargs)
        if name == "torus":
            return torus(**kwargs)
        if name == "plane" and not kwargs:
            return plane()
    except TypeError as exc:
        raise UnknownSurface(f"bad arguments for surface {spec!r}: {exc}") from None
    raise UnknownSurface(f"unknown surface {spec!r}")


def normal_projection(surface, x, max_iter=50):
    """Closest point ``a(x) = x - delta(x) nu(x)`` on the surface.

    For exact distance functions one step suffices; otherwise the step is
    repeated until ``|delta(p)| <= 1e-12 * scale``.

    Raises:
        OutsideTube: if ``|delta(x)| >= delta_0``.
    """
    x = np.asarray(x, dtype=float)
    d = surface.check_tube(x)
    p = x - d[..., None] * surface.gradient(x)
    if surface.exact:
        return p
    tol = 1e-12 * surface.scale
    for _ in range(max_iter):
        d = surface.signed_distance(p)
        if np.all(np.abs(d) <= tol):
            break
        p = p - d[..., None] * surface.gradient(p)
    return p


def projection_jacobian(surface, x):
    """Derivative of ``a`` at ``x``: ``P + delta S`` with ``P = I - nu nu^T``."""
    d = surface.signed_distance(x)
    n = surface.gradient(x)
    P = np.eye(3) - n[..., :, None] * n[..., None, :]
    return P + d[..., None, None] * surface.shape_operator(x)


# --------------------------------------------------------------------------
# flat triangles


def triangle_frame(p0, p1, p2):
    """Orthonormal in-plane basis ``(e1, e2)`` and unit normal ``n`` of a triangle.

    ``(e1, e2, n)`` is right-handed and ``n`` points to the side from which the
    vertices appear counter-clockwise. Works on single triangles or batches.
    """
    a = np.asarray(p1, dtype=float) - p0
    b = np.asarray(p2, dtype=float) - p0
    n = np.cross(a, b)
    e1 = _normalize(a)
    n = _normalize(n)
    e2 = np.cross(n, e1)
    return e1, e2, n


def _triangle_area(tri):
    return 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))


@dataclass(frozen=True)
class TangentSample:
    """The tangent map of ``a`` restricted to a flat triangle at one point.

    ``jacobian`` is 3x2, columns are the images of the triangle-plane basis
    vectors; ``metric = J^T J``; ``area_factor = alpha_1 alpha_2``.
    """

    base_point: np.ndarray
    projected_point: np.ndarray
    jacobian: np.ndarray
    metric: np.ndarray
    singular_values: np.ndarray
    area_factor: float


def metric_singular_values(G):
    """Singular values ``alpha_1 >= alpha_2`` of a tangent map from its 2x2 metric."""
    tr = G[..., 0, 0] + G[..., 1, 1]
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    disc = np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    lam1 = 0.5 * tr + disc
    lam2 = np.maximum(det / lam1, 0.0)
    return np.stack([np.sqrt(lam1), np.sqrt(lam2)], axis=-1)


def tangent_batch(surface, x, e1, e2):
    """Vectorised tangent map at points ``x`` of triangles with frames ``(e1, e2)``.

    Returns:
        (jacobian (..., 3, 2), metric (..., 2, 2), area factor (...)).
    """
    Da = projection_jacobian(surface, x)
    E = np.stack([e1, e2], axis=-1)
    Jac = Da @ E
    G = np.swapaxes(Jac, -1, -2) @ Jac
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    return Jac, G, np.sqrt(np.maximum(det, 0.0))


def tangent_map(surface, triangle, bary):
    """Tangent map of ``a`` restricted to ``triangle`` at barycentric point ``bary``.

    Raises:
        DegenerateTriangle: triangle area below ``1e-14 * scale**2``.
        OutsideTube: the point is outside the tube.
    """
    tri = np.asarray(triangle, dtype=float)
    if _triangle_area(tri) < 1e-14 * surface.scale**2:
        raise DegenerateTriangle("triangle area below 1e-14 * scale^2")
    x = np.asarray(bary, dtype=float) @ tri
    surface.check_tube(x)
    e1, e2, _ = triangle_frame(*tri)
    Jac, G, area = tangent_batch(surface, x, e1, e2)
    return TangentSample(
        base_point=x,
        projected_point=normal_projection(surface, x),
        jacobian=Jac,
        metric=G,
        singular_values=metric_singular_values(G),
        area_factor=float(area),
    )


def pullback_topform(surface, f, triangle, bary):
    """Coefficient of the pulled-back top form relative to the flat area form.

    ``f`` is a density on ``M`` (relative to its area form); the result is
    ``f(a(x)) * alpha_1 * alpha_2``.
    """
    ts = tangent_map(surface, triangle, bary)
    return float(np.asarray(f(ts.projected_point[None]))[0]) * ts.area_factor


def pullback_oneform(surface, omega, triangle, bary):
    """Pull back an ambient covector field tangent to ``M`` onto the triangle plane.

    Returns the two components ``J^T omega(a(x))`` in the triangle basis ``(e1, e2)``.
    """
    ts = tangent_map(surface, triangle, bary)
    w = np.asarray(omega(ts.projected_point[None]), dtype=float)[0]
    return ts.jacobian.T @ w


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference triangle; weights sum to its area 1/2.

    ``points`` are barycentric triples ``(1 - x - y, x, y)``.
    """

    degree: int
    points: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=None)
def quadrature_rule(degree):
    """Collapsed (Stroud conical product) rule exact for polynomials of ``degree``.

    Gauss-Jacobi(1, 0) nodes in the collapsed direction and Gauss-Legendre in
    the other; ``n = ceil((degree + 1) / 2)`` points per direction. Degree 1
    reduces to the centroid rule.
    """
    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= 6:
        raise UnsupportedDegree(f"quadrature degree must be in 1..6, got {degree!r}")
    n = (int(degree) + 2) // 2
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    tl, wl = roots_legendre(n)
    u = 0.5 * (1.0 + tj)
    v = 0.5 * (1.0 + tl)
    U, V = np.meshgrid(u, v, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (np.outer(wj, wl) / 8.0).ravel()
    pts = np.stack([1.0 - x - y, x, y], axis=1)
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(int(degree), pts, w)


@lru_cache(maxsize=None)
def edge_rule(n=3):
    """Gauss-Legendre rule on [0, 1] with ``n`` points (exact to degree ``2n - 1``)."""
    t, w = roots_legendre(n)
    s = 0.5 * (1.0 + t)
    w = 0.5 * w
    s.setflags(write=False)
    w.setflags(write=False)
    return s, w
