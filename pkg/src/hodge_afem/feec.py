"""Lowest-order Whitney spaces on the flat mesh and their mapped inner products.

Degrees of freedom live on the flat mesh ``M_A``:

* 1-forms: one coefficient per edge, the integral of the form along the edge
  in its global (low id to high id) orientation. Local edge ``k`` of a triangle
  runs from local vertex ``k+1`` to ``k+2`` and carries the Whitney function
  ``lambda_{k+1} grad lambda_{k+2} - lambda_{k+2} grad lambda_{k+1}``.
* top forms: one coefficient per triangle, a constant density relative to the
  flat area form. The canonical degree of freedom (element integral) is the
  coefficient times the flat area.

Inner products on the true surface ``M`` are evaluated through the pullback by
the normal projection: 1-forms contract with ``G^{-1}``, top-form densities are
divided by ``J = sqrt(det G)``, and the flat area element is weighted by ``J``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import NotNested
from .geometry import edge_rule, normal_projection, quadrature_rule, tangent_batch, triangle_frame
from .mesh import is_refinement_of


@dataclass(frozen=True)
class DofMap:
    """Enumeration of edge and triangle degrees of freedom of a mesh."""

    n1: int
    n2: int
    tri_edges: np.ndarray
    edge_signs: np.ndarray

    @classmethod
    def of(cls, mesh):
        return cls(mesh.n_edges, mesh.n_tri, mesh.tri_edges, mesh.edge_signs)

    def count(self, degree):
        if degree == 1:
            return self.n1
        if degree == 2:
            return self.n2
        raise ValueError(f"no degrees of freedom of degree {degree}")


@dataclass(frozen=True)
class FormVector:
    """Coefficients of a discrete 1-form (``degree=1``) or top form (``degree=2``)."""

    degree: int
    coefficients: np.ndarray
    mesh_id: str

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")

    def to_dict(self):
        return {"degree": self.degree, "mesh_id": self.mesh_id,
                "coefficients": [float(c) for c in self.coefficients]}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["degree"]), np.asarray(data["coefficients"], float), data["mesh_id"])


def exterior_derivative_matrix(mesh, dofs=None):
    """Signed triangle-edge incidence ``D`` (n2 x n1): d on edge coefficients."""
    nt = mesh.n_tri
    rows = np.repeat(np.arange(nt), 3)
    return sp.csr_matrix((mesh.edge_signs.ravel().astype(float), (rows, mesh.tri_edges.ravel())),
                         shape=(nt, mesh.n_edges))


def gradient_matrix(mesh):
    """Edge-vertex incidence (n1 x nv): d on vertex values (0-forms)."""
    ne = mesh.n_edges
    rows = np.repeat(np.arange(ne), 2)
    cols = mesh.edges.ravel()
    vals = np.tile([-1.0, 1.0], ne)
    return sp.csr_matrix((vals, (rows, cols)), shape=(ne, mesh.n_vert))


def check_symmetric(A, rtol=1e-12):
    """Whether ``max|A - A^T| <= rtol * max|A|``."""
    diff = abs(A - A.T)
    scale = abs(A).max()
    return diff.max() <= rtol * scale if diff.nnz else True


# --------------------------------------------------------------------------
# per-element geometry


class MeshGeometry:
    """Flat frames, Whitney basis values and mapped metric at quadrature points.

    Everything is computed once per (mesh, surface, degree) and reused by
    assembly, projections, error evaluation and the estimator.

    Attributes:
        e1, e2, normal: (nt, 3) orthonormal frame of each flat triangle.
        grad_lambda: (nt, 3, 2) gradients of barycentric coordinates in the frame.
        points: (nt, nq, 3) quadrature points on the flat triangles.
        weights: (nt, nq) physical flat quadrature weights.
        jac: (nt, nq, 3, 2) tangent map of the normal projection.
        metric, metric_inv: (nt, nq, 2, 2) pulled-back metric and its inverse.
        area_factor: (nt, nq) ``J = sqrt(det G)``.
        whitney: (nt, nq, 3, 2) local Whitney functions (local orientation).
    """

    def __init__(self, mesh, surface, degree=4):
        self.mesh = mesh
        self.surface = surface
        self.degree = degree
        rule = quadrature_rule(degree)
        self.bary = rule.points
        p = mesh.vertices[mesh.triangles]
        self.e1, self.e2, self.normal = triangle_frame(p[:, 0], p[:, 1], p[:, 2])
        self.area = mesh.areas
        self.diam = mesh.diameters
        g3 = np.stack([np.cross(self.normal, p[:, (k + 2) % 3] - p[:, (k + 1) % 3])
                       for k in range(3)], axis=1) / (2.0 * self.area[:, None, None])
        self.grad3 = g3
        self.grad_lambda = np.stack([np.einsum("tki,ti->tk", g3, self.e1),
                                     np.einsum("tki,ti->tk", g3, self.e2)], axis=-1)
        self.points = np.einsum("qk,tki->tqi", self.bary, p)
        self.weights = 2.0 * rule.weights[None, :] * self.area[:, None]
        surface.check_tube(self.points)
        nq = len(rule.weights)
        E1 = np.broadcast_to(self.e1[:, None, :], self.points.shape)
        E2 = np.broadcast_to(self.e2[:, None, :], self.points.shape)
        self.jac, self.metric, self.area_factor = tangent_batch(surface, self.points, E1, E2)
        self.metric_inv = np.linalg.inv(self.metric)
        lam = self.bary
        gl = self.grad_lambda
        w = np.empty((mesh.n_tri, nq, 3, 2))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            w[:, :, k, :] = (lam[None, :, i, None] * gl[:, None, j, :]
                             - lam[None, :, j, None] * gl[:, None, i, :])
        self.whitney = w

    @cached_property
    def projected_points(self):
        return normal_projection(self.surface, self.points)

    def whitney_field(self, coefficients):
        """(nt, nq, 2) frame components of the discrete 1-form with global coefficients."""
        local = coefficients[self.mesh.tri_edges] * self.mesh.edge_signs
        return np.einsum("tk,tqki->tqi", local, self.whitney)

    def whitney_field_at(self, coefficients, bary):
        """(nt, len(bary), 2) discrete 1-form at arbitrary barycentric points."""
        gl = self.grad_lambda
        local = coefficients[self.mesh.tri_edges] * self.mesh.edge_signs
        out = np.zeros((self.mesh.n_tri, len(bary), 2))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            wk = bary[None, :, i, None] * gl[:, None, j, :] - bary[None, :, j, None] * gl[:, None, i, :]
            out += local[:, k, None, None] * wk
        return out

    def to_ambient(self, frame_vectors):
        """Frame components (..., 2) to 3-vectors in the triangle plane."""
        return (frame_vectors[..., 0, None] * self.e1[:, None, :]
                + frame_vectors[..., 1, None] * self.e2[:, None, :])

    def pullback_oneform(self, omega):
        """(nt, nq, 2) frame components of ``J^T omega(a(x))`` at the quadrature points."""
        w = omega(self.projected_points)
        return np.einsum("tqia,tqi->tqa", self.jac, w)

    def pullback_density(self, f):
        """(nt, nq) values ``f(a(x))`` of a density on ``M`` at the quadrature points."""
        return np.asarray(f(self.projected_points), dtype=float)


def mesh_geometry(mesh, surface, degree=4, cache=None):
    """Build or fetch a ``MeshGeometry`` from a dict keyed by (mesh id, surface, degree)."""
    if cache is None:
        return MeshGeometry(mesh, surface, degree)
    key = (mesh.mesh_id, surface.name, degree)
    geom = cache.get(key)
    if geom is None:
        geom = cache[key] = MeshGeometry(mesh, surface, degree)
    return geom


# --------------------------------------------------------------------------
# mass matrices


def mass_matrix(mesh, surface, degree, quad=4, geom=None):
    """Mass matrix of degree-``degree`` forms in the pulled-back L2(M) inner product.

    Degree 2 is diagonal with entries ``int_T 1/J``; degree 1 is the Whitney
    mass matrix with the metric ``G^{-1}`` and the area weight ``J``.
    """
    geom = geom or MeshGeometry(mesh, surface, quad)
    if degree == 2:
        return sp.diags(top_mass_diagonal(geom)).tocsr()
    if degree != 1:
        raise ValueError("mass matrices exist for degrees 1 and 2")
    W = geom.weights * geom.area_factor
    local = np.einsum("tq,tqai,tqij,tqbj->tab", W, geom.whitney, geom.metric_inv, geom.whitney,
                      optimize=True)
    s = mesh.edge_signs
    local *= s[:, :, None] * s[:, None, :]
    te = mesh.tri_edges
    rows = np.repeat(te, 3, axis=1).ravel()
    cols = np.tile(te, (1, 3)).ravel()
    M = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_edges, mesh.n_edges))
    return ((M + M.T) * 0.5).tocsr()


def top_mass_diagonal(geom):
    return np.sum(geom.weights / geom.area_factor, axis=1)


def flat_mass_matrix(mesh, degree):
    """Mass matrix in the flat metric of ``M_A`` (exact, closed form)."""
    if degree == 2:
        return sp.diags(mesh.areas).tocsr()
    geom = _FlatGeometry(mesh)
    W = geom.weights
    local = np.einsum("tq,tqai,tqbi->tab", W, geom.whitney, geom.whitney)
    s = mesh.edge_signs
    local *= s[:, :, None] * s[:, None, :]
    te = mesh.tri_edges
    rows = np.repeat(te, 3, axis=1).ravel()
    cols = np.tile(te, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_edges, mesh.n_edges))


class _FlatGeometry:
    """Frames and Whitney values only, without a surface (degree-2 rule)."""

    def __init__(self, mesh, degree=2):
        rule = quadrature_rule(degree)
        p = mesh.vertices[mesh.triangles]
        e1, e2, n = triangle_frame(p[:, 0], p[:, 1], p[:, 2])
        area = mesh.areas
        g3 = np.stack([np.cross(n, p[:, (k + 2) % 3] - p[:, (k + 1) % 3]) for k in range(3)],
                      axis=1) / (2.0 * area[:, None, None])
        gl = np.stack([np.einsum("tki,ti->tk", g3, e1), np.einsum("tki,ti->tk", g3, e2)], axis=-1)
        lam = rule.points
        self.weights = 2.0 * rule.weights[None, :] * area[:, None]
        w = np.empty((len(area), len(rule.weights), 3, 2))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            w[:, :, k, :] = lam[None, :, i, None] * gl[:, None, j, :] - lam[None, :, j, None] * gl[:, None, i, :]
        self.whitney = w


# --------------------------------------------------------------------------
# projections


def canonical_projection_top(mesh, data, fine_mesh=None):
    """Canonical (element-integral) projection onto piecewise-constant top forms.

    Args:
        mesh: target mesh.
        data: either a callable ``g(x)`` giving the flat density at points of
            ``M_A`` (integrated with a degree-6 rule), or a ``FormVector`` of
            degree 2 on ``fine_mesh``, a refinement of ``mesh``.

    Returns:
        FormVector whose coefficient times the flat area equals the element
        integral of the input.
    """
    if isinstance(data, FormVector):
        if fine_mesh is None:
            if data.mesh_id != mesh.mesh_id:
                raise NotNested("fine mesh required for data from another mesh")
            return data
        nested, anc = is_refinement_of(fine_mesh, mesh)
        if not nested:
            raise NotNested("data mesh is not a refinement of the target")
        integrals = np.bincount(anc, weights=data.coefficients * fine_mesh.areas,
                                minlength=mesh.n_tri)
        return FormVector(2, integrals / mesh.areas, mesh.mesh_id)
    rule = quadrature_rule(6)
    p = mesh.vertices[mesh.triangles]
    x = np.einsum("qk,tki->tqi", rule.points, p)
    vals = np.asarray(data(x), dtype=float)
    return FormVector(2, 2.0 * vals @ rule.weights, mesh.mesh_id)


def canonical_projection_edge(mesh, omega, n_points=3):
    """Edge integrals of an ambient covector field ``omega(x)`` along flat edges."""
    s, w = edge_rule(n_points)
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    t = b - a
    x = a[:, None, :] + s[None, :, None] * t[:, None, :]
    vals = np.einsum("eqi,ei->eq", np.asarray(omega(x), dtype=float), t)
    return FormVector(1, vals @ w, mesh.mesh_id)


def l2_projection_top(mesh, surface, f, geom=None, quad=4):
    """L2(M)-orthogonal projection of a density ``f`` on ``M`` onto top forms.

    The minimiser of ``||i_A v - f||_M`` is ``v_T = int_T f(a(x)) dx / int_T 1/J dx``.
    """
    geom = geom or MeshGeometry(mesh, surface, quad)
    return FormVector(2, load_vector(geom, f) / top_mass_diagonal(geom), mesh.mesh_id)


def load_vector(geom, f):
    """``F_T = <f, i_A chi_T>_M = int_T f(a(x)) dx`` for a density ``f`` on ``M``."""
    return np.sum(geom.weights * geom.pullback_density(f), axis=1)


def integrate_on_surface(geom, f):
    """``int_M f`` by pullback quadrature."""
    return float(np.sum(geom.weights * geom.area_factor * geom.pullback_density(f)))


def surface_area(geom):
    return float(np.sum(geom.weights * geom.area_factor))


def discrete_volume_form(geom):
    """L2(M) projection of the volume form: ``q_T = |T| / int_T 1/J``.

    This spans the kernel of the discrete adjoint of d on top forms, i.e. the
    discrete harmonic top forms.
    """
    return geom.area / top_mass_diagonal(geom)


def harmonic_component_top(mesh, surface, f, geom=None, quad=4):
    """Split data into its harmonic (constant) part and a zero-mean remainder.

    For a callable density ``f`` on ``M`` returns ``c = int_M f / |M|`` and the
    callable ``f - c``. For a top-form ``FormVector`` ``v`` returns
    ``c = int_M i_A v / int_M i_A q`` with ``q`` the discrete volume form and the
    FormVector ``v - c q``, whose integral over ``M`` vanishes to round-off.
    """
    geom = geom or MeshGeometry(mesh, surface, quad)
    if isinstance(f, FormVector):
        q = discrete_volume_form(geom)
        c = float(f.coefficients @ geom.area / (q @ geom.area))
        return c, FormVector(2, f.coefficients - c * q, f.mesh_id)
    c = integrate_on_surface(geom, f) / surface_area(geom)

    def residual(x):
        return np.asarray(f(x), dtype=float) - c

    return c, residual


# --------------------------------------------------------------------------
# prolongation between nested meshes


def _ancestors(fine, coarse, ancestor):
    if ancestor is None:
        nested, ancestor = is_refinement_of(fine, coarse)
        if not nested:
            raise NotNested("fine mesh is not a refinement of coarse mesh")
    return ancestor


def prolong_topform(coarse_form, fine, coarse, ancestor=None):
    """Each fine triangle inherits the density of its coarse ancestor."""
    ancestor = _ancestors(fine, coarse, ancestor)
    return FormVector(2, coarse_form.coefficients[ancestor], fine.mesh_id)


def prolong_oneform(coarse_form, fine, coarse, ancestor=None):
    """Exact embedding of a coarse Whitney form into the fine Whitney space.

    The coarse field is affine on each coarse triangle, so its integral along a
    fine edge is its midpoint value dotted with the edge vector.
    """
    ancestor = _ancestors(fine, coarse, ancestor)
    t_fine = fine.edge_triangles[:, 0]
    T = ancestor[t_fine]
    a = fine.vertices[fine.edges[:, 0]]
    b = fine.vertices[fine.edges[:, 1]]
    mid = 0.5 * (a + b)
    p = coarse.vertices[coarse.triangles[T]]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    area2 = np.linalg.norm(n, axis=1)
    n /= area2[:, None]
    grads = np.stack([np.cross(n, p[:, (k + 2) % 3] - p[:, (k + 1) % 3]) for k in range(3)],
                     axis=1) / area2[:, None, None]
    lam = np.stack([np.einsum("ei,ei->e", np.cross(p[:, (k + 1) % 3] - mid, p[:, (k + 2) % 3] - mid), n)
                    for k in range(3)], axis=1) / area2[:, None]
    local = coarse_form.coefficients[coarse.tri_edges[T]] * coarse.edge_signs[T]
    field = np.zeros_like(mid)
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        field += local[:, k, None] * (lam[:, i, None] * grads[:, j] - lam[:, j, None] * grads[:, i])
    return FormVector(1, np.einsum("ei,ei->e", field, b - a), fine.mesh_id)
