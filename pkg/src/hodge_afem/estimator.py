"""Residual error indicators and data oscillation on the flat mesh.

For a discrete 1-form ``sigma_h`` and data ``f`` the indicator of a triangle is

    eta_T^2 = h_T ||[[n . sigma_h]]||^2_{dT} + h_T^2 ||delta sigma_h||^2_T
              + h_T^2 ||pi_A f - d sigma_h||^2_T,

all norms taken in the flat metric of ``M_A``. The jump of the normal
component across an edge is computed once and charged to both neighbours.
For Whitney forms the coderivative vanishes identically; it is still evaluated
from the element formula so that the identity is checked on every run.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .feec import FormVector, MeshGeometry, harmonic_component_top
from .geometry import edge_rule

SCHEMA_VERSION = 1


@dataclass
class IndicatorField:
    """Per-triangle indicator contributions (all squared, flat metric)."""

    jump_sq: np.ndarray
    coderiv_sq: np.ndarray
    residual_sq: np.ndarray
    osc_sq: np.ndarray
    h: np.ndarray
    mesh_id: str
    area_factor_range: tuple = (1.0, 1.0)

    @property
    def eta_sq(self):
        return self.jump_sq + self.coderiv_sq + self.residual_sq

    @property
    def total_eta_sq(self):
        return float(self.eta_sq.sum())

    @property
    def total_osc_sq(self):
        return float(self.osc_sq.sum())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["schema_version", "triangle", "h", "jump_sq", "coderiv_sq", "residual_sq",
                        "eta_sq", "osc_sq"])
            for t in range(len(self.h)):
                w.writerow([SCHEMA_VERSION, t] + [format(float(v), ".17g") for v in (
                    self.h[t], self.jump_sq[t], self.coderiv_sq[t], self.residual_sq[t],
                    self.eta_sq[t], self.osc_sq[t])])


def _edge_barycentrics(mesh, side, s):
    """(ne, ns, 3) barycentric coordinates, in triangle ``edge_triangles[:, side]``,
    of the points ``lo + s (hi - lo)`` of each edge."""
    t = mesh.edge_triangles[:, side]
    k = mesh.edge_local[:, side]
    sign = mesh.edge_signs[t, k]
    ne = mesh.n_edges
    bary = np.zeros((ne, len(s), 3))
    rows = np.arange(ne)
    first = np.where(sign[:, None] > 0, 1.0 - s[None, :], s[None, :])
    bary[rows, :, (k + 1) % 3] = first
    bary[rows, :, (k + 2) % 3] = 1.0 - first
    return bary


def _field_at(geom, coefficients, tris, bary):
    """Discrete 1-form (frame components) in triangles ``tris`` at barycentric points."""
    mesh = geom.mesh
    gl = geom.grad_lambda[tris]
    local = coefficients[mesh.tri_edges[tris]] * mesh.edge_signs[tris]
    out = np.zeros(bary.shape[:2] + (2,))
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        out += local[:, k, None, None] * (bary[:, :, i, None] * gl[:, None, j, :]
                                          - bary[:, :, j, None] * gl[:, None, i, :])
    return out


def edge_jumps(geom, coefficients, n_points=3):
    """Squared normal-component jumps integrated over each edge, shape (ne,)."""
    mesh = geom.mesh
    s, w = edge_rule(n_points)
    length = np.linalg.norm(mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]],
                            axis=1)
    jump = np.zeros((mesh.n_edges, len(s)))
    for side in range(2):
        t = mesh.edge_triangles[:, side]
        k = mesh.edge_local[:, side]
        g = geom.grad_lambda[t, k]
        outward = -g / np.linalg.norm(g, axis=1, keepdims=True)
        field = _field_at(geom, coefficients, t, _edge_barycentrics(mesh, side, s))
        jump += np.einsum("eqi,ei->eq", field, outward)
    return length * ((jump * jump) @ w)


def whitney_coderivative(geom, coefficients):
    """Flat coderivative of the Whitney form on each triangle (a constant).

    ``delta(lambda_i grad lambda_j - lambda_j grad lambda_i)
    = -(grad lambda_i . grad lambda_j - grad lambda_j . grad lambda_i)``.
    """
    mesh = geom.mesh
    gl = geom.grad_lambda
    local = coefficients[mesh.tri_edges] * mesh.edge_signs
    out = np.zeros(mesh.n_tri)
    for k in range(3):
        gi, gj = gl[:, (k + 1) % 3], gl[:, (k + 2) % 3]
        out -= local[:, k] * (np.einsum("ti,ti->t", gi, gj) - np.einsum("ti,ti->t", gj, gi))
    return out


def _pulled_density(geom, f):
    """(nt, nq) flat density of ``pi_A f`` at the quadrature points."""
    if isinstance(f, FormVector):
        return np.broadcast_to(f.coefficients[:, None], geom.weights.shape)
    return geom.pullback_density(f) * geom.area_factor


def element_indicators(mesh, surface, sigma, f, quad=4, geom=None, reduce=True):
    """Indicator field for ``sigma`` (edge FormVector or array) and data ``f``.

    Args:
        f: density on ``M`` (callable) or top-form FormVector on ``mesh``.
        reduce: remove the harmonic part of ``f`` first, as the solver does.
    """
    geom = geom or MeshGeometry(mesh, surface, quad)
    s = sigma.coefficients if isinstance(sigma, FormVector) else np.asarray(sigma, float)
    if reduce:
        _, f = harmonic_component_top(mesh, surface, f, geom=geom)
    h = geom.diam
    area = geom.area
    per_edge = edge_jumps(geom, s)
    jump_sq = h * per_edge[mesh.tri_edges].sum(axis=1)
    cod = whitney_coderivative(geom, s)
    coderiv_sq = h * h * area * cod * cod
    ds = (mesh.edge_signs * s[mesh.tri_edges]).sum(axis=1) / area
    dens = _pulled_density(geom, f)
    resid = dens - ds[:, None]
    residual_sq = h * h * np.sum(geom.weights * resid * resid, axis=1)
    osc_sq = _osc_from_density(geom, dens)
    return IndicatorField(jump_sq, coderiv_sq, residual_sq, osc_sq, h, mesh.mesh_id,
                          (float(geom.area_factor.min()), float(geom.area_factor.max())))


def _osc_from_density(geom, dens):
    mean = np.sum(geom.weights * dens, axis=1) / geom.area
    dev = dens - mean[:, None]
    return geom.diam**2 * np.sum(geom.weights * dev * dev, axis=1)


def oscillation(mesh, surface, f, quad=4, geom=None):
    """Per-element ``h_T^2 ||pi_A f - mean_T(pi_A f)||_T^2`` and its total (flat metric)."""
    geom = geom or MeshGeometry(mesh, surface, quad)
    per = _osc_from_density(geom, _pulled_density(geom, f))
    return per, float(per.sum())


def coarse_oscillation(fine_density, fine, coarse, ancestor):
    """Oscillation on ``coarse`` of a piecewise-constant density given on ``fine``.

    The norm is the flat one, so each coarse triangle sums its children's
    squared deviations from the area-weighted mean.
    """
    A = fine.areas
    integral = np.bincount(ancestor, weights=fine_density * A, minlength=coarse.n_tri)
    mean = integral / coarse.areas
    dev = fine_density - mean[ancestor]
    per = coarse.diameters**2 * np.bincount(ancestor, weights=A * dev * dev,
                                            minlength=coarse.n_tri)
    return per, float(per.sum())


def global_eta(field, subset: Optional[np.ndarray] = None):
    """Square root of the summed indicators over ``subset`` (all when ``None``)."""
    eta_sq = field.eta_sq
    if subset is None:
        return float(np.sqrt(eta_sq.sum()))
    subset = np.asarray(subset, dtype=np.int64)
    return float(np.sqrt(eta_sq[subset].sum())) if subset.size else 0.0
