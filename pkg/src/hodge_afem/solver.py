"""Mixed Hodge-Laplace system for top forms on a closed surface.

Unknowns are the edge coefficients ``s`` of ``sigma_h``, the triangle densities
``y`` of ``u_h`` and the multiple ``c`` of the discrete volume form ``hb`` (all
ones). With ``B = M2 A^{-1} D`` the derivative of a Whitney form tested against
top forms, the symmetric system reads::

    [ M1    -B^T     0      ] [s]   [  0 ]
    [ -B     0    -M2 hb    ] [y] = [ -F ]
    [ 0   -hb^T M2   0      ] [c]   [  0 ]

Sign convention: ``sigma = delta u = -*dw`` for ``u = w vol``, i.e. the 1-form
``grad_M w x n`` as an ambient vector, and ``f = d sigma = -Lap_M w``.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NotNested, SingularSystem, SolveFailure, UnknownCase
from .feec import (FormVector, MeshGeometry, discrete_volume_form, exterior_derivative_matrix,
                   integrate_on_surface, load_vector, mass_matrix, prolong_topform, surface_area,
                   top_mass_diagonal)

DIRECT_LIMIT = 200_000


@dataclass
class MixedSystem:
    """Assembled blocks of the discrete mixed problem.

    ``F`` is the load of the data as given; ``F_eff`` is the load after removing
    the discrete harmonic component, so that ``c`` vanishes to round-off.
    """

    M1: sp.csr_matrix
    M2: sp.csr_matrix
    D: sp.csr_matrix
    B: sp.csr_matrix
    hb: np.ndarray
    F: np.ndarray
    F_eff: np.ndarray
    harmonic_data: float
    mesh_id: str
    area_weights: np.ndarray
    geom: Optional[MeshGeometry] = None

    @property
    def n1(self):
        return self.M1.shape[0]

    @property
    def n2(self):
        return self.M2.shape[0]

    @property
    def n_dofs(self):
        return self.n1 + self.n2 + 1

    def matrix(self):
        m2hb = (self.M2 @ self.hb)[:, None]
        return sp.bmat([[self.M1, -self.B.T, None],
                        [-self.B, None, -sp.csr_matrix(m2hb)],
                        [None, -sp.csr_matrix(m2hb.T), None]], format="csc")

    def rhs(self):
        return np.concatenate([np.zeros(self.n1), -self.F_eff, [0.0]])


@dataclass
class MixedSolution:
    sigma: FormVector
    u: FormVector
    p_const: float
    residual_norm: float
    solve_stats: dict = field(default_factory=dict)


def assemble_mixed(mesh, surface, data, quad=4, geom=None, data_mesh=None):
    """Assemble the mixed system for data ``f``.

    Args:
        data: a density ``f(p)`` on ``M`` (callable on projected points), or a
            top-form FormVector on ``mesh`` or on ``data_mesh``, a coarse
            ancestor of ``mesh`` (prolonged automatically).
        geom: reusable ``MeshGeometry`` of ``mesh`` at degree ``quad``.
    """
    geom = geom or MeshGeometry(mesh, surface, quad)
    D = exterior_derivative_matrix(mesh)
    m2 = top_mass_diagonal(geom)
    M2 = sp.diags(m2).tocsr()
    M1 = mass_matrix(mesh, surface, 1, geom=geom)
    B = (sp.diags(m2 / geom.area) @ D).tocsr()
    if isinstance(data, FormVector):
        if data.degree != 2:
            raise ValueError("data must be a top form")
        if data.mesh_id != mesh.mesh_id:
            if data_mesh is None:
                raise NotNested("data lives on another mesh; pass data_mesh")
            data = prolong_topform(data, mesh, data_mesh)
        F = m2 * data.coefficients
        harmonic = float(data.coefficients @ geom.area)
    elif callable(data):
        mean = integrate_on_surface(geom, data) / surface_area(geom)

        def reduced(x):
            return np.asarray(data(x), dtype=float) - mean

        F = load_vector(geom, reduced)
        harmonic = mean
    else:
        raise TypeError("data must be callable or a FormVector")
    q = discrete_volume_form(geom)
    F_eff = F - (q @ F) / (q @ (m2 * q)) * (m2 * q)
    return MixedSystem(M1, M2, D, B, np.ones(mesh.n_tri), F, F_eff, harmonic, mesh.mesh_id,
                       geom.area, geom)


def _reduce_harmonic(system, rhs):
    """Fix ``c`` by solvability and return it with the consistent 2x2 right-hand side."""
    n1, n2 = system.n1, system.n2
    m2hb = system.M2.diagonal() * system.hb
    q = system.area_weights / system.M2.diagonal()
    g1, g2 = rhs[:n1], rhs[n1:n1 + n2]
    c = -float(q @ g2) / float(q @ m2hb)
    return c, g1, g2 + c * m2hb, q, m2hb


def _restore_constraint(system, s, y, c, g3, q, m2hb):
    # y + alpha q still solves the first two block rows; alpha meets the last one
    y = y + (-g3 - float(m2hb @ y)) / float(m2hb @ q) * q
    return np.concatenate([s, y, [c]])


def _minres(system, rhs, tol):
    """MINRES on the singular but consistent 2x2 block system.

    Preconditioner: ``diag(M1)`` and ``Pi (B diag(M1)^-1 B^T + eps)^-1 Pi`` with
    ``Pi`` the projector removing the discrete volume form, the kernel of ``B^T``.
    """
    n1, n2 = system.n1, system.n2
    c, g1, g2, q, m2hb = _reduce_harmonic(system, rhs)
    m1d = system.M1.diagonal()
    S = (system.B @ sp.diags(1.0 / m1d) @ system.B.T).tocsc()
    shift = 1e-10 * S.diagonal().max()
    lu = spla.splu((S + sp.diags(np.full(n2, shift))).tocsc(), permc_spec="COLAMD")
    qn = q / np.linalg.norm(q)

    def project(v):
        return v - (qn @ v) * qn

    def apply(r):
        return np.concatenate([r[:n1] / m1d, project(lu.solve(project(r[n1:])))])

    K = sp.bmat([[system.M1, -system.B.T], [-system.B, None]], format="csr")
    P = spla.LinearOperator((n1 + n2, n1 + n2), matvec=apply)
    maxiter = int(20 * math.sqrt(system.n_dofs))
    z, info = spla.minres(K, np.concatenate([g1, g2]), M=P, rtol=tol * 1e-2, maxiter=maxiter)
    return _restore_constraint(system, z[:n1], project(z[n1:]), c, rhs[-1], q, m2hb), info


def _direct_pinned(system, rhs):
    """Sparse LU of the saddle system with the dense constraint row eliminated.

    The kernel of ``B^T`` is spanned by the discrete volume form ``q``, so pinning
    one density makes the 2x2 block system regular; the equation of the pinned
    triangle is implied by the others once the harmonic multiple ``c`` is fixed
    by solvability. The volume-form constraint is restored afterwards by adding
    a multiple of ``q`` to ``y``.
    """
    n1, n2 = system.n1, system.n2
    c, g1, g2, q, m2hb = _reduce_harmonic(system, rhs)
    keep = np.arange(1, n2)
    K = sp.bmat([[system.M1, -system.B[keep].T], [-system.B[keep], None]], format="csc")
    try:
        lu = spla.splu(K, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    z = lu.solve(np.concatenate([g1, g2[keep]]))
    y = np.zeros(n2)
    y[keep] = z[n1:]
    return _restore_constraint(system, z[:n1], y, c, rhs[-1], q, m2hb)


def solve_mixed(system, tol=1e-10, method="auto"):
    """Solve the assembled system.

    ``method`` is ``direct`` (sparse LU), ``minres`` (block-diagonal
    preconditioning, at most ``20 sqrt(n)`` iterations) or ``auto`` (direct up to
    2e5 unknowns).

    Raises:
        SolveFailure: relative residual above ``tol``.
        SingularSystem: the factorization breaks down.
    """
    if not 1e-14 <= tol <= 1e-6:
        raise ValueError("tol must lie in [1e-14, 1e-6]")
    start = time.perf_counter()
    A = system.matrix()
    b = system.rhs()
    n = system.n_dofs
    if method == "auto":
        method = "direct" if n <= DIRECT_LIMIT else "minres"
    bnorm = np.linalg.norm(b)
    stats = {"method": method, "n_dofs": n}
    if bnorm == 0.0:
        x = np.zeros(n)
    elif method == "direct":
        x = _direct_pinned(system, b)
        r = b - A @ x
        if np.linalg.norm(r) > tol * bnorm:
            x = x + _direct_pinned(system, r)
    elif method == "minres":
        x, info = _minres(system, b, tol)
        for _ in range(3):
            r = b - A @ x
            if np.linalg.norm(r) <= tol * bnorm:
                break
            dx, info = _minres(system, r, tol)
            x = x + dx
        stats["minres_info"] = int(info)
    else:
        raise ValueError(f"unknown solver method {method!r}")
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite solution")
    res = float(np.linalg.norm(b - A @ x) / bnorm) if bnorm else 0.0
    stats["seconds"] = time.perf_counter() - start
    if res > tol:
        raise SolveFailure(f"relative residual {res:.3e} above tolerance {tol:.1e}")
    n1, n2 = system.n1, system.n2
    return MixedSolution(FormVector(1, x[:n1], system.mesh_id),
                         FormVector(2, x[n1:n1 + n2], system.mesh_id),
                         float(x[-1]), res, stats)


# --------------------------------------------------------------------------
# manufactured solutions on the unit sphere


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact data and solution, all evaluated at points of the unit sphere.

    ``f`` and ``u`` are densities; ``sigma`` returns ambient vectors tangent to
    the sphere (the 1-form via the Euclidean metric).
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    u: Callable[[np.ndarray], np.ndarray]
    surface: str = "sphere"


def _axial(x):
    return np.stack([-x[..., 1], x[..., 0], np.zeros_like(x[..., 0])], axis=-1)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def manufactured_solution(name, center=(0.0, 0.0, 1.0), width=0.1):
    """Manufactured cases ``Y1``, ``Y2`` and ``gaussian-bump`` on the unit sphere.

    The bump potential is ``w = exp((c.p - 1) / width^2)`` around the unit vector
    ``center``; ``u`` is ``w`` minus its mean.

    Raises:
        UnknownCase: any other name.
    """
    key = name.lower().replace("_", "-")
    if key == "y1":
        return ManufacturedCase("Y1", lambda x: 2.0 * _unit(x)[..., 2],
                                lambda x: _axial(_unit(x)),
                                lambda x: _unit(x)[..., 2])
    if key == "y2":
        def w(x):
            z = _unit(x)[..., 2]
            return 3.0 * z * z - 1.0

        return ManufacturedCase("Y2", lambda x: 6.0 * w(x),
                                lambda x: 6.0 * _unit(x)[..., 2, None] * _axial(_unit(x)),
                                w)
    if key in ("gaussian-bump", "bump"):
        c = np.asarray(center, dtype=float)
        c = c / np.linalg.norm(c)
        e2 = width * width
        mean = e2 * (1.0 - math.exp(-2.0 / e2)) / 2.0

        def phi(x):
            return np.exp((_unit(x) @ c - 1.0) / e2)

        def f(x):
            t = _unit(x) @ c
            return -phi(x) * ((1.0 - t * t) / (e2 * e2) - 2.0 * t / e2)

        def sigma(x):
            return (phi(x) / e2)[..., None] * np.cross(c, _unit(x))

        return ManufacturedCase("gaussian-bump", f, sigma, lambda x: phi(x) - mean)
    if key in ("zero", "0"):
        zero = lambda x: np.zeros(np.shape(x)[:-1])  # noqa: E731
        return ManufacturedCase("zero", zero, lambda x: np.zeros(np.shape(x)), zero)
    raise UnknownCase(f"unknown manufactured case {name!r}")


def reference_error(solution, sigma_exact, mesh, surface, quad=6, geom=None):
    """``||sigma_exact - i_A sigma_h||_{L2(M)}`` by pulled-back quadrature."""
    geom = geom or MeshGeometry(mesh, surface, quad)
    coeffs = solution.sigma.coefficients if isinstance(solution, MixedSolution) else (
        solution.coefficients if isinstance(solution, FormVector) else np.asarray(solution))
    diff = geom.pullback_oneform(sigma_exact) - geom.whitney_field(coeffs)
    val = np.einsum("tqi,tqij,tqj,tq,tq->", diff, geom.metric_inv, diff, geom.weights,
                    geom.area_factor, optimize=True)
    return float(np.sqrt(max(val, 0.0)))
