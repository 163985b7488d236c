"""Identity and inequality checks run by ``hodge-afem verify``.

Every check returns a list of ``CheckResult`` rows with the measured value,
the cap it is compared against and the verdict. Groups are addressed by name
(``CHECK_GROUPS``) so that a subset can be selected from the command line.
"""

import math
import time
from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .adapt import CONSTANT_NAMES, AmfemConfig, verify_lemmas
from .feec import (FormVector, MeshGeometry, canonical_projection_edge, canonical_projection_top,
                   exterior_derivative_matrix, gradient_matrix, mass_matrix, surface_area)
from .geometry import edge_rule, get_surface, normal_projection, projection_jacobian
from .mesh import bisect, build_initial, is_refinement_of, uniform_refine


@dataclass
class CheckResult:
    group: str
    name: str
    value: float
    cap: float
    passed: bool
    detail: str = ""


def _result(group, name, value, cap, detail="", lower=False):
    value = float(value)
    ok = math.isfinite(value) and (value > cap if lower else value <= cap)
    return CheckResult(group, name, value, float(cap), bool(ok), detail)


# --------------------------------------------------------------------------
# random test data


def random_polynomial_field(rng, degree=3, scale=1.0):
    """Random ambient covector field with polynomial components and its curl.

    Returns:
        (omega, curl): callables mapping points (..., 3) to (..., 3).
    """
    exps = [e for e in product(range(degree + 1), repeat=3) if sum(e) <= degree]
    coef = scale * rng.standard_normal((3, len(exps)))
    exps = np.array(exps)

    def monomials(x, shift=None):
        e = exps.copy() if shift is None else exps - np.eye(3, dtype=int)[shift]
        factor = np.ones(len(exps)) if shift is None else exps[:, shift].astype(float)
        e = np.maximum(e, 0)
        vals = np.prod(x[..., None, :] ** e, axis=-1)
        return vals * factor

    def omega(x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...m,im->...i", monomials(x), coef)

    def partial(x, comp, var):
        return monomials(x, var) @ coef[comp]

    def curl(x):
        x = np.asarray(x, dtype=float)
        return np.stack([partial(x, 2, 1) - partial(x, 1, 2),
                         partial(x, 0, 2) - partial(x, 2, 0),
                         partial(x, 1, 0) - partial(x, 0, 1)], axis=-1)

    return omega, curl


def random_nested_pair(rng, surface="sphere", preset="icosahedron", coarse_steps=2,
                       fine_steps=2, fraction=0.3):
    """A coarse mesh and a refinement of it, both from random markings."""
    mesh = build_initial(surface, preset)
    for _ in range(coarse_steps):
        mesh = bisect(mesh, np.flatnonzero(rng.random(mesh.n_tri) < fraction))
    fine = mesh
    for _ in range(fine_steps):
        fine = bisect(fine, np.flatnonzero(rng.random(fine.n_tri) < fraction))
    return mesh, fine


# --------------------------------------------------------------------------
# individual identities


def pl1_residual(coarse, fine, f_h, ancestor=None):
    """Largest relative per-element residual of ``int_T (f_h - I_H f_h)`` over coarse ``T``."""
    if ancestor is None:
        ancestor = is_refinement_of(fine, coarse)[1]
    fH = canonical_projection_top(coarse, f_h, fine_mesh=fine).coefficients
    A = fine.areas
    lhs = np.bincount(ancestor, weights=A * (f_h.coefficients - fH[ancestor]),
                      minlength=coarse.n_tri)
    scale = np.bincount(ancestor, weights=A * np.abs(f_h.coefficients), minlength=coarse.n_tri)
    return float(np.max(np.abs(lhs) / np.maximum(scale, np.finfo(float).tiny)))


def pl2_residual(coarse, fine, u_h, f_h, ancestor=None):
    """Largest relative per-element asymmetry of ``<(I_h - I_H) u, f>_T``.

    Both sides use the flat inner product of ``M_A``; ``I_h`` is the identity
    on fine top forms.
    """
    if ancestor is None:
        ancestor = is_refinement_of(fine, coarse)[1]
    u, f = u_h.coefficients, f_h.coefficients
    uH = canonical_projection_top(coarse, u_h, fine_mesh=fine).coefficients[ancestor]
    fH = canonical_projection_top(coarse, f_h, fine_mesh=fine).coefficients[ancestor]
    A = fine.areas
    lhs = np.bincount(ancestor, weights=A * (u - uH) * f, minlength=coarse.n_tri)
    rhs = np.bincount(ancestor, weights=A * u * (f - fH), minlength=coarse.n_tri)
    scale = np.bincount(ancestor, weights=A * np.abs(u * f), minlength=coarse.n_tri)
    return float(np.max(np.abs(lhs - rhs) / np.maximum(scale, np.finfo(float).tiny)))


def adjoint_discrepancy(geom, u, v):
    """Relative gap in ``<i_A u, i_A v>_M = <i_A^* i_A u, v>_{M_A}`` for top forms.

    ``u`` and ``v`` are flat densities sampled at the quadrature points of
    ``geom`` (arrays of shape (nt, nq)). The left side is evaluated on ``M``:
    the pushed-forward forms are read off on the image of the flat frame, whose
    area is computed from the cross product of the mapped frame vectors. The
    right side applies ``i_A^* = star_{M_A} pi_A star_M`` and uses the metric
    determinant, so the two sides share no area computation.

    Returns:
        (relative discrepancy, round-off bound).
    """
    cross = np.cross(geom.jac[..., 0], geom.jac[..., 1])
    area_M = np.linalg.norm(cross, axis=-1)
    lhs_terms = geom.weights * area_M * (u / area_M) * (v / area_M)
    star_u = u / geom.area_factor
    rhs_terms = geom.weights * star_u * v
    lhs, rhs = float(lhs_terms.sum()), float(rhs_terms.sum())
    scale = float(np.abs(lhs_terms).sum())
    bound = 64.0 * np.finfo(float).eps * math.sqrt(u.size)
    return abs(lhs - rhs) / scale, bound


def _mapped_sides(mesh, surface, omega, curl, degree, n_edge):
    """Both sides of the mapped commutation for a covector field on ``M``.

    ``D I(pi_A omega)`` uses edge integrals of the pulled-back form;
    ``I(pi_A d omega)`` integrates the pulled-back curl over each triangle.
    """
    s, w = edge_rule(n_edge)
    a = mesh.vertices[mesh.edges[:, 0]]
    t = mesh.vertices[mesh.edges[:, 1]] - a
    x = a[:, None, :] + s[None, :, None] * t[:, None, :]
    Da = projection_jacobian(surface, x)
    vals = np.einsum("eqi,eqij,ej->eq", omega(normal_projection(surface, x)), Da, t)
    edge = vals @ w
    left = exterior_derivative_matrix(mesh) @ edge
    geom = MeshGeometry(mesh, surface, degree)
    cross = np.cross(geom.jac[..., 0], geom.jac[..., 1])
    dens = np.einsum("tqi,tqi->tq", curl(geom.projected_points), cross)
    right = np.sum(geom.weights * dens, axis=1)
    return left, right


def mapped_commutation(mesh, surface, omega, curl):
    """Discrepancy of ``I d = d I`` for the mapped projections and its quadrature bound.

    The bound is the change of both sides between the rule pair used and the
    next coarser pair, times a safety factor of 10.
    """
    left, right = _mapped_sides(mesh, surface, omega, curl, 6, 6)
    left2, right2 = _mapped_sides(mesh, surface, omega, curl, 5, 5)
    scale = float(np.max(np.abs(right)))
    gap = float(np.max(np.abs(left - right))) / scale
    bound = 10.0 * (float(np.max(np.abs(left - left2))) + float(np.max(np.abs(right - right2))))
    return gap, bound / scale + 1e-14


def poincare_constant(mesh, surface, quad=4):
    """``c_P = max ||v||_V / ||d v||_W`` over the complement of ``ker d``."""
    geom = MeshGeometry(mesh, surface, quad)
    M1 = mass_matrix(mesh, surface, 1, geom=geom).toarray()
    M2 = mass_matrix(mesh, surface, 2, geom=geom)
    # D returns element integrals; densities are D v / |T|
    D = sp.diags(1.0 / mesh.areas) @ exterior_derivative_matrix(mesh)
    K = (D.T @ M2 @ D).toarray()
    lam = sla.eigh(K, M1, eigvals_only=True)
    positive = lam[lam > 1e-10 * lam.max()]
    kernel = len(lam) - len(positive)
    # the graph norm ||v||^2 + ||dv||^2 on the complement
    return math.sqrt((1.0 + positive.min()) / positive.min()), kernel


# --------------------------------------------------------------------------
# groups


def check_geometry(surface_name="sphere"):
    surface = get_surface(surface_name)
    mesh = uniform_refine(build_initial(surface_name, "icosahedron"), 3)
    geom = MeshGeometry(mesh, surface, 4)
    area_err = abs(surface_area(geom) - 4.0 * math.pi) / (4.0 * math.pi)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1.5, 1.5, (2000, 3))
    x = x[np.abs(np.linalg.norm(x, axis=1) - 1.0) < 0.8]
    p = normal_projection(surface, x)
    idem = float(np.max(np.abs(normal_projection(surface, p) - p)))
    h = 1e-6
    grad = np.stack([(surface.signed_distance(x + h * e) - surface.signed_distance(x - h * e))
                     / (2 * h) for e in np.eye(3)], axis=-1)
    unit = float(np.max(np.abs(np.linalg.norm(grad, axis=1) - 1.0)))
    return [_result("geometry", "area_rel_error", area_err, 1e-3, f"{mesh.n_tri} triangles"),
            _result("geometry", "projection_idempotence", idem, 1e-8),
            _result("geometry", "unit_gradient", unit, 1e-8)]


def check_complex(seed=0, corrupt_mass=False):
    """d d = 0, SPD mass matrices and the flat Stokes commutation on test meshes."""
    rng = np.random.default_rng(seed)
    surface = get_surface("sphere")
    meshes = [build_initial("sphere", "icosahedron"), build_initial("sphere", "octahedron")]
    meshes.append(random_nested_pair(rng, coarse_steps=1, fine_steps=1)[1])
    dd, spd, stokes = 0.0, math.inf, 0.0
    for mesh in meshes:
        D = exterior_derivative_matrix(mesh)
        dd = max(dd, float(abs(D @ gradient_matrix(mesh)).max()))
        for degree in (1, 2):
            M = mass_matrix(mesh, surface, degree).toarray()
            if corrupt_mass and degree == 1:
                M[0, 0] = -M[0, 0]
            sym = float(np.max(np.abs(M - M.T)))
            if sym > 1e-12 * np.abs(M).max():
                spd = -math.inf
            spd = min(spd, float(np.linalg.eigvalsh(M).min() / np.abs(M).max()))
        p = mesh.vertices[mesh.triangles]
        normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        for degree in (1, 2, 3):
            omega, curl = random_polynomial_field(rng, degree)
            top = canonical_projection_top(
                mesh, lambda x: np.einsum("tqi,ti->tq", curl(x), normal)).coefficients
            edge = canonical_projection_edge(mesh, omega).coefficients
            res = np.abs(D @ edge - top * mesh.areas) / (np.abs(edge).max() + 1e-300)
            stokes = max(stokes, float(res.max()))
    return [_result("complex", "dd_zero", dd, 0.0),
            _result("complex", "mass_spd_min_eig", spd, 0.0, lower=True,
                    detail="smallest eigenvalue / largest entry"),
            _result("complex", "stokes_commutation", stokes, 1e-10)]


def check_pl1(seed=0, trials=5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        coarse, fine = random_nested_pair(rng)
        f = FormVector(2, rng.standard_normal(fine.n_tri), fine.mesh_id)
        worst = max(worst, pl1_residual(coarse, fine, f))
    return [_result("pl1", "element_integral_residual", worst, 1e-13)]


def check_pl2(seed=0, trials=5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        coarse, fine = random_nested_pair(rng)
        u = FormVector(2, rng.standard_normal(fine.n_tri), fine.mesh_id)
        f = FormVector(2, rng.standard_normal(fine.n_tri), fine.mesh_id)
        worst = max(worst, pl2_residual(coarse, fine, u, f))
    return [_result("pl2", "symmetry_residual", worst, 1e-12)]


def check_adjoint(seed=0, pairs=10):
    rng = np.random.default_rng(seed)
    surface = get_surface("sphere")
    geom = MeshGeometry(uniform_refine(build_initial("sphere", "icosahedron"), 1), surface, 6)
    worst, ratio = 0.0, 0.0
    for _ in range(pairs):
        cu, cv = rng.standard_normal((2, 10))
        x = geom.points

        def smooth(c):
            return (c[0] + x @ c[1:4] + np.einsum("tqi,tqi->tq", x * x, np.broadcast_to(c[4:7], x.shape))
                    + c[7] * x[..., 0] * x[..., 1] + c[8] * x[..., 1] * x[..., 2]
                    + c[9] * x[..., 0] * x[..., 2])

        gap, bound = adjoint_discrepancy(geom, smooth(cu), smooth(cv))
        worst = max(worst, gap)
        ratio = max(ratio, gap / bound)
    return [_result("adjoint", "double_hodge_star_gap_over_bound", ratio, 1.0,
                    f"largest relative gap {worst:.3g}")]


def check_mapped(seed=0, trials=3):
    rng = np.random.default_rng(seed)
    surface = get_surface("sphere")
    mesh = uniform_refine(build_initial("sphere", "icosahedron"), 2)
    ratio, worst = 0.0, 0.0
    for degree in range(1, trials + 1):
        omega, curl = random_polynomial_field(rng, degree)
        gap, bound = mapped_commutation(mesh, surface, omega, curl)
        worst = max(worst, gap)
        ratio = max(ratio, gap / bound)
    return [_result("mapped", "commutation_gap_over_bound", ratio, 1.0,
                    f"largest relative gap {worst:.3g}")]


def check_poincare(factor=2.0):
    surface = get_surface("sphere")
    m1 = uniform_refine(build_initial("sphere", "icosahedron"), 1)
    m2 = uniform_refine(m1, 1)
    c1, k1 = poincare_constant(m1, surface)
    c2, k2 = poincare_constant(m2, surface)
    ok_kernel = k1 == m1.n_vert - 1 and k2 == m2.n_vert - 1
    spread = max(c1, c2) / min(c1, c2) if ok_kernel else math.inf
    return [_result("poincare", "constant_spread", spread, factor,
                    f"c_P = {c1:.4g} ({m1.n_edges} edges), {c2:.4g} ({m2.n_edges} edges)")]


def check_nesting(seed=0, steps=20):
    """Every random bisection is a refinement whose children tile their ancestors."""
    rng = np.random.default_rng(seed)
    mesh = build_initial("sphere", "icosahedron")
    worst, failures = 0.0, 0
    for _ in range(steps):
        fine = bisect(mesh, np.flatnonzero(rng.random(mesh.n_tri) < 0.2))
        nested, anc = is_refinement_of(fine, mesh)
        if not nested:
            failures += 1
            continue
        tiled = np.bincount(anc, weights=fine.areas, minlength=mesh.n_tri)
        worst = max(worst, float(np.max(np.abs(tiled - mesh.areas) / mesh.areas)))
        failures += len(fine.validate())
        mesh = fine
    return [_result("nesting", "not_nested_or_invalid", failures, 0),
            _result("nesting", "area_tiling_residual", worst, 1e-12)]


def check_constants(config=None):
    report = verify_lemmas(config)
    rows = []
    for name in CONSTANT_NAMES:
        values = ", ".join(f"{getattr(p, name):.4g}" for p in report.pairs)
        if name == "quasi_orthogonality":
            rows.append(CheckResult("constants", name, report.spread[name], 0.05,
                                    report.passed[name], f"defects {values}"))
        else:
            rows.append(CheckResult("constants", name + "_spread", report.spread[name], 2.0,
                                    report.passed[name], f"constants {values}"))
    return rows


CHECK_GROUPS = {
    "geometry": check_geometry,
    "complex": check_complex,
    "pl1": check_pl1,
    "pl2": check_pl2,
    "adjoint": check_adjoint,
    "mapped": check_mapped,
    "poincare": check_poincare,
    "nesting": check_nesting,
    "constants": check_constants,
}


def run_checks(groups=None, config=None, seed=0, corrupt_mass=False):
    """Run the selected groups (all when ``None``) and return the rows and the time taken."""
    groups = list(CHECK_GROUPS) if groups is None else list(groups)
    unknown = [g for g in groups if g not in CHECK_GROUPS]
    if unknown:
        raise KeyError(f"unknown check group(s): {', '.join(unknown)}")
    start = time.perf_counter()
    rows = []
    for g in groups:
        if g == "complex":
            rows += check_complex(seed=seed, corrupt_mass=corrupt_mass)
        elif g == "constants":
            rows += check_constants(config or AmfemConfig())
        elif g in ("geometry", "poincare"):
            rows += CHECK_GROUPS[g]()
        else:
            rows += CHECK_GROUPS[g](seed=seed)
    return rows, time.perf_counter() - start
