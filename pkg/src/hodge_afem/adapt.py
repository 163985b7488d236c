"""Adaptive loop SOLVE -> ESTIMATE -> MARK -> REFINE and its diagnostics."""

import math
import time
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from .errors import (BudgetExceeded, ConfigError, InsufficientData, MissingError, ZeroEstimator)
from .estimator import (coarse_oscillation, edge_jumps, element_indicators, oscillation,
                        whitney_coderivative)
from .feec import (FormVector, MeshGeometry, flat_mass_matrix, prolong_oneform,
                   prolong_topform)
from .geometry import get_surface
from .mesh import SurfaceMesh, bisect, build_initial, is_refinement_of, uniform_refine
from .solver import assemble_mixed, manufactured_solution, reference_error, solve_mixed

LAMBDA = 1.0 - 2.0 ** -0.5


def dorfler_mark(field, theta):
    """Minimal set of triangles carrying at least ``theta`` of the squared estimator.

    Indicators are taken in decreasing order, ties by smaller triangle id; the
    result is returned sorted.

    Raises:
        ZeroEstimator: all indicators vanish.
    """
    eta_sq = field.eta_sq if hasattr(field, "eta_sq") else np.asarray(field, dtype=float)
    if not 0.0 < theta < 1.0 + 1e-15:
        raise ValueError("theta must lie in (0, 1]")
    total = float(eta_sq.sum())
    if total <= 0.0:
        raise ZeroEstimator("estimator vanishes")
    order = np.lexsort((np.arange(len(eta_sq)), -eta_sq))
    csum = np.cumsum(eta_sq[order])
    n = int(np.searchsorted(csum, theta * total * (1.0 - 1e-14), side="left")) + 1
    n = min(n, len(eta_sq))
    return np.sort(order[:n])


@dataclass
class AmfemConfig:
    """Parameters of an adaptive run (see ``amfem_run``)."""

    theta: float = 0.5
    epsilon: float = 1e-3
    max_iter: int = 40
    delta: float = 0.1
    beta: float = 1.0
    surface: str = "sphere"
    mesh: str = "icosahedron"
    case: str = "Y1"
    bump_width: float = 0.1
    bump_center: tuple = (0.0, 0.0, 1.0)
    quad: int = 4
    quad_ref: int = 6
    tol: float = 1e-10
    method: str = "auto"
    max_triangles: int = 400_000
    uniform: bool = False
    keep_meshes: bool = False

    def validate(self):
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta", "must lie in (0, 1)")
        if not self.epsilon > 0.0:
            raise ConfigError("epsilon", "must be positive")
        if int(self.max_iter) < 1:
            raise ConfigError("max_iter", "must be at least 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta", "must lie in (0, 1)")
        if not self.beta > 0.0:
            raise ConfigError("beta", "must be positive")
        for key in ("quad", "quad_ref"):
            if not 1 <= int(getattr(self, key)) <= 6:
                raise ConfigError(key, "quadrature degree must lie in 1..6")
        if not 1e-14 <= self.tol <= 1e-6:
            raise ConfigError("tol", "must lie in [1e-14, 1e-6]")
        if self.method not in ("auto", "direct", "minres"):
            raise ConfigError("method", "must be auto, direct or minres")
        return self

    def manufactured(self):
        return manufactured_solution(self.case, center=self.bump_center, width=self.bump_width)


@dataclass
class AmfemIteration:
    """One pass of the loop. ``E_sq`` and ``osc_hat_sq`` are filled one step later."""

    k: int
    n_tri: int
    n_edges: int
    n_dofs: int
    eta_sq: float
    osc_sq: float
    err_sq: Optional[float]
    marked_count: int
    cumulative_marked: int
    residual_norm: float
    p_const: float
    coderiv_ratio: float
    wall_time: float
    E_sq: Optional[float] = None
    osc_hat_sq: Optional[float] = None

    def quasi_error(self, delta, beta):
        if self.err_sq is None:
            raise MissingError("no reference error recorded")
        return (1.0 - delta) * self.err_sq + beta * self.eta_sq


class AmfemHistory(list):
    """List of ``AmfemIteration`` with the stopping status and final state."""

    status = "running"
    final_mesh = None
    meshes: list = None
    solutions: list = None


def _data(config):
    if config.case.lower() in ("zero", "0"):
        case = manufactured_solution("zero")
    else:
        case = config.manufactured()
    return case


def _reference(case, config):
    return case.sigma if case.name != "zero" else None


def amfem_run(config, mesh0=None, data=None, on_iteration=None):
    """Run the adaptive algorithm.

    Args:
        config: ``AmfemConfig``.
        mesh0: initial mesh (default: ``build_initial(config.surface, config.mesh)``).
        data: optional override of the data: a density on ``M`` or a top-form
            FormVector on ``mesh0`` (e.g. the output of ``approx_data``).
        on_iteration: callback receiving each completed ``AmfemIteration``.

    Returns:
        AmfemHistory with ``status`` one of ``converged`` (eta <= epsilon),
        ``max_iter`` or ``budget`` (triangle cap reached).
    """
    config.validate()
    surface = get_surface(config.surface)
    mesh = mesh0 if mesh0 is not None else build_initial(config.surface, config.mesh)
    case = _data(config)
    f = case.f if data is None else data
    data_mesh = mesh if isinstance(f, FormVector) else None
    sigma_exact = _reference(case, config) if data is None else None
    history = AmfemHistory()
    history.meshes = [] if config.keep_meshes else None
    history.solutions = [] if config.keep_meshes else None
    prev = None
    n0 = mesh.n_tri
    for k in range(int(config.max_iter)):
        start = time.perf_counter()
        geom = MeshGeometry(mesh, surface, config.quad)
        system = assemble_mixed(mesh, surface, f, geom=geom, data_mesh=data_mesh)
        sol = solve_mixed(system, tol=config.tol, method=config.method)
        fdata = f if not isinstance(f, FormVector) or f.mesh_id == mesh.mesh_id else \
            prolong_topform(f, mesh, data_mesh)
        ind = element_indicators(mesh, surface, sol.sigma, fdata, geom=geom)
        eta_sq = ind.total_eta_sq
        err_sq = None
        if sigma_exact is not None:
            geom_ref = MeshGeometry(mesh, surface, config.quad_ref)
            err_sq = reference_error(sol, sigma_exact, mesh, surface, geom=geom_ref) ** 2
        cod = ind.coderiv_sq / np.maximum(ind.eta_sq, np.finfo(float).tiny)
        if prev is not None:
            pmesh, psol, anc = prev[0], prev[1], is_refinement_of(mesh, prev[0])[1]
            d = sol.sigma.coefficients - prolong_oneform(psol.sigma, mesh, pmesh, anc).coefficients
            history[-1].E_sq = float(d @ (system.M1 @ d))
            fine_density = system.F / system.M2.diagonal()
            history[-1].osc_hat_sq = coarse_oscillation(fine_density, mesh, pmesh, anc)[1]
        it = AmfemIteration(k, mesh.n_tri, mesh.n_edges, system.n_dofs, eta_sq, ind.total_osc_sq,
                            err_sq, 0, mesh.cumulative_marked, sol.residual_norm, sol.p_const,
                            float(cod.max()), 0.0)
        history.append(it)
        if history.meshes is not None:
            history.meshes.append(mesh)
            history.solutions.append(sol)
        history.final_mesh = mesh
        if math.sqrt(eta_sq) <= config.epsilon:
            it.wall_time = time.perf_counter() - start
            history.status = "converged"
            if on_iteration:
                on_iteration(it)
            break
        if k == int(config.max_iter) - 1:
            it.wall_time = time.perf_counter() - start
            history.status = "max_iter"
            if on_iteration:
                on_iteration(it)
            break
        if config.uniform:
            marked = np.arange(mesh.n_tri)
            fine = uniform_refine(mesh)
            fine = _with_marked(fine, mesh.cumulative_marked + mesh.n_tri)
        else:
            try:
                marked = dorfler_mark(ind, config.theta)
            except ZeroEstimator:
                history.status = "converged"
                break
            fine = bisect(mesh, marked)
        it.marked_count = int(len(marked))
        it.wall_time = time.perf_counter() - start
        if on_iteration:
            on_iteration(it)
        if fine.n_tri > config.max_triangles:
            history.status = "budget"
            break
        prev = (mesh, sol)
        mesh = fine
    history.n0 = n0
    return history


def _with_marked(mesh, count):
    return SurfaceMesh(mesh.vertices, mesh.triangles, mesh.surface_name, mesh.generation,
                       mesh.root, mesh.code, mesh.parent, count, mesh.root_id)


def approx_data(f, mesh0, epsilon, surface=None, theta=0.5, quad=4, max_triangles=200_000):
    """Greedy oscillation reduction: mark by oscillation, bisect, until osc <= epsilon.

    A practical stand-in for an optimal tree approximation.

    Returns:
        (mesh, number of triangles added).

    Raises:
        BudgetExceeded: the mesh would exceed ``max_triangles``.
    """
    surface = surface or get_surface(mesh0.surface_name)
    mesh = mesh0
    while True:
        per, total = oscillation(mesh, surface, f, quad=quad)
        if math.sqrt(total) <= epsilon:
            return mesh, mesh.n_tri - mesh0.n_tri
        marked = dorfler_mark(per, theta)
        fine = bisect(mesh, marked)
        if fine.n_tri > max_triangles:
            raise BudgetExceeded(f"oscillation target {epsilon:g} needs more than "
                                 f"{max_triangles} triangles")
        mesh = fine


@dataclass
class ContractionReport:
    alpha: List[float]
    residual: List[float]
    geometric_mean: float
    max_alpha: float
    violations: List[int]


def contraction_report(history, delta, beta, theta=0.5, tol=1e-10):
    """Per-step quasi-error ratios and the one-step estimator reduction residual.

    ``alpha_k = Q_{k+1} / Q_k`` with ``Q = (1 - delta) e^2 + beta eta^2``;
    ``r_k = beta (1 - lambda theta) eta_k^2 + E_k + osc_hat_k - beta eta_{k+1}^2``
    with ``lambda = 1 - 2^{-1/2}``. Steps with ``r_k < -tol Q_0`` are violations.

    Raises:
        MissingError: a reference error is missing.
    """
    if any(it.err_sq is None for it in history):
        raise MissingError("contraction needs reference errors on every iteration")
    Q = [it.quasi_error(delta, beta) for it in history]
    alpha, residual, violations = [], [], []
    for k in range(len(history) - 1):
        a, b = history[k], history[k + 1]
        alpha.append(Q[k + 1] / Q[k] if Q[k] > 0 else 1.0)
        E = a.E_sq or 0.0
        o = a.osc_hat_sq or 0.0
        r = beta * (1.0 - LAMBDA * theta) * a.eta_sq + E + o - beta * b.eta_sq
        residual.append(r)
        if r < -tol * Q[0]:
            violations.append(k)
    if not alpha:
        return ContractionReport([], [], 1.0, 1.0, [])
    gm = float(np.exp(np.mean(np.log(np.maximum(alpha, 1e-300)))))
    return ContractionReport(alpha, residual, gm, float(max(alpha)), violations)


def rate_fit(history, which="err", skip=2, n0=None):
    """Fitted exponent ``s`` in ``value ~ (#T - #T_0)^{-s}``.

    ``which`` selects ``err`` (sqrt of err_sq) or ``eta``. The first ``skip``
    iterations are excluded.

    Raises:
        InsufficientData: fewer than 5 iterations or 2 usable points.
    """
    if len(history) < 5:
        raise InsufficientData(f"rate fit needs at least 5 iterations, got {len(history)}")
    n0 = history[0].n_tri if n0 is None else n0
    x, y = [], []
    for it in list(history)[skip:]:
        value = it.err_sq if which == "err" else it.eta_sq
        if value is None or value <= 0 or it.n_tri <= n0:
            continue
        x.append(math.log(it.n_tri - n0))
        y.append(0.5 * math.log(value))
    if len(x) < 2:
        raise InsufficientData("not enough positive values to fit a rate")
    slope = np.polyfit(np.array(x), np.array(y), 1)[0]
    return float(-slope)


def history_rows(history):
    """Plain dict rows (one per iteration) for CSV output."""
    rows = []
    for it in history:
        d = asdict(it)
        rows.append(d)
    return rows


HISTORY_FIELDS = [f.name for f in fields(AmfemIteration)]


# --------------------------------------------------------------------------
# verification of the supporting inequalities


@dataclass
class PairConstants:
    """Measured constants for one nested pair (coarse ``H``, fine ``h``)."""

    n_coarse: int
    n_fine: int
    reliability: float
    discrete_upper: float
    efficiency: float
    discrete_efficiency: float
    continuity: float
    continuity_lipschitz: float
    continuity_beta: float
    quasi_orthogonality: float
    continuous_stability: float
    discrete_stability: float


CONSTANT_NAMES = ["reliability", "discrete_upper", "efficiency", "discrete_efficiency",
                  "continuity", "quasi_orthogonality", "continuous_stability",
                  "discrete_stability"]


def _norm_sq(M, v):
    return float(v @ (M @ v))


def _solve(mesh, surface, data, quad, tol, data_mesh=None, geom=None):
    geom = geom or MeshGeometry(mesh, surface, quad)
    system = assemble_mixed(mesh, surface, data, geom=geom, data_mesh=data_mesh)
    return system, solve_mixed(system, tol=tol), geom


def pair_constants(coarse, fine, surface, case, quad=4, tol=1e-10, overkill=2):
    """Measure every inequality constant on the nested pair ``coarse`` < ``fine``.

    Estimator continuity is measured through the bound that implies it: the
    data-free estimator of ``sigma_h - sigma_H`` on the fine mesh, divided by
    ``||sigma_h - sigma_H||^2 + osc^2(f_h, T_H)``. The raw ratio
    ``|eta_h(sigma_h) - eta_h(sigma_H)| / sqrt(...)`` and the largest admissible
    ``beta`` (infinite when the left side is not positive) are kept as diagnostics.

    Exact solutions of the continuous problem with discrete data are replaced by
    solves on ``fine`` refined uniformly ``overkill`` more times.
    """
    f = case.f
    _, anc = is_refinement_of(fine, coarse)
    sysH, solH, gH = _solve(coarse, surface, f, quad, tol)
    sysh, solh, gh = _solve(fine, surface, f, quad, tol)
    fH = FormVector(2, sysH.F / sysH.M2.diagonal(), coarse.mesh_id)
    fh = FormVector(2, sysh.F / sysh.M2.diagonal(), fine.mesh_id)
    _, soltil, _ = _solve(fine, surface, fH, quad, tol, data_mesh=coarse, geom=gh)

    indH = element_indicators(coarse, surface, solH.sigma, f, geom=gH)
    indh = element_indicators(fine, surface, solh.sigma, f, geom=gh)
    sH_on_h = prolong_oneform(solH.sigma, fine, coarse, anc)
    ind_Hh = element_indicators(fine, surface, sH_on_h, f, geom=gh)

    M1 = sysh.M1
    dsig = solh.sigma.coefficients - sH_on_h.coefficients
    dsig_sq = _norm_sq(M1, dsig)
    dsig_flat_sq = _norm_sq(flat_mass_matrix(fine, 1), dsig)

    ref = uniform_refine(fine, overkill)
    sysr, solr, gr = _solve(ref, surface, f, quad, tol)
    _, solr_fh, _ = _solve(ref, surface, fh, quad, tol, data_mesh=fine, geom=gr)
    _, anc_r = is_refinement_of(ref, fine)
    _, anc_rH = is_refinement_of(ref, coarse)
    Mr = sysr.M1
    sr = solr.sigma.coefficients
    sh_r = prolong_oneform(solh.sigma, ref, fine, anc_r).coefficients
    sH_r = prolong_oneform(solH.sigma, ref, coarse, anc_rH).coefficients
    stil_r = prolong_oneform(soltil.sigma, ref, fine, anc_r).coefficients

    err_H = reference_error(solH, case.sigma, coarse, surface, quad=6) ** 2
    err_hH = dsig_sq
    osc_H = indH.total_osc_sq
    osc_fh_H = coarse_oscillation(fh.coefficients, fine, coarse, anc)[1]
    _, osc_f_h = oscillation(fine, surface, f, geom=gh)

    # discrete efficiency: jump and coderivative terms of the difference field
    jump = gh.diam * edge_jumps(gh, dsig)[fine.tri_edges].sum(axis=1)
    cod = gh.diam**2 * gh.area * whitney_coderivative(gh, dsig) ** 2
    dis_eff = float((jump + cod).sum()) / max(dsig_flat_sq, 1e-300)
    d_dsig = (fine.edge_signs * dsig[fine.tri_edges]).sum(axis=1) / gh.area
    eta0_sq = float((jump + cod + gh.diam**2 * gh.area * d_dsig**2).sum())

    a, b = sr - sh_r, stil_r - sH_r
    inner = float(a @ (Mr @ b))
    qo = abs(inner) / (math.sqrt(_norm_sq(Mr, a) * _norm_sq(Mr, b)) + 1e-300)

    rhs = dsig_flat_sq + osc_fh_H
    continuity = eta0_sq / rhs
    diff = indh.total_eta_sq - ind_Hh.total_eta_sq
    lip = abs(math.sqrt(indh.total_eta_sq) - math.sqrt(ind_Hh.total_eta_sq)) / math.sqrt(rhs)
    beta = rhs / diff if diff > 0 else math.inf

    cont = math.sqrt(_norm_sq(Mr, sr - solr_fh.sigma.coefficients)) / math.sqrt(osc_f_h)
    dstab = math.sqrt(_norm_sq(M1, solh.sigma.coefficients - soltil.sigma.coefficients)) / \
        math.sqrt(osc_fh_H)
    return PairConstants(coarse.n_tri, fine.n_tri, err_H / indH.total_eta_sq,
                         err_hH / indH.total_eta_sq, indH.total_eta_sq / (err_H + osc_H),
                         dis_eff, continuity, lip, beta, qo, cont, dstab)


@dataclass
class VerifyReport:
    pairs: List[PairConstants]
    spread: dict
    passed: dict
    seconds: float

    @property
    def ok(self):
        return all(self.passed.values())


def verify_lemmas(config=None, n_pairs=3, start_triangles=1000, stability_factor=2.0,
                  orthogonality_cap=0.05):
    """Measure the inequality constants on successive nested pairs of an adaptive run.

    The adaptive run (Doerfler marking with ``config.theta``) is continued until
    the mesh has at least ``start_triangles``; the next ``n_pairs`` consecutive
    (coarse, fine) pairs are measured. A constant passes when it is finite and
    positive on every pair and its max/min ratio is at most ``stability_factor``;
    the quasi-orthogonality defect passes when it is at most ``orthogonality_cap``.
    """
    config = (config or AmfemConfig()).validate()
    start = time.perf_counter()
    surface = get_surface(config.surface)
    case = config.manufactured()
    mesh = build_initial(config.surface, config.mesh)
    meshes = [mesh]
    while len(meshes) < n_pairs + 1:
        geom = MeshGeometry(mesh, surface, config.quad)
        system = assemble_mixed(mesh, surface, case.f, geom=geom)
        sol = solve_mixed(system, tol=config.tol)
        ind = element_indicators(mesh, surface, sol.sigma, case.f, geom=geom)
        mesh = bisect(mesh, dorfler_mark(ind, config.theta))
        if mesh.n_tri >= start_triangles:
            meshes.append(mesh)
        else:
            meshes = [mesh]
    pairs = [pair_constants(meshes[i], meshes[i + 1], surface, case, quad=config.quad,
                            tol=config.tol) for i in range(n_pairs)]
    spread, passed = {}, {}
    for name in CONSTANT_NAMES:
        vals = np.array([getattr(p, name) for p in pairs])
        finite = bool(np.all(np.isfinite(vals)) and np.all(vals >= 0))
        if name == "quasi_orthogonality":
            spread[name] = float(vals.max())
            passed[name] = finite and spread[name] <= orthogonality_cap
            continue
        ok = finite and np.all(vals > 0)
        spread[name] = float(vals.max() / vals.min()) if ok else math.inf
        passed[name] = bool(ok and spread[name] <= stability_factor)
    return VerifyReport(pairs, spread, passed, time.perf_counter() - start)


@dataclass
class MatchedLevel:
    level: int
    n_uniform: int
    err_uniform: float
    n_adaptive: float
    err_adaptive: float
    interpolated: bool


def matched_comparison(adaptive, uniform, tolerance=0.1):
    """Adaptive error at the triangle counts of a uniform series.

    For each uniform level inside the adaptive range, the adaptive iterate whose
    triangle count is nearest is used when it lies within ``tolerance``
    (relative); otherwise the adaptive error is interpolated linearly in
    log(#T)-log(error) between the bracketing iterates.

    Raises:
        MissingError: a series lacks reference errors.
    """
    if any(it.err_sq is None for it in list(adaptive) + list(uniform)):
        raise MissingError("matched comparison needs reference errors")
    n_a = np.array([it.n_tri for it in adaptive], dtype=float)
    e_a = np.sqrt([it.err_sq for it in adaptive])
    rows = []
    for level, it in enumerate(uniform):
        n = it.n_tri
        if n < n_a[0] or n > n_a[-1]:
            continue
        j = int(np.argmin(np.abs(n_a - n)))
        if abs(n_a[j] - n) <= tolerance * n:
            rows.append(MatchedLevel(level, n, math.sqrt(it.err_sq), float(n_a[j]), float(e_a[j]),
                                     False))
            continue
        e = math.exp(np.interp(math.log(n), np.log(n_a), np.log(e_a)))
        rows.append(MatchedLevel(level, n, math.sqrt(it.err_sq), float(n), e, True))
    return rows
