"""Acceptance criteria, one test each; the session summary prints one line per criterion."""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE, MARKING_AUDIT

from hodge_afem.adapt import (AmfemConfig, amfem_run, contraction_report, matched_comparison,
                              rate_fit, verify_lemmas)
from hodge_afem.checks import run_checks
from hodge_afem.feec import mass_matrix
from hodge_afem.geometry import get_surface
from hodge_afem.mesh import bisect, build_initial, uniform_refine


def _record(number, passed, message):
    ACCEPTANCE.append((number, bool(passed), message))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {message}")
    assert passed, message


def _rows(rows):
    return ", ".join(f"{r.group}.{r.name}={r.value:.3g}" for r in rows)


def _timed_run(config):
    start = time.perf_counter()
    history = amfem_run(config)
    return history, time.perf_counter() - start


@pytest.fixture(scope="session")
def y1_run():
    return _timed_run(AmfemConfig(case="Y1", theta=0.5, epsilon=1e-6, max_triangles=30000))


@pytest.fixture(scope="session")
def bump_runs():
    adaptive = amfem_run(AmfemConfig(case="gaussian-bump", epsilon=1e-6, max_triangles=30000))
    uniform = amfem_run(AmfemConfig(case="gaussian-bump", epsilon=1e-6, max_triangles=30000,
                                    uniform=True))
    return adaptive, uniform


def test_criterion_01_geometry():
    rows, seconds = run_checks(["geometry"])
    passed = all(r.passed for r in rows) and seconds < 5.0
    _record(1, passed, f"{_rows(rows)}; {seconds:.2f} s (< 5 s)")


def test_criterion_02_complex():
    rows, _ = run_checks(["complex"])
    surface = get_surface("sphere")
    meshes = {
        "torus": (get_surface("torus:R=2,r=0.5"),
                  uniform_refine(build_initial("torus:R=2,r=0.5", "torus-grid:6x6"))),
        "adaptive": (surface, amfem_run(AmfemConfig(max_triangles=1200)).final_mesh),
    }
    smallest = math.inf
    for surf, mesh in meshes.values():
        for degree in (1, 2):
            M = mass_matrix(mesh, surf, degree).toarray()
            symmetric = np.abs(M - M.T).max() <= 1e-12 * np.abs(M).max()
            ratio = np.linalg.eigvalsh(M).min() / np.abs(M).max() if symmetric else -math.inf
            smallest = min(smallest, ratio)
    passed = all(r.passed for r in rows) and smallest > 0
    _record(2, passed, f"{_rows(rows)}; torus/adaptive min eig ratio {smallest:.3g}")


def test_criterion_03_lemma_identities():
    rows, seconds = run_checks(["pl1", "pl2", "adjoint"])
    passed = all(r.passed for r in rows) and seconds < 10.0
    _record(3, passed, f"{_rows(rows)}; {seconds:.2f} s (< 10 s)")


def test_criterion_04_coderivative(y1_run, bump_runs):
    histories = {"Y1": y1_run[0], "bump": bump_runs[0], "bump uniform": bump_runs[1]}
    worst = {name: max(it.coderiv_ratio for it in h) for name, h in histories.items()}
    passed = all(v <= 1e-13 for v in worst.values())
    _record(4, passed, "max coderivative / eta_T^2: "
            + ", ".join(f"{k} {v:.3g}" for k, v in worst.items()))


def test_criterion_05_rate(y1_run):
    history, seconds = y1_run
    s_err, s_eta = rate_fit(history, "err"), rate_fit(history, "eta")
    n = history[-1].n_tri
    passed = (0.35 <= s_err <= 0.65 and 0.35 <= s_eta <= 0.65 and len(history) >= 6
              and n >= 2e4 and seconds < 300)
    _record(5, passed, f"s_err={s_err:.3f}, s_eta={s_eta:.3f}, {len(history)} iterations, "
            f"{n} triangles, {seconds:.1f} s")


def test_criterion_06_adaptivity_payoff(bump_runs):
    adaptive, uniform = bump_runs
    rows = matched_comparison(adaptive, uniform, tolerance=0.1)
    late = [r for r in rows if r.level >= 2]
    s_a, s_u = rate_fit(adaptive, "err"), rate_fit(uniform, "err")
    better = all(r.err_adaptive <= r.err_uniform for r in late)
    passed = len(late) >= 1 and better and s_a - s_u >= 0.05
    detail = ", ".join(f"L{r.level}: {r.err_adaptive:.3g}<={r.err_uniform:.3g}" for r in late)
    _record(6, passed, f"{detail}; s_adaptive={s_a:.3f}, s_uniform={s_u:.3f}")


def test_criterion_07_contraction(y1_run):
    history = y1_run[0]
    beta = max(it.err_sq / it.eta_sq for it in history)
    rep = contraction_report(history, delta=0.1, beta=beta, theta=0.5)
    late = [a for it, a in zip(history, rep.alpha) if it.osc_sq < 0.01 * it.eta_sq]
    worst_late = max(late) if late else 0.0
    passed = rep.geometric_mean < 1.0 and worst_late <= 1.05 and late
    _record(7, passed, f"beta={beta:.4g}, geometric mean alpha={rep.geometric_mean:.3f}, "
            f"max alpha once osc small={worst_late:.3f} over {len(late)} steps")


def test_criterion_08_constants():
    report = verify_lemmas(AmfemConfig(case="Y1"))
    rows, seconds = run_checks()
    failed = [f"{r.group}.{r.name}" for r in rows if not r.passed]
    passed = report.ok and len(report.pairs) == 3 and not failed and seconds < 60
    spreads = ", ".join(f"{k}={v:.3g}" for k, v in report.spread.items())
    _record(8, passed, f"{spreads}; verify suite {len(rows) - len(failed)}/{len(rows)} "
            f"in {seconds:.1f} s")


def test_criterion_09_marking_and_refinement(y1_run):
    history = y1_run[0]
    n0 = history[0].n_tri
    ratios = [(it.n_tri - n0) / it.cumulative_marked for it in list(history)[1:]]
    C, spread = max(ratios), max(ratios) / min(ratios)
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mesh = build_initial("sphere", "icosahedron")
    problems = 0
    for _ in range(1000):
        if mesh.n_tri > 4000:
            mesh = build_initial("sphere", "icosahedron")
        count = int(rng.integers(1, max(2, mesh.n_tri // 10)))
        mesh = bisect(mesh, rng.choice(mesh.n_tri, count, replace=False))
        problems += len(mesh.validate())
    seconds = time.perf_counter() - start
    audited = MARKING_AUDIT["calls"]
    passed = (audited > 0 and not MARKING_AUDIT["violations"] and spread <= 2.0
              and problems == 0 and seconds < 60)
    _record(9, passed, f"{audited} markings audited, {len(MARKING_AUDIT['violations'])} "
            f"violations; C={C:.3f} (max/min {spread:.2f}); fuzz 1000 steps, {problems} "
            f"invariant failures, {seconds:.1f} s")


def test_criterion_10_termination():
    history = amfem_run(AmfemConfig(case="Y1", epsilon=1e-3, max_iter=40, max_triangles=200_000))
    eta = math.sqrt(history[-1].eta_sq)
    passed = history.status == "converged" and eta <= 1e-3
    _record(10, passed, f"status {history.status} after {len(history)} iterations, "
            f"{history[-1].n_tri} triangles, eta={eta:.3g} (target 1e-3)")
