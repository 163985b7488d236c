import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import hodge_afem.adapt as adapt
from hodge_afem.geometry import get_surface
from hodge_afem.mesh import build_initial, uniform_refine

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = []
MARKING_AUDIT = {"calls": 0, "violations": []}


def check_dorfler_minimal(eta_sq, theta, marked):
    """Exhaustive audit of one marking: bulk criterion met, and no smaller set meets it.

    A set of size n - 1 reaching the threshold exists iff the n - 1 largest
    indicators do, so checking the largest ``n - 1`` values is exhaustive.
    """
    eta_sq = np.asarray(eta_sq, dtype=float)
    total = eta_sq.sum()
    chosen = eta_sq[marked].sum()
    if chosen < theta * total * (1 - 1e-12):
        return f"marked set carries {chosen / total:.6f} < theta = {theta}"
    best_smaller = np.sort(eta_sq)[::-1][:len(marked) - 1].sum()
    if best_smaller >= theta * total * (1 + 1e-12):
        return f"a set of {len(marked) - 1} elements already reaches theta"
    if chosen - eta_sq[marked].min() >= theta * total * (1 + 1e-12):
        return "removing the smallest marked element keeps the bulk criterion"
    return None


@pytest.fixture(autouse=True)
def audit_marking(monkeypatch):
    """Every Doerfler marking performed during a test is checked for minimality."""
    original = adapt.dorfler_mark

    def audited(field, theta):
        marked = original(field, theta)
        eta_sq = field.eta_sq if hasattr(field, "eta_sq") else field
        MARKING_AUDIT["calls"] += 1
        problem = check_dorfler_minimal(eta_sq, theta, marked)
        if problem:
            MARKING_AUDIT["violations"].append(problem)
        return marked

    monkeypatch.setattr(adapt, "dorfler_mark", audited)
    before = len(MARKING_AUDIT["violations"])
    yield
    assert len(MARKING_AUDIT["violations"]) == before, MARKING_AUDIT["violations"][before:]


@pytest.fixture(scope="session")
def sphere():
    return get_surface("sphere")


@pytest.fixture(scope="session")
def ico():
    return build_initial("sphere", "icosahedron")


@pytest.fixture(scope="session")
def ico2(ico):
    return uniform_refine(ico, 2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, message in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  "
                                    f"{message}")
