import math

import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st

from hodge_afem.errors import DegenerateTriangle, OutsideTube, UnknownSurface, UnsupportedDegree
from hodge_afem.feec import MeshGeometry, surface_area
from hodge_afem.geometry import (edge_rule, get_surface, metric_singular_values,
                                 normal_projection, projection_jacobian, pullback_oneform,
                                 pullback_topform, quadrature_rule, tangent_map)
from hodge_afem.mesh import SurfaceMesh, build_initial, uniform_refine


def _reference_integral(a, b):
    x, y = sympy.symbols("x y")
    return float(sympy.integrate(sympy.integrate(x**a * y**b, (y, 0, 1 - x)), (x, 0, 1)))


def _apply_rule(rule, a, b):
    x, y = rule.points[:, 1], rule.points[:, 2]
    return float(rule.weights @ (x**a * y**b))


def test_centroid_rule():
    rule = quadrature_rule(1)
    assert rule.weights.shape == (1,)
    assert rule.weights[0] == pytest.approx(0.5)
    assert np.allclose(rule.points[0], 1 / 3)


@pytest.mark.parametrize("degree", range(1, 7))
def test_rules_exact_to_their_degree(degree):
    rule = quadrature_rule(degree)
    assert rule.weights.sum() == pytest.approx(0.5, abs=1e-15)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            assert _apply_rule(rule, a, b) == pytest.approx(_reference_integral(a, b),
                                                            rel=1e-13, abs=1e-15)


def test_x2y2_with_degree_four():
    assert abs(_apply_rule(quadrature_rule(4), 2, 2) - 1 / 180) < 1e-15


@pytest.mark.parametrize("degree", [0, 7, 2.5])
def test_unsupported_degree(degree):
    with pytest.raises(UnsupportedDegree):
        quadrature_rule(degree)


def test_edge_rule_exactness():
    s, w = edge_rule(3)
    for p in range(6):
        assert w @ s**p == pytest.approx(1 / (p + 1), rel=1e-14)


def test_sphere_projection_examples():
    sphere = get_surface("sphere")
    assert np.allclose(normal_projection(sphere, np.array([0.0, 0.0, 1.5])), [0, 0, 1])
    p = np.array([0.6, 0.0, 0.8])
    assert np.allclose(normal_projection(sphere, p), p, atol=1e-15)
    with pytest.raises(OutsideTube):
        normal_projection(sphere, np.array([0.0, 0.0, 0.05]))


def test_torus_projection_against_closed_form():
    torus = get_surface("torus:R=2,r=0.5")
    rng = np.random.default_rng(3)
    phi, psi = rng.uniform(0, 2 * np.pi, (2, 50))
    t = rng.uniform(-0.3, 0.3, 50)
    rho = 2.0 + (0.5 + t) * np.cos(psi)
    x = np.stack([rho * np.cos(phi), rho * np.sin(phi), (0.5 + t) * np.sin(psi)], axis=1)
    rho0 = 2.0 + 0.5 * np.cos(psi)
    expected = np.stack([rho0 * np.cos(phi), rho0 * np.sin(phi), 0.5 * np.sin(psi)], axis=1)
    assert np.allclose(normal_projection(torus, x), expected, atol=1e-13)
    assert np.allclose(torus.signed_distance(x), t, atol=1e-13)


def test_unknown_surface():
    with pytest.raises(UnknownSurface):
        get_surface("cube")
    with pytest.raises(UnknownSurface):
        get_surface("torus:R=1,r=2")


points_in_tube = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
                           st.floats(0.2, 1.8)).filter(lambda v: np.linalg.norm(v[:3]) > 0.1)


@given(points_in_tube)
def test_projection_idempotent_and_unit_gradient(v):
    sphere = get_surface("sphere")
    x = np.array(v[:3]) / np.linalg.norm(v[:3]) * v[3]
    p = normal_projection(sphere, x)
    assert np.allclose(normal_projection(sphere, p), p, atol=1e-14)
    assert abs(np.linalg.norm(p) - 1.0) < 1e-14
    h = 1e-6
    grad = np.array([(sphere.signed_distance(x + h * e) - sphere.signed_distance(x - h * e))
                     / (2 * h) for e in np.eye(3)])
    assert abs(np.linalg.norm(grad) - 1.0) < 1e-8


@given(points_in_tube)
def test_projection_jacobian_matches_finite_differences(v):
    sphere = get_surface("sphere")
    x = np.array(v[:3]) / np.linalg.norm(v[:3]) * v[3]
    h = 1e-6
    fd = np.stack([(normal_projection(sphere, x + h * e) - normal_projection(sphere, x - h * e))
                   / (2 * h) for e in np.eye(3)], axis=1)
    assert np.allclose(projection_jacobian(sphere, x), fd, atol=1e-7)


def test_plane_tangent_map_is_identity():
    plane = get_surface("plane")
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    ts = tangent_map(plane, tri, [0.2, 0.3, 0.5])
    assert ts.area_factor == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(ts.metric, np.eye(2))
    omega = lambda x: np.broadcast_to([0.3, -1.2, 0.0], x.shape)
    frame = ts.jacobian
    assert np.allclose(pullback_oneform(plane, omega, tri, [1 / 3] * 3),
                       frame.T @ np.array([0.3, -1.2, 0.0]))


def test_degenerate_triangle():
    tri = np.array([[0.0, 0, 1], [1e-9, 0, 1], [2e-9, 0, 1]])
    with pytest.raises(DegenerateTriangle):
        tangent_map(get_surface("sphere"), tri, [1 / 3] * 3)


def test_dz_vanishes_at_north_pole():
    sphere = get_surface("sphere")
    tri = np.array([[-0.1, -0.1, 1.0], [0.1, -0.1, 1.0], [0.0, 0.1, 1.0]])
    bary = np.array([0.25, 0.25, 0.5])
    assert np.allclose(bary @ tri, [0, 0, 1])
    dz = lambda x: np.broadcast_to([0.0, 0.0, 1.0], x.shape)
    assert np.allclose(pullback_oneform(sphere, dz, tri, bary), 0.0, atol=1e-15)


def test_pullback_of_dz_matches_finite_differences_of_potential():
    # dz restricted to M is the tangential part of e_z; its pullback is d(z o a)
    sphere = get_surface("sphere")
    tri = np.array([[0.9, 0.1, 0.3], [0.5, 0.7, 0.4], [0.6, 0.2, 0.8]])
    bary = np.array([0.2, 0.5, 0.3])
    ts = tangent_map(sphere, tri, bary)

    def grad_s(p):
        n = p / np.linalg.norm(p, axis=-1, keepdims=True)
        return np.array([0.0, 0, 1]) - n[..., 2:3] * n

    pulled = pullback_oneform(sphere, grad_s, tri, bary)
    x = bary @ tri
    e1 = (tri[1] - tri[0]) / np.linalg.norm(tri[1] - tri[0])
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    e2 = np.cross(n / np.linalg.norm(n), e1)
    h = 1e-6
    fd = [(normal_projection(sphere, x + h * e)[2] - normal_projection(sphere, x - h * e)[2])
          / (2 * h) for e in (e1, e2)]
    assert np.allclose(pulled, fd, atol=1e-8)
    assert ts.area_factor > 0


def test_pullback_topform_scales_by_area_factor():
    sphere = get_surface("sphere")
    tri = np.array([[0.9, 0.1, 0.3], [0.5, 0.7, 0.4], [0.6, 0.2, 0.8]])
    bary = [0.3, 0.3, 0.4]
    ts = tangent_map(sphere, tri, bary)
    sv = ts.singular_values
    assert ts.area_factor == pytest.approx(sv[0] * sv[1], rel=1e-12)
    assert pullback_topform(sphere, lambda p: np.full(len(p), 2.0), tri, bary) == \
        pytest.approx(2.0 * ts.area_factor, rel=1e-14)


def test_metric_singular_values_against_svd():
    rng = np.random.default_rng(0)
    J = rng.standard_normal((20, 3, 2))
    G = np.swapaxes(J, -1, -2) @ J
    assert np.allclose(metric_singular_values(G), np.linalg.svd(J, compute_uv=False))


def test_area_converges_with_order_two():
    sphere = get_surface("sphere")
    mesh = build_initial("sphere", "icosahedron")
    errors = []
    for _ in range(4):
        errors.append(abs(surface_area(MeshGeometry(mesh, sphere, 4)) - 4 * math.pi))
        mesh = uniform_refine(mesh)
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= 1.9), orders


def _singular_value_extremes(mesh, surface):
    sv = metric_singular_values(MeshGeometry(mesh, surface, 4).metric)
    return sv[..., 0].max(), (1 / sv[..., 1]).max()


def test_singular_values_tighten_on_inscribed_meshes():
    # vertices pushed onto the sphere after each refinement: a sharper polyhedron
    sphere = get_surface("sphere")
    mesh = build_initial("sphere", "icosahedron")
    a1, inv_a2 = [], []
    for _ in range(5):
        inscribed = SurfaceMesh(mesh.vertices / np.linalg.norm(mesh.vertices, axis=1)[:, None],
                                mesh.triangles, "sphere")
        m1, m2 = _singular_value_extremes(inscribed, sphere)
        a1.append(m1)
        inv_a2.append(m2)
        mesh = uniform_refine(inscribed)
    # 1/alpha_2 rises once on the first split of the icosahedron, then decreases
    assert np.all(np.diff(a1) < 0) and np.all(np.diff(inv_a2[1:]) < 0)
    assert a1[-1] < 1.02 and inv_a2[-1] < 1.02


def test_singular_values_bounded_on_fixed_polyhedron():
    # refinement keeps the flat surface, so the extremes stay those of the coarse polyhedron
    sphere = get_surface("sphere")
    mesh = build_initial("sphere", "icosahedron")
    first = _singular_value_extremes(mesh, sphere)
    for _ in range(3):
        mesh = uniform_refine(mesh)
        m1, m2 = _singular_value_extremes(mesh, sphere)
        assert m1 <= 1.3 and m2 <= 1.3
        assert abs(m1 - first[0]) < 0.02
