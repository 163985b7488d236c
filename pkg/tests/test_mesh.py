import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hodge_afem.errors import DifferentRoot, UnknownPreset
from hodge_afem.geometry import get_surface
from hodge_afem.mesh import (bisect, build_initial, closure_edges, export_mesh, is_refinement_of,
                             load_mesh, shape_regularity, sidecar_path, uniform_refine)


@pytest.mark.parametrize("preset, counts", [("icosahedron", (12, 30, 20)),
                                            ("octahedron", (6, 12, 8))])
def test_platonic_presets(preset, counts):
    mesh = build_initial("sphere", preset)
    assert (mesh.n_vert, mesh.n_edges, mesh.n_tri) == counts
    assert mesh.euler_characteristic() == 2
    assert mesh.validate(get_surface("sphere")) == []


def test_torus_grid():
    mesh = build_initial("torus:R=2,r=0.5", "torus-grid:8x8")
    assert mesh.n_tri == 128 and mesh.euler_characteristic() == 0
    assert mesh.validate(get_surface("torus:R=2,r=0.5")) == []


@pytest.mark.parametrize("preset", ["cube", "torus-grid:2x5", "torus-grid:ax3"])
def test_unknown_preset(preset):
    with pytest.raises(UnknownPreset):
        build_initial("sphere", preset)


def test_outward_orientation():
    mesh = build_initial("sphere", "icosahedron")
    p = mesh.vertices[mesh.triangles]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    assert np.all(np.einsum("ti,ti->t", normals, p.mean(axis=1)) > 0)


def test_refinement_edge_is_longest_on_initial_mesh():
    mesh = build_initial("sphere", "octahedron")
    lengths = mesh.edge_lengths
    assert np.all(lengths[:, 0] >= lengths.max(axis=1) - 1e-15)


def test_uniform_refinement_counts(ico):
    assert uniform_refine(ico).n_tri == 80
    twice = uniform_refine(ico, 2)
    assert twice.n_tri == 320 and twice.n_vert == 162
    # marking everything flags exactly the refinement edges, already a closed set
    expected = np.zeros(ico.n_edges, bool)
    expected[ico.tri_edges[:, 0]] = True
    assert np.array_equal(closure_edges(ico, np.arange(20)), expected)
    assert twice.validate() == []


def test_single_bisection_splits_one_edge_pair(ico):
    fine = bisect(ico, [0])
    # the refinement edge of triangle 0 and, by closure, its neighbour across it
    assert fine.n_tri == 22 and fine.n_vert == 13
    assert fine.cumulative_marked == 1
    nested, anc = is_refinement_of(fine, ico)
    assert nested and np.bincount(anc, minlength=20).max() == 2


def test_empty_marking_returns_same_mesh(ico):
    assert bisect(ico, []) is ico
    with pytest.raises(IndexError):
        bisect(ico, [20])


def test_children_geometry(ico):
    fine = bisect(ico, [3])
    nested, anc = is_refinement_of(fine, ico)
    children = np.flatnonzero(anc == 3)
    assert len(children) == 2
    a, b, c = ico.triangles[3]
    m = fine.triangles[children[0], 0]
    assert np.allclose(fine.vertices[m], 0.5 * (ico.vertices[b] + ico.vertices[c]))
    assert np.all(fine.triangles[children, 0] == m)
    assert np.allclose(fine.areas[children], 0.5 * ico.areas[3])


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=8), st.integers(0, 10**6))
def test_random_bisection_invariants(steps, seed):
    rng = np.random.default_rng(seed)
    mesh = build_initial("sphere", "icosahedron")
    root = mesh
    q0 = shape_regularity(mesh)
    for s in steps:
        k = 1 + s % 5
        marked = rng.choice(mesh.n_tri, size=min(k, mesh.n_tri), replace=False)
        fine = bisect(mesh, marked)
        assert fine.validate() == []
        assert fine.euler_characteristic() == 2
        # closed surface: 3F = 2E and fixed chi give dF = 2 dV
        assert fine.n_tri - mesh.n_tri == 2 * (fine.n_vert - mesh.n_vert)
        nested, anc = is_refinement_of(fine, mesh)
        assert nested
        assert np.all(np.isin(marked, anc[fine.generation > mesh.generation[anc]]))
        assert np.allclose(np.bincount(anc, weights=fine.areas, minlength=mesh.n_tri),
                           mesh.areas, rtol=1e-13)
        mesh = fine
    assert is_refinement_of(mesh, root)[0]
    # newest-vertex bisection produces finitely many similarity classes
    assert shape_regularity(mesh) >= 0.25 * q0


def test_not_nested_and_different_root(ico):
    a = bisect(ico, [0])
    b = bisect(ico, [10])
    nested, anc = is_refinement_of(a, b)
    assert not nested and np.any(anc < 0)
    other = build_initial("sphere", "octahedron")
    with pytest.raises(DifferentRoot):
        is_refinement_of(a, other)


@pytest.mark.parametrize("suffix", [".off", ".obj"])
def test_export_roundtrip(tmp_path, suffix):
    mesh = bisect(uniform_refine(build_initial("sphere", "icosahedron")), [0, 5, 7])
    path = export_mesh(mesh, tmp_path / f"m{suffix}")
    assert sidecar_path(path).exists()
    loaded = load_mesh(path)
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert np.array_equal(loaded.triangles, mesh.triangles)
    assert loaded.mesh_id == mesh.mesh_id and loaded.root_id == mesh.root_id
    again = export_mesh(loaded, tmp_path / f"n{suffix}")
    assert again.read_bytes() == path.read_bytes()
    assert sidecar_path(again).read_bytes() == sidecar_path(path).read_bytes()
    assert is_refinement_of(loaded, build_initial("sphere", "icosahedron"))[0]


def test_icosahedron_off_header(tmp_path):
    path = export_mesh(build_initial("sphere", "icosahedron"), tmp_path / "ico.off")
    lines = path.read_text().splitlines()
    assert lines[0] == "OFF" and lines[1] == "12 20 0"
