"""Conforming triangulations of the flat approximating surface.

Triangles are stored with their newest vertex first: for ``(a, b, c)`` the
refinement edge is ``(b, c)``. Bisection puts the edge midpoint ``m`` in as the
newest vertex of both children ``(m, a, b)`` and ``(m, c, a)``, which keeps the
counter-clockwise orientation of the parent.

The surface itself never moves: new vertices are plain midpoints of flat edges
and are not projected onto the smooth surface.

Genealogy is carried by a per-triangle ``root`` index into the initial mesh and
a heap ``code`` (1 for a root triangle, ``2 * code + i`` for child ``i``), so the
ancestor of a triangle ``g`` generations up is ``code >> g``.
"""

import hashlib
import json
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DegenerateTriangle, DifferentRoot, UnknownPreset
from .geometry import ImplicitSurface, get_surface

SCHEMA_VERSION = 1
_LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


class SurfaceMesh:
    """Immutable snapshot of an oriented triangulation with bisection history.

    Attributes:
        vertices: (nv, 3) coordinates.
        triangles: (nt, 3) vertex ids, newest vertex first, counter-clockwise
            seen from the outside.
        generation: number of bisections separating each triangle from its root.
        root: index of the initial triangle each triangle descends from.
        code: heap-numbered bisection path below the root.
        parent: index, in the mesh this one was bisected from, of the triangle
            each triangle equals or descends from; -1 on an initial mesh.
        cumulative_marked: number of triangles marked since the initial mesh.
        surface_name: preset string of the surface the mesh approximates.
        root_id: fingerprint shared by every mesh refined from the same root.
    """

    def __init__(self, vertices, triangles, surface_name, generation=None, root=None,
                 code=None, parent=None, cumulative_marked=0, root_id=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        nt = len(self.triangles)
        self.surface_name = surface_name
        self.generation = (np.zeros(nt, np.int64) if generation is None
                           else np.asarray(generation, np.int64))
        self.root = np.arange(nt, dtype=np.int64) if root is None else np.asarray(root, np.int64)
        self.code = np.ones(nt, np.int64) if code is None else np.asarray(code, np.int64)
        self.parent = np.full(nt, -1, np.int64) if parent is None else np.asarray(parent, np.int64)
        self.cumulative_marked = int(cumulative_marked)
        self.root_id = root_id if root_id is not None else self._fingerprint()
        for arr in (self.vertices, self.triangles, self.generation, self.root, self.code,
                    self.parent):
            arr.setflags(write=False)

    def _fingerprint(self):
        h = hashlib.sha1()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]

    def __repr__(self):
        return (f"SurfaceMesh(n_vert={self.n_vert}, n_tri={self.n_tri}, "
                f"n_edges={self.n_edges}, surface={self.surface_name!r})")

    @property
    def n_tri(self):
        return len(self.triangles)

    @property
    def n_vert(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def mesh_id(self):
        h = hashlib.sha1(self.root_id.encode())
        h.update(self.triangles.tobytes())
        h.update(self.code.tobytes())
        return h.hexdigest()[:16]

    @property
    def refinement_edge(self):
        """(nt, 2) vertex pairs of each triangle's refinement edge."""
        return self.triangles[:, 1:]

    @cached_property
    def _edge_data(self):
        local = self.triangles[:, _LOCAL_EDGES]
        lo = local.min(axis=2)
        hi = local.max(axis=2)
        keys = lo * self.n_vert + hi
        uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
        edges = np.stack([uniq // self.n_vert, uniq % self.n_vert], axis=1)
        tri_edges = inverse.reshape(-1, 3)
        signs = np.where(local[:, :, 0] < local[:, :, 1], 1, -1)
        return edges, tri_edges, signs

    @cached_property
    def edges(self):
        """(ne, 2) edges oriented from the lower to the higher vertex id."""
        return self._edge_data[0]

    @cached_property
    def tri_edges(self):
        """(nt, 3) global edge ids; local edge k lies opposite local vertex k."""
        return self._edge_data[1]

    @cached_property
    def edge_signs(self):
        """(nt, 3) +1 where the global edge orientation matches the triangle boundary."""
        return self._edge_data[2]

    @cached_property
    def edge_triangles(self):
        """(ne, 2) triangles on either side of each edge, -1 if missing.

        Returns the first two incidences; ``validate`` reports edges with other
        than two.
        """
        flat = self.tri_edges.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_edges)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        out = np.full((self.n_edges, 2), -1, np.int64)
        tri_of = order // 3
        out[:, 0] = tri_of[start]
        has2 = counts >= 2
        out[has2, 1] = tri_of[start[has2] + 1]
        return out

    @cached_property
    def edge_local(self):
        """(ne, 2) local edge index of each edge within ``edge_triangles``."""
        et = self.edge_triangles
        out = np.full_like(et, -1)
        for side in range(2):
            ok = et[:, side] >= 0
            rows = self.tri_edges[et[ok, side]]
            out[ok, side] = np.argmax(rows == np.nonzero(ok)[0][:, None], axis=1)
        return out

    @cached_property
    def areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def edge_lengths(self):
        """(nt, 3) length of local edge k (opposite local vertex k)."""
        p = self.vertices[self.triangles]
        return np.stack([np.linalg.norm(p[:, (k + 2) % 3] - p[:, (k + 1) % 3], axis=1)
                         for k in range(3)], axis=1)

    @cached_property
    def diameters(self):
        return self.edge_lengths.max(axis=1)

    @cached_property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def validate(self, surface=None):
        """List of violated mesh invariants (empty when the mesh is sound)."""
        problems = []
        counts = np.bincount(self.tri_edges.ravel(), minlength=self.n_edges)
        if np.any(counts != 2):
            problems.append(f"{int(np.sum(counts != 2))} edges not shared by exactly two triangles")
        else:
            et, el = self.edge_triangles, self.edge_local
            s0 = self.edge_signs[et[:, 0], el[:, 0]]
            s1 = self.edge_signs[et[:, 1], el[:, 1]]
            if np.any(s0 + s1 != 0):
                problems.append(f"{int(np.sum(s0 + s1 != 0))} edges with inconsistent orientation")
        if np.any(self.areas <= 0):
            problems.append("degenerate triangles")
        used = np.zeros(self.n_vert, bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            problems.append(f"{int((~used).sum())} unreferenced vertices")
        if surface is not None:
            d = np.abs(surface.signed_distance(self.vertices))
            if np.any(d >= surface.tubular_radius):
                problems.append("vertices outside the tubular neighbourhood")
        return problems

    def euler_characteristic(self):
        return self.n_vert - self.n_edges + self.n_tri


# --------------------------------------------------------------------------
# initial meshes


def _icosahedron():
    t = (1.0 + 5.0**0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return v, f


def _octahedron():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                 dtype=float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return v, f


def _torus_grid(surface_name, n, m):
    s = get_surface(surface_name)
    params = dict(item.split("=") for item in surface_name.partition(":")[2].split(",") if item)
    R = float(params.get("R", 2.0))
    r = float(params.get("r", 0.5))
    if not surface_name.startswith("torus"):
        raise UnknownPreset(f"torus-grid needs a torus surface, got {surface_name!r}")
    th = 2 * np.pi * np.arange(n) / n
    ph = 2 * np.pi * np.arange(m) / m
    T, P = np.meshgrid(th, ph, indexing="ij")
    v = np.stack([(R + r * np.cos(P)) * np.cos(T), (R + r * np.cos(P)) * np.sin(T),
                  r * np.sin(P)], axis=-1).reshape(-1, 3)
    del s
    idx = np.arange(n * m).reshape(n, m)
    faces = []
    for i in range(n):
        for j in range(m):
            a, b = idx[i, j], idx[(i + 1) % n, j]
            c, d = idx[(i + 1) % n, (j + 1) % m], idx[i, (j + 1) % m]
            faces += [[a, b, c], [a, c, d]]
    return v, np.array(faces)


def _orient_outward(vertices, faces, surface):
    p = vertices[faces]
    normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    outward = surface.gradient(p.mean(axis=1))
    flip = np.einsum("ij,ij->i", normal, outward) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _longest_edge_first(vertices, faces):
    """Rotate each face so that the vertex opposite its longest edge comes first.

    Ties go to the candidate with the smallest global vertex id.
    """
    p = vertices[faces]
    lengths = np.stack([np.linalg.norm(p[:, (k + 2) % 3] - p[:, (k + 1) % 3], axis=1)
                        for k in range(3)], axis=1)
    longest = lengths.max(axis=1, keepdims=True)
    candidate = lengths >= longest * (1 - 1e-12)
    ids = np.where(candidate, faces, np.iinfo(np.int64).max)
    k = np.argmin(ids, axis=1)
    rot = (k[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(faces, rot, axis=1)


def build_initial(surface_name, preset):
    """Initial triangulation ``T_0`` of the approximating surface.

    Args:
        surface_name: surface preset string (see ``geometry.get_surface``).
        preset: ``icosahedron``, ``octahedron`` or ``torus-grid:NxM``.

    Raises:
        UnknownPreset: for any other preset.
        DegenerateTriangle: if a face has (numerically) zero area.
    """
    surface = surface_name if isinstance(surface_name, ImplicitSurface) else get_surface(surface_name)
    name = surface.name
    if preset == "icosahedron":
        v, f = _icosahedron()
        v = v * surface.scale if name == "sphere" else v
    elif preset == "octahedron":
        v, f = _octahedron()
        v = v * surface.scale if name == "sphere" else v
    elif preset.startswith("torus-grid:"):
        dims = preset.partition(":")[2].replace("×", "x").split("x")
        try:
            n, m = int(dims[0]), int(dims[1])
        except (ValueError, IndexError):
            raise UnknownPreset(f"malformed torus grid {preset!r}") from None
        if n < 3 or m < 3:
            raise UnknownPreset("torus grid needs at least 3x3 cells")
        v, f = _torus_grid(name, n, m)
    else:
        raise UnknownPreset(f"unknown mesh preset {preset!r}")
    f = _orient_outward(v, f, surface)
    f = _longest_edge_first(v, f)
    mesh = SurfaceMesh(v, f, name)
    if np.any(mesh.areas < 1e-14 * surface.scale**2):
        raise DegenerateTriangle("initial mesh contains a degenerate triangle")
    return mesh


# --------------------------------------------------------------------------
# refinement


def _as_marked(mesh, marked):
    marked = np.unique(np.asarray(marked, dtype=np.int64).ravel())
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_tri):
        raise IndexError("marked triangle id out of range")
    return marked


def closure_edges(mesh, marked):
    """Edges that must be split so that bisecting ``marked`` leaves a conforming mesh.

    Starts from the refinement edges of the marked triangles and adds the
    refinement edge of every triangle touching a split edge until nothing changes.
    """
    te, e2t = mesh.tri_edges, mesh.edge_triangles
    flagged = np.zeros(mesh.n_edges, bool)
    queue = list(np.unique(te[marked, 0]))
    flagged[queue] = True
    while queue:
        e = queue.pop()
        for t in e2t[e]:
            if t < 0:
                continue
            r = te[t, 0]
            if not flagged[r]:
                flagged[r] = True
                queue.append(r)
    return flagged


def bisect(mesh, marked):
    """Bisect the marked triangles and close the result to a conforming mesh.

    Every marked triangle is split at the midpoint of its refinement edge;
    neighbours are split as needed to remove hanging vertices. Returns a new
    mesh (the input is returned unchanged for an empty marked set).
    """
    marked = _as_marked(mesh, marked)
    if marked.size == 0:
        return mesh
    flagged = closure_edges(mesh, marked)
    split = {tuple(e) for e in mesh.edges[flagged].tolist()}

    nv = mesh.n_vert
    new_points = []
    midpoint = {}
    V = mesh.vertices
    tris, gens, roots, codes, parents = [], [], [], [], []
    budget = 10 * mesh.n_tri
    steps = 0
    te0 = mesh.tri_edges[:, 0]
    for t, (a, b, c) in enumerate(mesh.triangles.tolist()):
        g0, r0, c0 = int(mesh.generation[t]), int(mesh.root[t]), int(mesh.code[t])
        if not flagged[te0[t]]:
            tris.append((a, b, c))
            gens.append(g0)
            roots.append(r0)
            codes.append(c0)
            parents.append(t)
            continue
        work = [(a, b, c, g0, c0)]
        while work:
            a, b, c, g, cd = work.pop()
            key = (b, c) if b < c else (c, b)
            if key in split:
                steps += 1
                m = midpoint.get(key)
                if m is None:
                    m = nv + len(new_points)
                    midpoint[key] = m
                    new_points.append(0.5 * (V[key[0]] + V[key[1]]))
                work.append((m, c, a, g + 1, 2 * cd + 1))
                work.append((m, a, b, g + 1, 2 * cd))
            else:
                tris.append((a, b, c))
                gens.append(g)
                roots.append(r0)
                codes.append(cd)
                parents.append(t)
    if steps > budget:
        raise RuntimeError("bisection closure exceeded its step budget")

    gens = np.array(gens, np.int64)
    roots = np.array(roots, np.int64)
    codes = np.array(codes, np.int64)
    order = np.lexsort((codes, roots, gens))
    vertices = np.vstack([V, np.array(new_points)]) if new_points else V
    return SurfaceMesh(
        vertices,
        np.array(tris, np.int64)[order],
        mesh.surface_name,
        generation=gens[order],
        root=roots[order],
        code=codes[order],
        parent=np.array(parents, np.int64)[order],
        cumulative_marked=mesh.cumulative_marked + marked.size,
        root_id=mesh.root_id,
    )


def uniform_refine(mesh, times=1):
    """Bisect every triangle twice per pass (4x the triangles on compatible meshes)."""
    for _ in range(times):
        target = mesh.generation + 2
        while True:
            todo = np.nonzero(mesh.generation < target)[0]
            if todo.size == 0:
                break
            fine = bisect(mesh, todo)
            target = target[fine.parent]
            mesh = fine
    return mesh


def shape_regularity(mesh):
    """Smallest inradius-to-diameter ratio over all triangles."""
    perimeter = mesh.edge_lengths.sum(axis=1)
    inradius = 2.0 * mesh.areas / perimeter
    return float(np.min(inradius / mesh.diameters))


def element_diameter(mesh, t):
    return float(mesh.diameters[t])


def _genealogy_keys(root, code):
    return (code << np.int64(12)) | root


def is_refinement_of(fine, coarse):
    """Whether every triangle of ``fine`` descends from a triangle of ``coarse``.

    Returns:
        (nested, ancestor) where ``ancestor[t]`` is the index in ``coarse`` of the
        ancestor of fine triangle ``t`` (-1 if there is none).

    Raises:
        DifferentRoot: meshes from different initial triangulations.
    """
    if fine.root_id != coarse.root_id:
        raise DifferentRoot("meshes do not share an initial triangulation")
    if max(fine.generation.max(initial=0), coarse.generation.max(initial=0)) > 50:
        raise OverflowError("genealogy codes support at most 50 generations")
    if max(fine.root.max(initial=0), coarse.root.max(initial=0)) >= 4096:
        raise OverflowError("genealogy keys support at most 4096 root triangles")
    ckeys = _genealogy_keys(coarse.root, coarse.code)
    order = np.argsort(ckeys)
    sorted_keys = ckeys[order]
    ancestor = np.full(fine.n_tri, -1, np.int64)
    code = fine.code.copy()
    todo = np.arange(fine.n_tri)
    while todo.size:
        keys = _genealogy_keys(fine.root[todo], code[todo])
        pos = np.searchsorted(sorted_keys, keys)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        hit = sorted_keys[pos] == keys
        ancestor[todo[hit]] = order[pos[hit]]
        todo = todo[~hit]
        code[todo] >>= 1
        todo = todo[code[todo] > 0]
    return bool(np.all(ancestor >= 0)), ancestor


# --------------------------------------------------------------------------
# import / export


def _meta(mesh):
    return {
        "schema_version": SCHEMA_VERSION,
        "surface": mesh.surface_name,
        "root_id": mesh.root_id,
        "cumulative_marked": mesh.cumulative_marked,
        "refinement_edge": "local vertices 1-2 (vertex 0 is the newest vertex)",
        "generation": mesh.generation.tolist(),
        "root": mesh.root.tolist(),
        "code": mesh.code.tolist(),
        "parent": mesh.parent.tolist(),
    }


def _fmt(x):
    return format(float(x), ".17g")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def export_mesh(mesh, path):
    """Write ``mesh`` as OFF or OBJ (by suffix) plus a ``.meta.json`` sidecar."""
    path = Path(path)
    fmt = path.suffix.lower()
    lines = []
    if fmt == ".off":
        lines.append("OFF")
        lines.append(f"{mesh.n_vert} {mesh.n_tri} 0")
        lines += [" ".join(map(_fmt, v)) for v in mesh.vertices]
        lines += ["3 " + " ".join(map(str, t)) for t in mesh.triangles.tolist()]
    elif fmt == ".obj":
        lines += ["v " + " ".join(map(_fmt, v)) for v in mesh.vertices]
        lines += ["f " + " ".join(str(i + 1) for i in t) for t in mesh.triangles.tolist()]
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")
    path.write_text("\n".join(lines) + "\n")
    sidecar_path(path).write_text(json.dumps(_meta(mesh), indent=1) + "\n")
    return path


def load_mesh(path):
    """Read a mesh written by ``export_mesh``; the sidecar is optional."""
    path = Path(path)
    words = [line.split() for line in path.read_text().splitlines() if line.strip()
             and not line.startswith("#")]
    if path.suffix.lower() == ".off":
        if words[0][0] != "OFF":
            raise ValueError("missing OFF header")
        nv, nt = int(words[1][0]), int(words[1][1])
        vertices = np.array([[float(x) for x in w[:3]] for w in words[2:2 + nv]])
        triangles = np.array([[int(x) for x in w[1:4]] for w in words[2 + nv:2 + nv + nt]])
    elif path.suffix.lower() == ".obj":
        vertices = np.array([[float(x) for x in w[1:4]] for w in words if w[0] == "v"])
        triangles = np.array([[int(x.split("/")[0]) - 1 for x in w[1:4]]
                              for w in words if w[0] == "f"])
    else:
        raise ValueError(f"unsupported mesh format {path.suffix!r}")
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        return SurfaceMesh(vertices, triangles, "sphere")
    meta = json.loads(meta_path.read_text())
    return SurfaceMesh(vertices, triangles, meta["surface"], generation=meta["generation"],
                       root=meta["root"], code=meta["code"], parent=meta["parent"],
                       cumulative_marked=meta["cumulative_marked"], root_id=meta["root_id"])
