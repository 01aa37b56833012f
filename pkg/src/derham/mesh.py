"""Simplicial meshes in 2D/3D with canonical orientation and patch extraction.

Every simplex is stored as a strictly increasing tuple of global vertex
indices; all tangents, normals and incidence signs are functions of those
indices alone, so shared degrees of freedom evaluate identically from any
incident cell.

Three patch notions are provided: the star of a simplex, the union of the
vertex stars of its vertices (the "h" patch), and layer-extended patches
grown by closure contact.
"""

from __future__ import annotations

import math
from itertools import combinations, permutations

import numpy as np

from .poly import SimplexGeometry


class MeshError(ValueError):
    """Invalid mesh data or degenerate geometry."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""


class OrientationFrame:
    """Canonical unit frames attached to mesh simplices.

    Edges carry the tangent from the lower- to the higher-indexed vertex.
    In 2D each edge also carries the normal obtained by rotating the tangent
    by -90 degrees; in 3D each face carries the normal of the ascending
    vertex order together with two orthonormal in-plane tangents.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        verts = mesh.vertices
        edges = mesh.simplices[1]
        t = verts[edges[:, 1]] - verts[edges[:, 0]]
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        self.edge_tangent = t
        if mesh.dim == 2:
            self.edge_normal = np.column_stack([t[:, 1], -t[:, 0]])
        else:
            faces = mesh.simplices[2]
            e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
            e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
            n = np.cross(e1, e2)
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            t1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
            t2 = np.cross(n, t1)
            self.face_normal = n
            self.face_t1 = t1
            self.face_t2 = t2
            # two orthonormal normals per edge, completing (t, n1, n2)
            n1 = np.zeros_like(t)
            for i, ti in enumerate(t):
                a = np.zeros(3)
                a[np.argmin(np.abs(ti))] = 1.0
                v = np.cross(ti, a)
                n1[i] = v / np.linalg.norm(v)
            self.edge_n1 = n1
            self.edge_n2 = np.cross(t, n1)


class SimplicialMesh:
    """Immutable simplicial complex with full incidence tables."""

    def __init__(self, dim, vertices, cells):
        vertices = np.asarray(vertices, dtype=float)
        cells = np.asarray(cells, dtype=int)
        if dim not in (2, 3):
            raise MeshError("dim must be 2 or 3")
        if vertices.shape[1] != dim or cells.shape[1] != dim + 1:
            raise MeshError("vertex/cell array shapes do not match dim")
        self.dim = dim
        self.vertices = vertices
        cells = np.sort(cells, axis=1)
        if np.any(np.diff(cells, axis=1) <= 0):
            raise MeshError("cells contain repeated vertices")

        # simplex tables for every dimension, ids by lexicographic order
        self.simplices: dict[int, np.ndarray] = {dim: cells}
        self.index: dict[int, dict[tuple, int]] = {}
        for d in range(dim - 1, -1, -1):
            subs = set()
            for cell in map(tuple, cells):
                subs.update(combinations(cell, d + 1))
            arr = np.array(sorted(subs), dtype=int)
            self.simplices[d] = arr
        cells_sorted = np.array(sorted(map(tuple, cells)), dtype=int)
        self.simplices[dim] = cells_sorted
        for d in range(dim + 1):
            self.index[d] = {tuple(s): i for i, s in enumerate(self.simplices[d])}

        # cell -> subsimplex ids; subsimplex -> top-cell ids
        self.cell_subs: dict[int, np.ndarray] = {}
        ncells = len(cells_sorted)
        for d in range(dim):
            nsub = math.comb(dim + 1, d + 1)
            table = np.empty((ncells, nsub), dtype=int)
            for c, cell in enumerate(map(tuple, cells_sorted)):
                for j, sub in enumerate(combinations(cell, d + 1)):
                    table[c, j] = self.index[d][sub]
            self.cell_subs[d] = table
        self.cell_subs[dim] = np.arange(ncells)[:, None]

        self.star: dict[int, list] = {}
        for d in range(dim + 1):
            lists = [[] for _ in range(len(self.simplices[d]))]
            for c in range(ncells):
                for s in self.cell_subs[d][c]:
                    lists[s].append(c)
            self.star[d] = [np.array(v, dtype=int) for v in lists]

        # geometry: signed orientation of the ascending vertex order
        geo = self.vertices[cells_sorted]
        mat = geo[:, 1:, :] - geo[:, :1, :]
        det = np.linalg.det(mat)
        if np.any(det == 0.0):
            raise MeshError("degenerate (zero volume) cell")
        self.cell_sign = np.sign(det).astype(int)
        self.cell_volume = np.abs(det) / math.factorial(dim)

        nfacet_cof = np.array([len(self.star[dim - 1][i]) for i in range(len(self.simplices[dim - 1]))])
        if np.any(nfacet_cof > 2) or np.any(nfacet_cof < 1):
            raise MeshError("non-manifold facet incidence")
        bnd = {d: np.zeros(len(self.simplices[d]), dtype=bool) for d in range(dim + 1)}
        bnd[dim - 1] = nfacet_cof == 1
        for fid in np.nonzero(bnd[dim - 1])[0]:
            fverts = tuple(self.simplices[dim - 1][fid])
            for d in range(dim - 1):
                for sub in combinations(fverts, d + 1):
                    bnd[d][self.index[d][sub]] = True
        self.boundary = bnd

        self.frames = OrientationFrame(self)
        self._geom_cache: dict[tuple, SimplexGeometry] = {}

    # -- queries -----------------------------------------------------------

    def n_simplices(self, d):
        return len(self.simplices[d])

    def simplex_id(self, vertex_tuple):
        vertex_tuple = tuple(sorted(vertex_tuple))
        d = len(vertex_tuple) - 1
        try:
            return self.index[d][vertex_tuple]
        except KeyError:
            raise MeshError(f"unknown simplex {vertex_tuple}") from None

    def all_simplices(self):
        """All (dim, id) pairs in deterministic order."""
        return [(d, i) for d in range(self.dim + 1) for i in range(self.n_simplices(d))]

    def geometry(self, d, sid) -> SimplexGeometry:
        key = (d, sid)
        g = self._geom_cache.get(key)
        if g is None:
            g = SimplexGeometry(self.vertices[self.simplices[d][sid]])
            self._geom_cache[key] = g
        return g

    def cell_geometry(self, c) -> SimplexGeometry:
        return self.geometry(self.dim, c)

    def subsimplex_positions(self, d_sub, sid_sub, cell):
        """Positions of a subsimplex's vertices within a cell's sorted tuple."""
        cell_verts = list(self.simplices[self.dim][cell])
        return tuple(cell_verts.index(v) for v in self.simplices[d_sub][sid_sub])

    def boundary_sign(self, cell, facet_pos):
        """Sign making the canonical facet normal outward: s_cell * (-1)^pos."""
        return int(self.cell_sign[cell]) * (-1) ** facet_pos

    @staticmethod
    def stokes_sign(pos):
        """Simplicial boundary sign of the subsimplex omitting vertex `pos`."""
        return (-1) ** pos

    def domain_volume(self):
        return float(self.cell_volume.sum())

    # -- patches -------------------------------------------------------------

    def star_patch(self, d, sid) -> "Patch":
        if not 0 <= sid < self.n_simplices(d):
            raise MeshError(f"unknown simplex ({d}, {sid})")
        cells = self.star[d][sid]
        return Patch(self, (d, sid), "star", tuple(int(c) for c in cells))

    def h_patch(self, d, sid) -> "Patch":
        if not 0 <= sid < self.n_simplices(d):
            raise MeshError(f"unknown simplex ({d}, {sid})")
        cells = set()
        for v in self.simplices[d][sid]:
            cells.update(int(c) for c in self.star[0][v])
        return Patch(self, (d, sid), "h", tuple(sorted(cells)))

    def extended_patch(self, d, sid, layers) -> "Patch":
        if layers < 0:
            raise MeshError("layer count must be >= 0")
        patch = self.star_patch(d, sid)
        cells = set(patch.cells)
        for _ in range(layers):
            verts = set()
            for c in cells:
                verts.update(self.simplices[self.dim][c])
            grown = set(cells)
            for v in verts:
                grown.update(int(c) for c in self.star[0][v])
            if grown == cells:
                break
            cells = grown
        return Patch(self, (d, sid), f"layer{layers}", tuple(sorted(cells)))

    # -- refinement -----------------------------------------------------------

    def refined(self) -> "SimplicialMesh":
        """Red refinement: 4 children per triangle, 8 per tetrahedron."""
        coords = list(self.vertices)
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                coords.append(0.5 * (self.vertices[a] + self.vertices[b]))
                midpoint[key] = len(coords) - 1
            return midpoint[key]

        new_cells = []
        for cell in self.simplices[self.dim]:
            if self.dim == 2:
                a, b, c = cell
                ab, bc, ac = mid(a, b), mid(b, c), mid(a, c)
                new_cells += [(a, ab, ac), (ab, b, bc), (ac, bc, c), (ab, bc, ac)]
            else:
                v = list(cell)
                m = {(i, j): mid(v[i], v[j]) for i in range(4) for j in range(i + 1, 4)}
                new_cells += [
                    (v[0], m[(0, 1)], m[(0, 2)], m[(0, 3)]),
                    (v[1], m[(0, 1)], m[(1, 2)], m[(1, 3)]),
                    (v[2], m[(0, 2)], m[(1, 2)], m[(2, 3)]),
                    (v[3], m[(0, 3)], m[(1, 3)], m[(2, 3)]),
                    (m[(0, 1)], m[(0, 2)], m[(0, 3)], m[(1, 3)]),
                    (m[(0, 1)], m[(0, 2)], m[(1, 2)], m[(1, 3)]),
                    (m[(0, 2)], m[(0, 3)], m[(1, 3)], m[(2, 3)]),
                    (m[(0, 2)], m[(1, 2)], m[(1, 3)], m[(2, 3)]),
                ]
        return SimplicialMesh(self.dim, np.array(coords), np.array(new_cells))

    def scaled(self, factor) -> "SimplicialMesh":
        return SimplicialMesh(self.dim, self.vertices * factor, self.simplices[self.dim])


class Patch:
    """A set of top-dimensional cells around an owner simplex."""

    def __init__(self, mesh, owner, kind, cells):
        self.mesh = mesh
        self.owner = owner
        self.kind = kind
        self.cells = tuple(sorted(cells))
        self._closure = None
        self._submesh = None

    def __len__(self):
        return len(self.cells)

    @property
    def key(self):
        return self.cells

    def closure_simplices(self, d):
        """Global ids of all d-simplices of the patch cells (sorted)."""
        if self._closure is None:
            self._closure = {}
            for dd in range(self.mesh.dim + 1):
                ids = set()
                for c in self.cells:
                    ids.update(int(s) for s in self.mesh.cell_subs[dd][c])
                self._closure[dd] = tuple(sorted(ids))
        return self._closure[d]

    def contains_simplex(self, d, sid):
        return sid in set(self.closure_simplices(d))

    def boundary_facets(self):
        """Facets of the patch with exactly one incident patch cell."""
        cells = set(self.cells)
        out = []
        for fid in self.closure_simplices(self.mesh.dim - 1):
            inside = [c for c in self.mesh.star[self.mesh.dim - 1][fid] if int(c) in cells]
            if len(inside) == 1:
                out.append(fid)
        return tuple(out)

    def boundary_simplices(self, d):
        """d-simplices lying on the patch boundary (subsets of boundary facets)."""
        dim = self.mesh.dim
        if d == dim - 1:
            return self.boundary_facets()
        marked = set()
        for fid in self.boundary_facets():
            fverts = tuple(self.mesh.simplices[dim - 1][fid])
            for sub in combinations(fverts, d + 1):
                marked.add(self.mesh.index[d][sub])
        return tuple(sorted(marked))

    def cell_index(self):
        return {c: i for i, c in enumerate(self.cells)}

    def submesh(self):
        """Induced sub-mesh with vertex/cell maps to the parent."""
        if self._submesh is None:
            vids = sorted({int(v) for c in self.cells for v in self.mesh.simplices[self.mesh.dim][c]})
            vmap = {g: l for l, g in enumerate(vids)}
            cells = np.array(
                [[vmap[int(v)] for v in self.mesh.simplices[self.mesh.dim][c]] for c in self.cells]
            )
            sub = SimplicialMesh(self.mesh.dim, self.mesh.vertices[vids], cells)
            self._submesh = (sub, np.array(vids), np.array(self.cells))
        return self._submesh


# -- constructors -------------------------------------------------------------


def structured_mesh(dim: int, n: int) -> SimplicialMesh:
    """Uniform triangulation of the unit square / cube with n cells per axis."""
    if n < 1:
        raise MeshError("n must be >= 1")
    if dim == 2:
        xs = np.linspace(0.0, 1.0, n + 1)
        verts = np.array([[x, y] for y in xs for x in xs])
        idx = lambda i, j: i + (n + 1) * j
        cells = []
        for j in range(n):
            for i in range(n):
                a, b = idx(i, j), idx(i + 1, j)
                c, d = idx(i, j + 1), idx(i + 1, j + 1)
                cells += [(a, b, d), (a, d, c)]
        return SimplicialMesh(2, verts, np.array(cells))
    if dim == 3:
        xs = np.linspace(0.0, 1.0, n + 1)
        verts = np.array([[x, y, z] for z in xs for y in xs for x in xs])
        idx = lambda i, j, k: i + (n + 1) * (j + (n + 1) * k)
        axes = np.eye(3, dtype=int)
        cells = []
        for k in range(n):
            for j in range(n):
                for i in range(n):
                    base = np.array([i, j, k])
                    for perm in permutations(range(3)):
                        path = [base]
                        for p in perm:
                            path.append(path[-1] + axes[p])
                        cells.append(tuple(idx(*q) for q in path))
        return SimplicialMesh(3, verts, np.array(cells))
    raise MeshError("dim must be 2 or 3")


def shape_regularity(mesh: SimplicialMesh) -> float:
    """Max over cells of circumradius over inradius."""
    worst = 0.0
    for c in range(mesh.n_simplices(mesh.dim)):
        g = mesh.cell_geometry(c)
        v = g.vertices
        A = 2.0 * (v[1:] - v[0])
        rhs = (v[1:] ** 2).sum(axis=1) - (v[0] ** 2).sum()
        try:
            center = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            raise MeshError(f"degenerate cell {c}") from None
        R = np.linalg.norm(center - v[0])
        facet_area = 0.0
        for pos in range(mesh.dim + 1):
            fverts = np.delete(v, pos, axis=0)
            facet_area += SimplexGeometry(fverts).measure
        r = mesh.dim * g.measure / facet_area
        if r <= 0:
            raise MeshError(f"degenerate cell {c}")
        worst = max(worst, R / r)
    return worst


# -- ASCII mesh file ----------------------------------------------------------


def write_mesh(mesh: SimplicialMesh, path):
    with open(path, "w") as fh:
        nv = len(mesh.vertices)
        nc = mesh.n_simplices(mesh.dim)
        fh.write(f"{mesh.dim} {nv} {nc}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        for cell in mesh.simplices[mesh.dim]:
            fh.write(" ".join(str(int(i)) for i in cell) + "\n")


def read_mesh(path) -> SimplicialMesh:
    try:
        with open(path) as fh:
            tokens = fh.read().split()
    except OSError as exc:
        raise MeshFormatError(str(exc)) from None
    try:
        dim, nv, nc = int(tokens[0]), int(tokens[1]), int(tokens[2])
        need = 3 + nv * dim + nc * (dim + 1)
        if len(tokens) != need:
            raise MeshFormatError(f"expected {need} tokens, found {len(tokens)}")
        head = 3
        verts = np.array(tokens[head : head + nv * dim], dtype=float).reshape(nv, dim)
        head += nv * dim
        cells = np.array(tokens[head:], dtype=int).reshape(nc, dim + 1)
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"malformed mesh file: {exc}") from None
    return SimplicialMesh(dim, verts, cells)
