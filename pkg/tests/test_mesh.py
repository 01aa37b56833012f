import numpy as np
import pytest

from derham.mesh import (
    MeshError,
    MeshFormatError,
    SimplicialMesh,
    read_mesh,
    shape_regularity,
    structured_mesh,
    write_mesh,
)


def test_structured_2d_counts():
    m1 = structured_mesh(2, 1)
    assert len(m1.vertices) == 4
    assert m1.n_simplices(1) == 5
    assert m1.n_simplices(2) == 2

    m2 = structured_mesh(2, 2)
    # brute-force oracle for the 2x2 diagonal split
    cells = {tuple(c) for c in m2.simplices[2]}
    edges = set()
    for c in cells:
        edges.update({(c[0], c[1]), (c[0], c[2]), (c[1], c[2])})
    assert len(m2.vertices) == 9
    assert m2.n_simplices(1) == len(edges) == 16
    assert m2.n_simplices(2) == len(cells) == 8


def test_structured_3d_counts():
    m = structured_mesh(3, 1)
    assert len(m.vertices) == 8
    assert m.n_simplices(3) == 6
    assert m.domain_volume() == pytest.approx(1.0, rel=1e-14)


def test_volume_partition():
    for dim, n in [(2, 3), (3, 2)]:
        m = structured_mesh(dim, n)
        assert m.domain_volume() == pytest.approx(1.0, rel=1e-13)


def test_incidence_symmetry():
    m = structured_mesh(2, 2)
    for d in range(3):
        for sid in range(m.n_simplices(d)):
            for c in m.star[d][sid]:
                assert sid in m.cell_subs[d][c]
    for c in range(m.n_simplices(2)):
        for d in range(2):
            for sid in m.cell_subs[d][c]:
                assert c in m.star[d][sid]


def test_every_subface_stored():
    m = structured_mesh(3, 1)
    from itertools import combinations

    for d in range(1, 4):
        for s in m.simplices[d]:
            for sub in combinations(tuple(s), d):
                assert tuple(sub) in m.index[d - 1]


def test_star_patch_center_vertex():
    m = structured_mesh(2, 2)
    center = m.simplex_id((4,))
    # independent incidence enumeration
    expect = {c for c in range(m.n_simplices(2)) if 4 in m.simplices[2][c]}
    patch = m.star_patch(0, center)
    assert set(patch.cells) == expect
    assert len(patch) == 6


def test_star_patch_of_triangle_is_itself():
    m = structured_mesh(2, 2)
    for c in range(m.n_simplices(2)):
        assert m.star_patch(2, c).cells == (c,)


def test_star_patch_corner_vertex_on_diagonal():
    m = structured_mesh(2, 1)
    # vertex 0 = (0,0) lies on the split diagonal 0-3
    assert len(m.star_patch(0, m.simplex_id((0,)))) == 2
    assert len(m.star_patch(0, m.simplex_id((1,)))) == 1


def test_extended_patch_layers():
    m = structured_mesh(2, 2)
    center = m.simplex_id((4,))
    p0 = m.extended_patch(0, center, 0)
    assert p0.cells == m.star_patch(0, center).cells
    p1 = m.extended_patch(0, center, 1)
    assert len(p1) == 8
    # monotone and stabilizing
    prev = None
    for layers in range(5):
        p = m.extended_patch(0, center, layers)
        if prev is not None:
            assert set(prev) <= set(p.cells)
        prev = p.cells
    assert set(prev) == set(range(8))


def test_h_patch_vertex_equals_star():
    m = structured_mesh(2, 2)
    for v in range(m.n_simplices(0)):
        assert m.h_patch(0, v).cells == m.star_patch(0, v).cells


def test_h_patch_edge_union_of_endpoint_stars():
    m = structured_mesh(2, 2)
    for e in range(m.n_simplices(1)):
        a, b = m.simplices[1][e]
        expect = set(m.star_patch(0, a).cells) | set(m.star_patch(0, b).cells)
        assert set(m.h_patch(1, e).cells) == expect


@pytest.mark.parametrize("dim,n", [(2, 3), (3, 1)])
def test_patch_sandwich_inclusions(dim, n):
    m = structured_mesh(dim, n)
    for d in range(dim + 1):
        for sid in range(m.n_simplices(d)):
            star = set(m.star_patch(d, sid).cells)
            h = set(m.h_patch(d, sid).cells)
            ext1 = set(m.extended_patch(d, sid, 1).cells)
            assert star <= h <= ext1
            for layers in range(3):
                a = set(m.extended_patch(d, sid, layers).cells)
                b = set(m.extended_patch(d, sid, layers + 1).cells)
                assert a <= b


def test_unknown_simplex_errors():
    m = structured_mesh(2, 1)
    with pytest.raises(MeshError):
        m.simplex_id((0, 55))
    with pytest.raises(MeshError):
        m.star_patch(1, 99)


def test_shape_regularity_uniform_and_equilateral():
    vals = [shape_regularity(structured_mesh(2, n)) for n in (1, 2, 3)]
    assert vals[0] == pytest.approx(vals[1], rel=1e-12)
    assert vals[1] == pytest.approx(vals[2], rel=1e-12)

    tri = SimplicialMesh(
        2, np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]]), np.array([[0, 1, 2]])
    )
    # circumradius a/sqrt(3), inradius a/(2 sqrt(3)): ratio exactly 2
    assert shape_regularity(tri) == pytest.approx(2.0, rel=1e-13)

    m = structured_mesh(2, 2)
    assert shape_regularity(m.refined()) == pytest.approx(shape_regularity(m), rel=1e-12)


def test_refine_counts_and_volume():
    m = structured_mesh(2, 1)
    r = m.refined()
    assert r.n_simplices(2) == 8
    r2 = structured_mesh(2, 2).refined()
    assert len(r2.vertices) == 25  # Euler oracle: refined 2x2 grid = 4x4 grid
    assert r2.domain_volume() == pytest.approx(1.0, abs=1e-14)

    t = structured_mesh(3, 1)
    rt = t.refined()
    assert rt.n_simplices(3) == 48
    assert rt.domain_volume() == pytest.approx(1.0, abs=1e-14)


def test_boundary_flags():
    m = structured_mesh(2, 2)
    nb_edges = int(m.boundary[1].sum())
    assert nb_edges == 8
    assert int(m.boundary[0].sum()) == 8  # all but the center vertex
    m3 = structured_mesh(3, 1)
    assert int(m3.boundary[0].sum()) == 8


def test_frames_normalized_and_convention():
    m = structured_mesh(2, 2)
    t = m.frames.edge_tangent
    n = m.frames.edge_normal
    assert np.allclose(np.linalg.norm(t, axis=1), 1.0)
    assert np.allclose(n, np.column_stack([t[:, 1], -t[:, 0]]))

    m3 = structured_mesh(3, 1)
    f = m3.frames
    assert np.allclose(np.linalg.norm(f.face_normal, axis=1), 1.0)
    assert np.allclose(np.einsum("ij,ij->i", f.face_t1, f.face_t2), 0.0, atol=1e-14)
    assert np.allclose(np.cross(f.face_t1, f.face_t2), f.face_normal, atol=1e-14)
    assert np.allclose(np.einsum("ij,ij->i", f.edge_n1, f.edge_n2), 0.0, atol=1e-14)


def test_mesh_file_roundtrip(tmp_path):
    m = structured_mesh(2, 2)
    path = tmp_path / "m.mesh"
    write_mesh(m, path)
    back = read_mesh(path)
    assert np.array_equal(back.simplices[2], m.simplices[2])
    assert np.allclose(back.vertices, m.vertices)


def test_mesh_file_malformed(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("2 4 2\n0 0\n1 0\n")
    with pytest.raises(MeshFormatError):
        read_mesh(path)
    path.write_text("2 1 1\nx y\n0 1 2\n")
    with pytest.raises(MeshFormatError):
        read_mesh(path)


def test_boundary_sign_outward():
    m = structured_mesh(2, 1)
    for c in range(m.n_simplices(2)):
        g = m.cell_geometry(c)
        centroid = g.vertices.mean(axis=0)
        cverts = m.simplices[2][c]
        for pos in range(3):
            keep = [q for q in range(3) if q != pos]
            a, b = g.vertices[keep]
            eid = m.simplex_id((cverts[keep[0]], cverts[keep[1]]))
            n = m.frames.edge_normal[eid] * m.boundary_sign(c, pos)
            mid = 0.5 * (a + b)
            assert n @ (mid - centroid) > 0


def test_boundary_sign_outward_3d():
    m = structured_mesh(3, 1)
    for c in range(m.n_simplices(3)):
        g = m.cell_geometry(c)
        centroid = g.vertices.mean(axis=0)
        cverts = m.simplices[3][c]
        for pos in range(4):
            keep = [q for q in range(4) if q != pos]
            fid = m.simplex_id(tuple(cverts[keep]))
            n = m.frames.face_normal[fid] * m.boundary_sign(c, pos)
            mid = g.vertices[keep].mean(axis=0)
            assert n @ (mid - centroid) > 0
