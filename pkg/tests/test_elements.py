import numpy as np
import pytest

from derham.elements import (
    ElementError,
    FeSpace,
    bubble_complex_check,
    build_reference,
    check_span_condition,
    check_unisolvency,
    diff_matrix,
    edge_bubble_basis,
    eval_L,
    eval_L_field,
    face_bubble_basis,
    n_poly,
    unit_simplex_mesh,
)
from derham.mesh import structured_mesh
from derham.poly import BaryPoly, restrict_to_subsimplex, simplex_quadrature

ALL_2D = [("lrt", 1), ("lrt", 2), ("lrt", 3), ("lbdm", 2), ("lbdm", 3), ("hs", 3), ("hs", 4), ("afn", 5)]


def test_reference_p1_triangle():
    sp = build_reference("lrt", 1, 0)
    rep = check_unisolvency(sp)
    assert rep["invertible"]
    assert rep["ndofs"] == 3
    # in the hat basis the DOF matrix is the identity (condition 1)
    hats = [BaryPoly.coordinate(2, i) for i in range(3)]
    M = np.array(
        [[sp.dofs[g].apply_poly(sp.mesh, 0, h) for h in hats] for g in sp.cell_dofs[0]]
    )
    assert np.allclose(M, np.eye(3), atol=1e-14)
    assert np.linalg.cond(M) == pytest.approx(1.0, rel=1e-12)


def test_reference_rt0():
    sp = build_reference("lrt", 1, 1)
    assert sp.ndofs == 3
    assert check_unisolvency(sp)["invertible"]


def test_reference_hermite_counts():
    sp = build_reference("hs", 3, 0)
    assert sp.ndofs == 10 == n_poly(2, 3)
    kinds = [d.kind for d in sp.dofs]
    assert kinds.count("point-eval") == 3
    assert kinds.count("point-derivative") == 6
    assert kinds.count("cell-moment") == 1


def test_reference_argyris_unisolvent():
    sp = build_reference("afn", 5, 0)
    assert sp.ndofs == 21 == n_poly(2, 5)
    assert check_unisolvency(sp)["invertible"]


def test_duplicated_dof_mutant_rejected():
    sp = build_reference("afn", 5, 0)
    rep = check_unisolvency(sp, inject_duplicate=True)
    assert not rep["invertible"]


@pytest.mark.parametrize("family,k", ALL_2D)
@pytest.mark.parametrize("slot", [0, 1, 2])
def test_unisolvency_all_2d(family, k, slot):
    sp = build_reference(family, k, slot)
    rep = check_unisolvency(sp)
    assert rep["invertible"], (family, k, slot, rep)


@pytest.mark.parametrize("slot", [0, 1, 2, 3])
def test_unisolvency_whitney(slot):
    sp = build_reference("whitney3d", 1, slot)
    assert check_unisolvency(sp)["invertible"]


def test_degree_bounds():
    with pytest.raises(ElementError):
        build_reference("afn", 4, 0)
    with pytest.raises(ElementError):
        build_reference("hs", 2, 0)
    with pytest.raises(ElementError):
        build_reference("whitney3d", 2, 1)


def test_global_dims_small_meshes():
    m1 = structured_mesh(2, 1)
    assert FeSpace(m1, "lrt", 1, 0).ndofs == 4
    assert FeSpace(m1, "lrt", 1, 1).ndofs == 5
    m2 = structured_mesh(2, 2)
    assert FeSpace(m2, "lbdm", 2, 2).ndofs == 8  # piecewise P0, 8 cells


@pytest.mark.parametrize("family,k", ALL_2D)
def test_duality_on_random_cells(family, k):
    rng = np.random.default_rng(hash((family, k)) % 2**32)
    verts = np.array([[0.0, 0.0], [1.1, 0.1], [0.3, 0.9]]) + 0.05 * rng.standard_normal((3, 2))
    from derham.mesh import SimplicialMesh

    mesh = SimplicialMesh(2, verts, np.array([[0, 1, 2]]))
    for slot in range(3):
        sp = FeSpace(mesh, family, k, slot)
        basis = sp.shape_polys(0)
        M = np.array(
            [[sp.dofs[g].apply_poly(mesh, 0, p) for p in basis] for g in sp.cell_dofs[0]]
        )
        err = np.abs(M @ sp.nodal_matrix(0) - np.eye(len(basis))).max()
        assert err < 1e-9, (family, k, slot, err)


@pytest.mark.parametrize("family,k", [("lrt", 2), ("hs", 3), ("afn", 5)])
def test_conformity_traces(family, k):
    mesh = structured_mesh(2, 2)
    rng = np.random.default_rng(7)

    sp0 = FeSpace(mesh, family, k, 0)
    u = rng.standard_normal(sp0.ndofs)
    sp1 = FeSpace(mesh, family, k, 1)
    v = rng.standard_normal(sp1.ndofs)

    for eid in range(mesh.n_simplices(1)):
        cof = [int(c) for c in mesh.star[1][eid]]
        if len(cof) != 2:
            continue
        a, b = cof
        pos_a = mesh.subsimplex_positions(1, eid, a)
        pos_b = mesh.subsimplex_positions(1, eid, b)
        ta = restrict_to_subsimplex(sp0.cell_poly(a, u), pos_a)
        tb = restrict_to_subsimplex(sp0.cell_poly(b, u), pos_b)
        assert (ta - tb).max_abs() < 1e-11 * max(1.0, ta.max_abs())

        n = mesh.frames.edge_normal[eid]
        pa = sp1.cell_poly(a, v)
        pb = sp1.cell_poly(b, v)
        na = restrict_to_subsimplex(BaryPoly(2, pa.degree, pa.coeffs @ n), pos_a)
        nb = restrict_to_subsimplex(BaryPoly(2, pb.degree, pb.coeffs @ n), pos_b)
        assert (na - nb).max_abs() < 1e-11 * max(1.0, na.max_abs())


def test_conformity_whitney_tangential():
    mesh = structured_mesh(3, 1)
    sp = FeSpace(mesh, "whitney3d", 1, 1)
    rng = np.random.default_rng(3)
    xi = rng.standard_normal(sp.ndofs)
    rule = simplex_quadrature(2, 3)
    for fid in range(mesh.n_simplices(2)):
        cof = [int(c) for c in mesh.star[2][fid]]
        if len(cof) != 2:
            continue
        t1 = mesh.frames.face_t1[fid]
        t2 = mesh.frames.face_t2[fid]
        vals = []
        for c in cof:
            pos = mesh.subsimplex_positions(2, fid, c)
            pts = np.zeros((len(rule), 4))
            for j, pj in enumerate(pos):
                pts[:, pj] = rule.points[:, j]
            v = sp.cell_poly(c, xi).eval(pts)
            vals.append(np.stack([v @ t1, v @ t2], axis=1))
        assert np.abs(vals[0] - vals[1]).max() < 1e-11


@pytest.mark.parametrize("family,k", ALL_2D)
def test_partition_of_unity_slot0(family, k):
    mesh = structured_mesh(2, 2)
    sp = FeSpace(mesh, family, k, 0)
    coeffs = np.zeros(sp.ndofs)
    for v in range(mesh.n_simplices(0)):
        coeffs[sp.distinguished_id[(0, v)]] = 1.0
    rule = simplex_quadrature(2, 4)
    for c in range(mesh.n_simplices(2)):
        vals = sp.cell_poly(c, coeffs).eval(rule.points)
        assert np.abs(vals - 1.0).max() < 1e-10


@pytest.mark.parametrize("family,k", ALL_2D)
def test_eval_L_constant_vanishes(family, k):
    mesh = structured_mesh(2, 1)
    sp = FeSpace(mesh, family, k, 0)
    one = BaryPoly.constant(2, 1.0)
    cells = set(range(mesh.n_simplices(2)))
    for d in range(3):
        for sid in range(mesh.n_simplices(d)):
            out = eval_L_field(sp, (d, sid), lambda c: one, cells)
            assert np.abs(out).max() < 1e-12


def test_eval_L_gathers_coefficients():
    mesh = structured_mesh(2, 1)
    sp = FeSpace(mesh, "lrt", 2, 0)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(sp.ndofs)
    total = np.zeros_like(u)
    for d in range(3):
        for sid in range(mesh.n_simplices(d)):
            total += eval_L(sp, (d, sid), u)
    for v in range(mesh.n_simplices(0)):
        gid = sp.distinguished_id[(0, v)]
        total[gid] += u[gid]
    assert np.allclose(total, u, atol=1e-14)


def test_eval_L_disjoint_support_zero():
    # L_sigma of a basis function attached far from sigma is zero
    mesh = structured_mesh(2, 2)
    sp = FeSpace(mesh, "lrt", 2, 0)
    u = np.zeros(sp.ndofs)
    u[sp.distinguished_id[(0, 0)]] = 1.0  # hat at corner vertex 0
    far_vertex = mesh.simplex_id((8,))
    out = eval_L(sp, (0, far_vertex), u)
    assert np.abs(out).max() == 0.0


@pytest.mark.parametrize(
    "family,k",
    [("lrt", 1), ("lrt", 2), ("lbdm", 2), ("hs", 3), ("hs", 4), ("afn", 5)],
)
def test_span_condition_2d(family, k):
    mesh = structured_mesh(2, 1)
    spaces = [FeSpace(mesh, family, k, s) for s in range(3)]
    for s in range(2):
        rep = check_span_condition(spaces[s], spaces[s + 1])
        assert rep["max_residual"] < 1e-11, (family, k, s, rep["max_residual"])


def test_span_condition_whitney_pm_one():
    mesh = structured_mesh(3, 1)
    sp0 = FeSpace(mesh, "whitney3d", 1, 0)
    sp1 = FeSpace(mesh, "whitney3d", 1, 1)
    D = diff_matrix(sp0, sp1)
    for v in range(mesh.n_simplices(0)):
        col = D[:, sp0.distinguished_id[(0, v)]]
        for e in range(mesh.n_simplices(1)):
            gid = sp1.distinguished_id[(1, e)]
            a, b = mesh.simplices[1][e]
            if v == a:
                assert col[gid] == pytest.approx(-1.0, abs=1e-12)
            elif v == b:
                assert col[gid] == pytest.approx(1.0, abs=1e-12)
            else:
                assert abs(col[gid]) < 1e-12


def test_span_condition_mutant_detected():
    # contaminating a vertex basis function with an edge-moment one must
    # break the span check (its curl picks up non-distinguished DOFs)
    mesh = structured_mesh(2, 1)
    sp0 = FeSpace(mesh, "lrt", 2, 0)
    sp1 = FeSpace(mesh, "lrt", 2, 1)
    polys = list(sp0.nodal_polys(0))
    vertex_local = int(np.nonzero(sp0.distinguished_mask[sp0.cell_dofs[0]])[0][0])
    edge_local = int(np.nonzero(~sp0.distinguished_mask[sp0.cell_dofs[0]])[0][0])
    polys[vertex_local] = polys[vertex_local] + 0.3 * polys[edge_local]
    sp0._poly_cache[0] = polys
    rep = check_span_condition(sp0, sp1)
    assert rep["max_residual"] > 1e-6


def test_diff_matrix_composition_zero():
    mesh = structured_mesh(2, 2)
    spaces = [FeSpace(mesh, "lrt", 2, s) for s in range(3)]
    D0 = diff_matrix(spaces[0], spaces[1])
    D1 = diff_matrix(spaces[1], spaces[2])
    assert np.abs(D1 @ D0).max() < 1e-10


def test_bubble_bases_vanish_on_boundary():
    for b in edge_bubble_basis(2, 1):
        ends = b.eval(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert np.abs(ends).max() < 1e-14
    for b in face_bubble_basis(1, 2):
        for pos in [(0, 1), (0, 2), (1, 2)]:
            assert restrict_to_subsimplex(b, pos).max_abs() < 1e-14


def test_afn_face_bubble_exactness_k5():
    rep = bubble_complex_check("afn-face", 5)
    assert rep["exact"]
    assert rep["dims"]["src"] == 0
    assert rep["dims"]["dst"] == 6
    assert rep["identity"]["holds"]
    assert rep["identity"]["(k-2)(k-3)"] == 6 == rep["identity"]["2 dim P_{k-4}"]


def test_afn_face_bubble_exactness_k6():
    rep = bubble_complex_check("afn-face", 6)
    assert rep["exact"] and rep["identity"]["holds"]
    assert rep["identity"]["(k-2)(k-3)"] == 12


@pytest.mark.parametrize("k,expected", [(9, 3), (10, 8)])
def test_neilan_face_bubble(k, expected):
    rep = bubble_complex_check("neilan-face", k)
    assert rep["identity"]["dim_bdm_bubble"] == expected == rep["identity"]["(k-6)(k-8)"]
    assert rep["exact"]


def test_hs_edge_bubble_trivial_k3():
    rep = bubble_complex_check("hs-edge", 3)
    assert rep["exact"]
    assert rep["dims"] == (0, 0)


@pytest.mark.parametrize(
    "desc,k", [("lrt-edge", 2), ("lbdm-edge", 3), ("hs-edge", 4), ("afn-edge", 5), ("afn-edge", 6), ("lbdm-face", 2), ("lbdm-face", 3), ("hs-face", 3), ("hs-face", 4)]
)
def test_bubble_complexes_exact(desc, k):
    rep = bubble_complex_check(desc, k)
    assert rep["exact"], (desc, k, rep)


def test_basis_support_in_star():
    mesh = structured_mesh(2, 2)
    sp = FeSpace(mesh, "lrt", 2, 0)
    for (d, sid), (off, cnt) in sp.blocks.items():
        star = set(int(c) for c in mesh.star[d][sid])
        for gid in range(off, off + cnt):
            unit = np.zeros(sp.ndofs)
            unit[gid] = 1.0
            for c in range(mesh.n_simplices(2)):
                if c in star:
                    continue
                assert sp.cell_poly(c, unit).max_abs() == 0.0
