import numpy as np
import pytest

from derham.elements import FeSpace, diff_matrix
from derham.fields import FEField, random_poly_field
from derham.harmonic import PatchComplex, apply_Q, solve_R
from derham.mesh import structured_mesh


def make_complex(mesh, family, k, cells, bump=0):
    spaces = [FeSpace(mesh, family, k, s) for s in range(mesh.dim + 1)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(mesh.dim)]
    return PatchComplex(mesh, cells, spaces, dmats, quad_bump=bump), spaces, dmats


@pytest.fixture(scope="module")
def lrt2_setup():
    mesh = structured_mesh(2, 2)
    spaces = [FeSpace(mesh, "lrt", 2, s) for s in range(3)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(2)]
    return mesh, spaces, dmats


def patch_complex(setup, patch, bump=0):
    mesh, spaces, dmats = setup
    return PatchComplex(mesh, patch.cells, spaces, dmats, quad_bump=bump)


def test_r0_is_patch_mean(lrt2_setup):
    mesh, spaces, dmats = lrt2_setup
    pc = patch_complex(lrt2_setup, mesh.h_patch(0, 4))
    rng = np.random.default_rng(0)
    u = random_poly_field(mesh, 0, 2, rng)
    mean = pc.R_field(0, u)
    # quadrature oracle over the patch
    import math

    from derham.poly import simplex_quadrature

    acc = 0.0
    for c in pc.cells:
        rule = simplex_quadrature(2, 8)
        geom = mesh.cell_geometry(c)
        acc += geom.measure * 2 * (rule.weights @ u.eval_cell(c, rule.points))
    assert mean == pytest.approx(acc / pc.volume, rel=1e-12)


def test_r1_of_gradient_recovers_mean_free_part(lrt2_setup):
    # for xi = curl v with v in the FE space, R^1 xi = v - mean(v)
    mesh, spaces, dmats = lrt2_setup
    pc = patch_complex(lrt2_setup, mesh.extended_patch(0, 4, 1))
    rng = np.random.default_rng(1)
    v = rng.standard_normal(pc.ndofs(0))
    xi = np.tensordot(pc.dloc[0], v, axes=(1, 0))
    got = pc.solve_R(1, pc.moments_fe(1, xi)).coeffs
    want = v - pc.one_coeffs() * (pc.mean_vector() @ v / pc.volume)
    assert np.abs(got - want).max() < 1e-9 * max(1.0, np.abs(want).max())


def test_r_solve_residuals_batched(lrt2_setup):
    mesh, spaces, dmats = lrt2_setup
    pc = patch_complex(lrt2_setup, mesh.h_patch(1, 7), bump=2)
    rng = np.random.default_rng(2)
    xi = random_poly_field(mesh, 1, 2, rng, batch=(3,))
    res = pc.solve_R(1, pc.moments_analytic(1, xi))
    assert res.equation_residual < 1e-10
    assert res.constraint_residual < 1e-11


def test_top_lift_divergence(lrt2_setup):
    # div(R^2 p) = p for p = div(w) with FE w (2D top slot)
    mesh, spaces, dmats = lrt2_setup
    pc = patch_complex(lrt2_setup, mesh.extended_patch(2, 3, 1))
    rng = np.random.default_rng(3)
    w = rng.standard_normal(pc.ndofs(1))
    p = np.tensordot(pc.dloc[1], w, axes=(1, 0))
    lifted = pc.solve_R(2, pc.moments_fe(2, p)).coeffs
    dp = np.tensordot(pc.dloc[1], lifted, axes=(1, 0))
    assert np.abs(dp - p).max() < 1e-9 * max(1.0, np.abs(p).max())


@pytest.mark.parametrize("family,k", [("lrt", 1), ("lrt", 2), ("hs", 3)])
def test_q_idempotent_all_slots_2d(family, k):
    mesh = structured_mesh(2, 2)
    spaces = [FeSpace(mesh, family, k, s) for s in range(3)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(2)]
    rng = np.random.default_rng(4)
    for patch in [mesh.h_patch(0, 4), mesh.star_patch(1, 7), mesh.extended_patch(2, 0, 1)]:
        pc = PatchComplex(mesh, patch.cells, spaces, dmats)
        for s in range(3):
            c = rng.standard_normal((pc.ndofs(s), 2))
            out = pc.Q_fe(s, c)
            err = np.abs(out - c).max() / max(1.0, np.abs(c).max())
            assert err < 1e-10, (family, k, s, patch.kind, err)


def test_q_idempotent_whitney3d():
    mesh = structured_mesh(3, 1)
    spaces = [FeSpace(mesh, "whitney3d", 1, s) for s in range(4)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(3)]
    rng = np.random.default_rng(5)
    pc = PatchComplex(mesh, mesh.h_patch(0, 0).cells, spaces, dmats)
    for s in range(4):
        c = rng.standard_normal(pc.ndofs(s))
        out = pc.Q_fe(s, c)
        assert np.abs(out - c).max() < 1e-10 * max(1.0, np.abs(c).max())


def test_q1_on_analytic_3d_close_to_fe():
    # Q^1 of an in-space field given analytically reproduces it
    mesh = structured_mesh(3, 1)
    spaces = [FeSpace(mesh, "whitney3d", 1, s) for s in range(4)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(3)]
    pc = PatchComplex(mesh, mesh.h_patch(0, 0).cells, spaces, dmats, quad_bump=2)
    rng = np.random.default_rng(6)
    coeffs = rng.standard_normal(spaces[1].ndofs)
    xi = FEField(spaces[1], coeffs, next_space=spaces[2], dmat=dmats[1])
    got = pc.Q_field(1, xi)
    want = pc.restrict(1, coeffs)
    assert np.abs(got - want).max() < 1e-9 * max(1.0, np.abs(want).max())


def test_orthogonality_invariant(lrt2_setup):
    mesh, spaces, dmats = lrt2_setup
    rng = np.random.default_rng(7)
    for patch in [mesh.h_patch(1, 3), mesh.extended_patch(1, 3, 2)]:
        pc = patch_complex(lrt2_setup, patch, bump=2)
        p = random_poly_field(mesh, 2, 1, rng)
        out = pc.solve_R(2, pc.moments_analytic(2, p))
        assert out.constraint_residual < 1e-11


@pytest.mark.parametrize("family,k", [("lrt", 1), ("lrt", 2), ("lbdm", 2), ("hs", 3), ("afn", 5)])
def test_local_exactness_sample_patches(family, k):
    mesh = structured_mesh(2, 2)
    spaces = [FeSpace(mesh, family, k, s) for s in range(3)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(2)]
    for patch in [mesh.h_patch(0, 4), mesh.h_patch(1, 0), mesh.extended_patch(2, 5, 1)]:
        pc = PatchComplex(mesh, patch.cells, spaces, dmats)
        rep = pc.exactness()
        assert rep["exact"], (family, k, patch.kind, rep)


def test_euler_identity_global_lrt1():
    mesh = structured_mesh(2, 2)
    spaces = [FeSpace(mesh, "lrt", 1, s) for s in range(3)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(2)]
    pc = PatchComplex(mesh, range(8), spaces, dmats)
    rep = pc.exactness()
    assert rep["dims"] == [9, 16, 8]
    assert rep["euler"] == 1 and rep["exact"]


def test_operator_norms_finite(lrt2_setup):
    mesh, spaces, dmats = lrt2_setup
    pc = patch_complex(lrt2_setup, mesh.h_patch(0, 4))
    for k in (1, 2):
        nr = pc.operator_norm_R(k)
        assert np.isfinite(nr) and nr > 0
    for k in (0, 1, 2):
        nq = pc.operator_norm_Q(k)
        assert np.isfinite(nq) and nq >= 1.0 - 1e-9  # projections have norm >= 1


def test_public_wrappers(lrt2_setup):
    mesh, spaces, dmats = lrt2_setup
    pc = patch_complex(lrt2_setup, mesh.h_patch(0, 4), bump=2)
    rng = np.random.default_rng(8)
    u = random_poly_field(mesh, 0, 2, rng)
    out = apply_Q(pc, 0, u)
    # constants reproduced: Q^0(c) = c
    const = random_poly_field(mesh, 0, 0, rng)
    const.poly.coeffs[:] = 0.0
    const.poly.coeffs[0] = 3.5
    got = apply_Q(pc, 0, const)
    want = 3.5 * pc.one_coeffs()
    assert np.abs(got - want).max() < 1e-11
    lifted = solve_R(pc, 1, u.differential())
    assert lifted.shape[0] == pc.ndofs(0)
