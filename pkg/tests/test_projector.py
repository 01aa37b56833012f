import numpy as np
import pytest

from derham.fields import (
    AnalyticField,
    CartesianPoly,
    PolyField,
    cartesian_to_bary,
    fd_consistency,
    random_poly_field,
)
from derham.mesh import structured_mesh
from derham.projector import CommutingProjector


@pytest.fixture(scope="module")
def lrt1_n2():
    return CommutingProjector(structured_mesh(2, 2), "lrt", 1)


@pytest.fixture(scope="module")
def lrt2_n1():
    return CommutingProjector(structured_mesh(2, 1), "lrt", 2)


@pytest.fixture(scope="module")
def whit_n1():
    return CommutingProjector(structured_mesh(3, 1), "whitney3d", 1)


def constant_field(mesh, slot, values):
    arity = {2: (1, 2, 1), 3: (1, 3, 3, 1)}[mesh.dim][slot]
    deg = 0
    vals = np.asarray(values, dtype=float)
    coeffs = vals[None] if arity > 1 else np.array([float(values)])
    return PolyField(mesh, CartesianPoly(mesh.dim, deg, coeffs), slot)


def test_pi0_constant(lrt1_n2):
    P = lrt1_n2
    u = constant_field(P.mesh, 0, 2.75)
    out = P.project0(u)
    sp = P.spaces[0]
    assert np.abs(out[sp.distinguished_mask] - 2.75).max() < 1e-12
    if (~sp.distinguished_mask).any():
        assert np.abs(out[~sp.distinguished_mask]).max() < 1e-12


@pytest.mark.parametrize("slot", [0, 1, 2])
def test_projection_property_lrt1(lrt1_n2, slot):
    P = lrt1_n2
    rng = np.random.default_rng(10 + slot)
    coeffs = rng.standard_normal((P.spaces[slot].ndofs, 5))
    assert P.projection_defect(slot, coeffs) < 1e-9


@pytest.mark.parametrize("slot", [0, 1, 2])
def test_projection_property_lrt2(lrt2_n1, slot):
    P = lrt2_n1
    rng = np.random.default_rng(20 + slot)
    coeffs = rng.standard_normal((P.spaces[slot].ndofs, 3))
    assert P.projection_defect(slot, coeffs) < 1e-9


@pytest.mark.parametrize("slot", [0, 1, 2, 3])
def test_projection_property_whitney(whit_n1, slot):
    P = whit_n1
    rng = np.random.default_rng(30 + slot)
    coeffs = rng.standard_normal((P.spaces[slot].ndofs, 3))
    assert P.projection_defect(slot, coeffs) < 1e-9


def test_pi0_reproduces_x_squared_lrt2(lrt2_n1):
    # x^2 lies in the slot-0 space, so the projection equals its interpolant
    P = lrt2_n1
    c = CartesianPoly.zero(2, 2)
    c.coeffs[4] = 1.0  # exponents (2, 0) in graded-lex order: check below
    from derham.poly import multi_indices

    idx = [tuple(a) for a in multi_indices(2, 2)].index((2, 0))
    c.coeffs[:] = 0.0
    c.coeffs[idx] = 1.0
    u = PolyField(P.mesh, c, 0)
    got = P.project0(u)
    want = P.spaces[0].interpolate(
        lambda cell: cartesian_to_bary(c, P.mesh.cell_geometry(cell))
    )
    assert np.abs(got - want).max() < 1e-10 * max(1.0, np.abs(want).max())


def test_commutation_2d_poly(lrt2_n1):
    P = lrt2_n1
    rng = np.random.default_rng(3)
    u = random_poly_field(P.mesh, 0, 3, rng, batch=(3,))
    assert P.commutation_residual(0, u) < 1e-9
    v = random_poly_field(P.mesh, 1, 3, rng, batch=(3,))
    assert P.commutation_residual(1, v) < 1e-9


def test_commutation_3d_poly(whit_n1):
    P = whit_n1
    rng = np.random.default_rng(4)
    for slot in range(3):
        s = random_poly_field(P.mesh, slot, 2, rng, batch=(2,))
        assert P.commutation_residual(slot, s) < 1e-9, slot


def test_commutation_fe_input(lrt1_n2):
    # FE inputs: both sides equal d of the reproduced input
    P = lrt1_n2
    rng = np.random.default_rng(5)
    from derham.fields import FEField

    coeffs = rng.standard_normal(P.spaces[0].ndofs)
    f = FEField(P.spaces[0], coeffs, next_space=P.spaces[1], dmat=P.dmats[0])
    assert P.commutation_residual(0, f) < 1e-10


def test_pi1_q_and_r_forms_agree(lrt2_n1):
    P = lrt2_n1
    rng = np.random.default_rng(6)
    xi = random_poly_field(P.mesh, 1, 2, rng)
    a = P.project1(xi, use_q_form=False)
    b = P.project1(xi, use_q_form=True)
    sp = P.spaces[1]
    assert sp.l2_norm(a - b) < 1e-9 * max(1.0, float(sp.l2_norm(a)))


def test_whitney_pi1_constant_edge_integrals(whit_n1):
    P = whit_n1
    mesh = P.mesh
    vec = np.array([0.3, -1.2, 0.7])
    xi = constant_field(mesh, 1, vec)
    out = P.project1(xi)
    sp = P.spaces[1]
    for e in range(mesh.n_simplices(1)):
        a, b = mesh.simplices[1][e]
        edge = mesh.vertices[b] - mesh.vertices[a]
        want = float(edge @ vec)  # tangent times length
        gid = sp.distinguished_id[(1, e)]
        assert out[gid] == pytest.approx(want, abs=1e-10)


def test_pi2_constant_2d(lrt1_n2):
    P = lrt1_n2
    p = constant_field(P.mesh, 2, 1.0)
    out = P.project2(p)
    sp = P.spaces[2]
    total = 0.0
    for c in range(P.mesh.n_simplices(2)):
        total += out[sp.distinguished_id[(2, c)]]
    assert total == pytest.approx(1.0, rel=1e-11)  # integral over the unit square
    # and the function is identically one
    pts = np.full((1, 3), 1.0 / 3.0)
    for c in range(P.mesh.n_simplices(2)):
        assert sp.cell_poly(c, out).eval(pts)[0] == pytest.approx(1.0, rel=1e-11)


def test_pi3_constant_3d(whit_n1):
    P = whit_n1
    p = constant_field(P.mesh, 3, 1.0)
    out = P.project3(p)
    sp = P.spaces[3]
    pts = np.full((1, 4), 0.25)
    for c in range(P.mesh.n_simplices(3)):
        assert sp.cell_poly(c, out).eval(pts)[0] == pytest.approx(1.0, rel=1e-10)


def test_nonpolynomial_input_commutation(lrt2_n1):
    # smooth non-polynomial input with a quadrature bump
    mesh = structured_mesh(2, 1)
    P = CommutingProjector(mesh, "lrt", 2, quad_bump=4)

    def fn(x):
        return np.exp(0.5 * x[:, 0]) * np.sin(x[:, 1])

    def dfn(x):
        # rotated gradient of fn
        ux = 0.5 * np.exp(0.5 * x[:, 0]) * np.sin(x[:, 1])
        uy = np.exp(0.5 * x[:, 0]) * np.cos(x[:, 1])
        return np.stack([uy, -ux], axis=1)

    u = AnalyticField(mesh, fn, 1, d_fn=dfn, d_arity=2)
    fd_consistency(u, "curl2d", np.random.default_rng(0))
    assert P.commutation_residual(0, u) < 1e-8


def test_fd_consistency_catches_wrong_differential():
    mesh = structured_mesh(2, 1)
    u = AnalyticField(
        mesh,
        lambda x: x[:, 0] ** 2,
        1,
        d_fn=lambda x: np.stack([x[:, 0], x[:, 1]], axis=1),  # wrong on purpose
        d_arity=2,
    )
    with pytest.raises(Exception):
        fd_consistency(u, "curl2d", np.random.default_rng(1))
