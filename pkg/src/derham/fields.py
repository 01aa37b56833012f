"""Input fields for smoothers and projections.

A field is evaluated cellwise at barycentric points, which is all the
operators ever need (weighted patch integrals and moment right-hand sides).
Analytic inputs carry their differential as a second field supplied by the
caller; finite element inputs differentiate exactly through the complex.
Trailing batch axes are supported throughout, so a family of inputs is
projected at the cost of one assembly sweep.
"""

from __future__ import annotations

import numpy as np

from .elements import FeSpace, diff_matrix
from .poly import multi_indices


class FieldError(ValueError):
    pass


class Field:
    """Cellwise evaluable input with optional analytic differential."""

    arity = 1
    batch = ()

    def eval_cell(self, cell, bary_pts):
        raise NotImplementedError

    def differential(self) -> "Field":
        raise FieldError("field has no differential attached")


class AnalyticField(Field):
    """Field given by a closure of physical coordinates.

    fn maps an (N, dim) point array to (N,) or (N, arity) values (trailing
    batch axes allowed); d_fn, if given, is the analytic differential for the
    slot the field feeds (curl/grad for slot 0, div/curl for slot 1, ...).
    """

    def __init__(self, mesh, fn, arity=1, d_fn=None, d_arity=None, batch=()):
        self.mesh = mesh
        self.fn = fn
        self.arity = arity
        self.d_fn = d_fn
        self.d_arity = d_arity
        self.batch = tuple(batch)

    def eval_cell(self, cell, bary_pts):
        geom = self.mesh.cell_geometry(cell)
        return np.asarray(self.fn(geom.physical_points(bary_pts)), dtype=float)

    def differential(self):
        if self.d_fn is None:
            raise FieldError("no analytic differential supplied")
        return AnalyticField(self.mesh, self.d_fn, self.d_arity, batch=self.batch)


class FEField(Field):
    """A finite element function, evaluated from its cell polynomials."""

    def __init__(self, space: FeSpace, coeffs, next_space: FeSpace | None = None, dmat=None):
        coeffs = np.asarray(coeffs, dtype=float)
        self.space = space
        self.coeffs = coeffs
        self.arity = space.arity
        self.batch = coeffs.shape[1:]
        self._next_space = next_space
        self._dmat = dmat

    def eval_cell(self, cell, bary_pts):
        return self.space.cell_poly(cell, self.coeffs).eval(bary_pts)

    def differential(self):
        if self._next_space is None:
            raise FieldError("no next-slot space attached")
        dmat = self._dmat
        if dmat is None:
            dmat = diff_matrix(self.space, self._next_space)
        return FEField(self._next_space, np.tensordot(dmat, self.coeffs, axes=(1, 0)))


class CartesianPoly:
    """Global polynomial in the physical coordinates, used as test input.

    coeffs has shape (nmono, *vshape) over the monomial exponents of
    multi_indices(space_dim, degree); vshape is () for scalars, (arity,)
    for vectors, with optional trailing batch axes.
    """

    def __init__(self, dim, degree, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[0] != len(multi_indices(dim, degree)):
            raise FieldError("coefficient length mismatch")
        self.dim = dim
        self.degree = degree
        self.coeffs = coeffs

    @staticmethod
    def zero(dim, degree, vshape=()):
        return CartesianPoly(dim, degree, np.zeros((len(multi_indices(dim, degree)),) + tuple(vshape)))

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        mi = multi_indices(self.dim, self.degree)
        van = np.ones((x.shape[0], len(mi)))
        for j in range(self.dim):
            pw = np.power.outer(x[:, j], np.arange(self.degree + 1))
            van *= pw[:, mi[:, j]]
        return np.tensordot(van, self.coeffs, axes=(1, 0))

    def partial(self, axis):
        deg = max(self.degree - 1, 0)
        out = CartesianPoly.zero(self.dim, deg, self.coeffs.shape[1:])
        mi = multi_indices(self.dim, self.degree)
        look = {tuple(a): i for i, a in enumerate(multi_indices(self.dim, deg))}
        for idx, a in enumerate(mi):
            if a[axis] == 0:
                continue
            b = list(a)
            b[axis] -= 1
            out.coeffs[look[tuple(b)]] += a[axis] * self.coeffs[idx]
        return out

    def component(self, c):
        return CartesianPoly(self.dim, self.degree, self.coeffs[:, c])

    def slot_differential(self, slot):
        """The de Rham differential feeding slot+1: 2D curl/div, 3D grad/curl/div."""
        deg = max(self.degree - 1, 0)
        if self.dim == 2:
            if slot == 0:
                out = CartesianPoly.zero(2, deg, (2,) + self.coeffs.shape[1:])
                out.coeffs[:, 0] = self.partial(1).coeffs
                out.coeffs[:, 1] = -self.partial(0).coeffs
                return out
            if slot == 1:
                return CartesianPoly(
                    2, deg, self.component(0).partial(0).coeffs + self.component(1).partial(1).coeffs
                )
        else:
            if slot == 0:
                out = CartesianPoly.zero(3, deg, (3,) + self.coeffs.shape[1:])
                for a in range(3):
                    out.coeffs[:, a] = self.partial(a).coeffs
                return out
            if slot == 1:
                out = CartesianPoly.zero(3, deg, (3,) + self.coeffs.shape[2:])
                pairs = [(1, 2), (2, 0), (0, 1)]
                for a, (i, j) in enumerate(pairs):
                    out.coeffs[:, a] = (
                        self.component(j).partial(i).coeffs - self.component(i).partial(j).coeffs
                    )
                return out
            if slot == 2:
                acc = self.component(0).partial(0).coeffs
                for a in (1, 2):
                    acc = acc + self.component(a).partial(a).coeffs
                return CartesianPoly(3, deg, acc)
        raise FieldError("no differential for the final slot")


class PolyField(Field):
    """A CartesianPoly wrapped as an input field for a given slot."""

    def __init__(self, mesh, poly: CartesianPoly, slot):
        self.mesh = mesh
        self.poly = poly
        self.slot = slot
        nslots = mesh.dim
        arity_table = {2: (1, 2, 1), 3: (1, 3, 3, 1)}[mesh.dim]
        self.arity = arity_table[slot]
        vdims = 1 if self.arity == 1 else 2
        self.batch = poly.coeffs.shape[vdims:]

    def eval_cell(self, cell, bary_pts):
        geom = self.mesh.cell_geometry(cell)
        return self.poly.eval(geom.physical_points(bary_pts))

    def differential(self):
        return PolyField(self.mesh, self.poly.slot_differential(self.slot), self.slot + 1)


def cartesian_to_bary(poly: CartesianPoly, geom):
    """Rewrite a global polynomial in a cell's barycentric coordinates."""
    from .poly import BaryPoly

    dim = geom.dim
    coords = []
    for axis in range(poly.dim):
        lin = BaryPoly.zero(dim, 1)
        for i in range(dim + 1):
            lin = lin + float(geom.vertices[i, axis]) * BaryPoly.coordinate(dim, i).raised(1)
        coords.append(lin)
    mi = multi_indices(poly.dim, poly.degree)
    out = BaryPoly.zero(dim, poly.degree, poly.coeffs.shape[1:])
    for idx, alpha in enumerate(mi):
        c = poly.coeffs[idx]
        if not np.any(c):
            continue
        term = BaryPoly.constant(dim, 1.0)
        for axis, e in enumerate(alpha):
            for _ in range(e):
                term = term * coords[axis]
        term = term.raised(poly.degree)
        out.coeffs += term.coeffs.reshape(
            term.coeffs.shape[:1] + (1,) * (out.coeffs.ndim - 1)
        ) * c
    return out


def random_poly_field(mesh, slot, degree, rng, batch=()):
    """Random polynomial input of total degree <= degree for the given slot."""
    arity = {2: (1, 2, 1), 3: (1, 3, 3, 1)}[mesh.dim][slot]
    n = len(multi_indices(mesh.dim, degree))
    vshape = (() if arity == 1 else (arity,)) + tuple(batch)
    coeffs = rng.standard_normal((n,) + vshape)
    return PolyField(mesh, CartesianPoly(mesh.dim, degree, coeffs), slot)


def fd_consistency(field: Field, op, rng, npoints=10, step=1e-6, tol=1e-5):
    """Finite-difference spot check that field.differential matches the field.

    op names the expected differential: curl2d | div2d | grad | curl3d | div3d.
    Samples interior points on random cells and compares the analytic
    differential with central differences; raises above tol, else returns
    the maximum relative error seen.
    """
    mesh = field.mesh
    dfield = field.differential()
    dim = mesh.dim
    worst = 0.0
    for _ in range(npoints):
        c = int(rng.integers(mesh.n_simplices(dim)))
        geom = mesh.cell_geometry(c)
        bc = rng.dirichlet(np.ones(dim + 1) * 4.0)
        x0 = geom.physical_points(bc[None, :])[0]

        # vertices + affine constraint recover barycentric coordinates
        A = np.vstack([geom.vertices.T, np.ones(dim + 1)])

        def value(pt):
            bar = np.linalg.lstsq(A, np.concatenate([pt, [1.0]]), rcond=None)[0]
            return np.asarray(field.eval_cell(c, bar[None, :]))[0]

        part = []
        for a in range(dim):
            e = np.zeros(dim)
            e[a] = step
            part.append((value(x0 + e) - value(x0 - e)) / (2 * step))
        got = np.asarray(dfield.eval_cell(c, bc[None, :]))[0]
        if op == "curl2d":
            want = np.stack([part[1], -part[0]])
        elif op == "div2d":
            want = part[0][0] + part[1][1]
        elif op == "grad":
            want = np.stack(part)
        elif op == "curl3d":
            want = np.stack(
                [part[1][2] - part[2][1], part[2][0] - part[0][2], part[0][1] - part[1][0]]
            )
        elif op == "div3d":
            want = part[0][0] + part[1][1] + part[2][2]
        else:
            raise FieldError(f"unknown differential name {op!r}")
        scale = max(np.abs(np.asarray(want)).max(), 1.0)
        worst = max(worst, float(np.abs(got - want).max() / scale))
    if worst > tol:
        raise FieldError(f"differential inconsistent with field: fd error {worst}")
    return worst
