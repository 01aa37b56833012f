"""Reference elements and global finite element spaces.

Implemented families (tag, complex, degree bound):

* ``lrt``       Lagrange / Raviart-Thomas / discontinuous P,  k >= 1 (2D)
* ``lbdm``      Lagrange / Brezzi-Douglas-Marini / disc. P,   k >= 2 (2D)
* ``hs``        Hermite / Stenberg / discontinuous P,         k >= 3 (2D)
* ``afn``       Argyris / Falk-Neilan velocity / vertex-C0 P, k >= 5 (2D)
* ``whitney3d`` lowest-order P1 / Nedelec / Raviart-Thomas / P0 (3D)

Degrees of freedom are simplex-intrinsic: every payload polynomial and frame
vector is built from the attachment simplex's sorted vertex tuple, so a DOF
shared by two cells evaluates identically from either side.  Nodal bases are
obtained per physical cell by inverting the DOF-on-shape-basis matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr as scipy_qr

from .mesh import SimplicialMesh
from .poly import (
    BaryPoly,
    SimplexGeometry,
    curl2d,
    curl3d,
    deriv_cart,
    deriv_dir,
    div2d,
    div3d,
    grad,
    integrate,
    monomial_basis,
    multi_indices,
    n_poly,
    simplex_quadrature,
    vector_basis,
)


class ElementError(ValueError):
    """Configuration or internal consistency error in element construction."""


SLOT_ARITY = {2: (1, 2, 1), 3: (1, 3, 3, 1)}
DIFF_OPS = {2: ("curl2d", "div2d"), 3: ("grad", "curl3d", "div3d")}
_DIFF_FUN = {"curl2d": curl2d, "div2d": div2d, "grad": grad, "curl3d": curl3d, "div3d": div3d}


def slot_diff(dim, slot):
    """Name of d^slot for the given space dimension."""
    return DIFF_OPS[dim][slot]


def apply_diff(dim, slot, p, geom):
    return _DIFF_FUN[DIFF_OPS[dim][slot]](p, geom)


# -- degrees of freedom -------------------------------------------------------


class DofFunctional:
    """A linear functional attached to a mesh simplex.

    kind is one of point-eval, point-derivative, edge-moment, normal-moment,
    tangential-moment, cell-moment, harmonic-inner-product.
    """

    __slots__ = ("simplex", "kind", "distinguished", "payload")

    def __init__(self, simplex, kind, payload, distinguished=False):
        self.simplex = simplex
        self.kind = kind
        self.payload = payload
        self.distinguished = distinguished

    def apply_poly(self, mesh, cell, p):
        """Evaluate on a polynomial given on `cell` (which must contain the simplex)."""
        raise NotImplementedError


class PointValue(DofFunctional):
    __slots__ = ("vertex", "comp")

    def __init__(self, vertex, comp=None, distinguished=False):
        super().__init__((0, vertex), "point-eval", comp, distinguished=distinguished)
        self.vertex = vertex
        self.comp = comp

    def apply_poly(self, mesh, cell, p):
        pos = list(mesh.simplices[mesh.dim][cell]).index(self.vertex)
        pt = np.zeros((1, mesh.dim + 1))
        pt[0, pos] = 1.0
        val = p.eval(pt)[0]
        return val if self.comp is None else val[self.comp]


class PointDerivative(DofFunctional):
    def __init__(self, vertex, axes, comp=None):
        super().__init__((0, vertex), "point-derivative", (axes, comp))
        self.vertex = vertex
        self.axes = axes
        self.comp = comp

    __slots__ = ("vertex", "axes", "comp")

    def apply_poly(self, mesh, cell, p):
        geom = mesh.cell_geometry(cell)
        q = p if self.comp is None else p.component(self.comp)
        for a in self.axes:
            q = deriv_cart(q, geom, a)
        pos = list(mesh.simplices[mesh.dim][cell]).index(self.vertex)
        pt = np.zeros((1, mesh.dim + 1))
        pt[0, pos] = 1.0
        return q.eval(pt)[0]


class Moment(DofFunctional):
    """Integral moment over the attachment simplex.

    op selects the field transform before integration:
      id     scalar trace against a scalar test
      vec    vector field against a vector test (same simplex dimension)
      div    divergence against a scalar test (cell moments)
      curl   2D rotated gradient of a scalar against a vector test
      dot_n / dot_t   normal / tangential component trace
      ddt / ddn       tangential / normal derivative trace of a scalar
    """

    KINDS = {
        "id": "cell-moment",
        "vec": "cell-moment",
        "div": "cell-moment",
        "curl": "cell-moment",
        "dot_n": "normal-moment",
        "dot_t": "tangential-moment",
        "ddt": "edge-moment",
        "ddn": "edge-moment",
    }

    __slots__ = ("op", "test")

    def __init__(self, simplex, op, test, distinguished=False):
        kind = self.KINDS[op]
        if simplex[0] >= 2 and op in ("dot_n",):
            kind = "normal-moment"
        super().__init__(simplex, kind, test, distinguished)
        self.op = op
        self.test = test

    def _transform(self, mesh, cell, p):
        d, sid = self.simplex
        geom = mesh.cell_geometry(cell)
        if self.op == "id":
            return p
        if self.op == "vec":
            return p
        if self.op == "div":
            return div2d(p, geom) if mesh.dim == 2 else div3d(p, geom)
        if self.op == "curl":
            return curl2d(p, geom)
        fr = mesh.frames
        if self.op == "dot_n":
            n = fr.edge_normal[sid] if (mesh.dim == 2) else fr.face_normal[sid]
            out = BaryPoly.zero(p.dim, p.degree)
            out.coeffs = p.coeffs @ n
            return out
        if self.op == "dot_t":
            t = fr.edge_tangent[sid]
            out = BaryPoly.zero(p.dim, p.degree)
            out.coeffs = p.coeffs @ t
            return out
        if self.op == "ddt":
            return deriv_dir(p, geom, fr.edge_tangent[sid])
        if self.op == "ddn":
            return deriv_dir(p, geom, fr.edge_normal[sid])
        raise ElementError(f"unknown moment op {self.op}")

    def apply_poly(self, mesh, cell, p):
        d, sid = self.simplex
        q = self._transform(mesh, cell, p)
        test = self.test
        sgeom = mesh.geometry(d, sid)
        rule = simplex_quadrature(d, q.degree + test.degree)
        if d == mesh.dim:
            pts = rule.points
        else:
            pos = mesh.subsimplex_positions(d, sid, cell)
            pts = np.zeros((len(rule), mesh.dim + 1))
            for j, pj in enumerate(pos):
                pts[:, pj] = rule.points[:, j]
        qv = q.eval(pts)
        tv = test.eval(rule.points)
        integrand = qv * tv if qv.ndim == 1 else np.einsum("na,na->n", qv, tv)
        return sgeom.measure * math.factorial(d) * (rule.weights @ integrand)


class HarmonicMoment(DofFunctional):
    """<<v, b>> = (v, P b) + (div v, div b) with P precomputed on the cell."""

    __slots__ = ("proj_test", "div_test")

    def __init__(self, simplex, proj_test, div_test):
        super().__init__(simplex, "harmonic-inner-product", None)
        self.proj_test = proj_test  # P_W b as a vector polynomial (or None)
        self.div_test = div_test  # div b as a scalar polynomial

    def apply_poly(self, mesh, cell, p):
        geom = mesh.cell_geometry(cell)
        scale = geom.measure * math.factorial(p.dim)
        total = 0.0
        if self.proj_test is not None:
            rule = simplex_quadrature(p.dim, p.degree + self.proj_test.degree)
            prod = np.einsum("na,na->n", p.eval(rule.points), self.proj_test.eval(rule.points))
            total += scale * (rule.weights @ prod)
        dv = div2d(p, geom)
        rule = simplex_quadrature(p.dim, dv.degree + self.div_test.degree)
        total += scale * (rule.weights @ (dv.eval(rule.points) * self.div_test.eval(rule.points)))
        return total


# -- bubble and test function helpers ----------------------------------------


def edge_bubble_basis(power, residual_degree):
    """Basis of (l0 l1)^power P_residual(e); empty if residual_degree < 0."""
    if residual_degree < 0:
        return []
    l0 = BaryPoly.coordinate(1, 0)
    l1 = BaryPoly.coordinate(1, 1)
    bub = BaryPoly.constant(1, 1.0)
    for _ in range(power):
        bub = bub * l0 * l1
    return [bub * BaryPoly.monomial(1, (j,)) for j in range(residual_degree + 1)]


def face_bubble_basis(power, residual_degree):
    """Basis of (l0 l1 l2)^power P_residual(f)."""
    if residual_degree < 0:
        return []
    bub = BaryPoly.constant(2, 1.0)
    for i in range(3):
        c = BaryPoly.coordinate(2, i)
        for _ in range(power):
            bub = bub * c
    return [bub * m for m in monomial_basis(2, residual_degree)]


def pk_mod_constants(dim, degree):
    """Representatives of P_degree / R: the non-constant monomials."""
    if degree < 1:
        return []
    out = []
    for alpha in multi_indices(dim, degree):
        if sum(alpha) >= 1:
            out.append(BaryPoly.monomial(dim, tuple(alpha), degree))
    return out


def edge_ddt(b, edge_geom, tangent):
    return deriv_dir(b, edge_geom, tangent)


def l2_project_basis(targets, basis, geom, tol=1e-12):
    """L2 projections of each target onto span(basis) on the given cell.

    Dense least squares with orthogonal factorization; returns a list of
    polynomials (None entries if basis is empty).
    """
    if not basis:
        return [None for _ in targets]
    deg = max(b.degree for b in basis + targets)
    rule = simplex_quadrature(geom.dim, 2 * deg)
    w = rule.weights
    bv = np.stack([b.raised(deg).eval(rule.points) for b in basis])  # (nb, nq, a)
    gram = np.einsum("ina,jna,n->ij", bv, bv, w)
    out = []
    for t in targets:
        tv = t.raised(deg).eval(rule.points)
        rhs = np.einsum("ina,na,n->i", bv, tv, w)
        coef, *_ = np.linalg.lstsq(gram, rhs, rcond=tol)
        proj = BaryPoly.zero(geom.dim, deg, t.vshape)
        for c, b in zip(coef, basis):
            proj.coeffs += c * b.raised(deg).coeffs
        out.append(proj)
    return out


# -- family definitions --------------------------------------------------------


@dataclass(frozen=True)
class ElementFamily:
    tag: str
    dim: int
    kmin: int
    kmax: int | None
    description: str


FAMILIES = {
    "lrt": ElementFamily("lrt", 2, 1, None, "Lagrange / Raviart-Thomas / discontinuous P"),
    "lbdm": ElementFamily("lbdm", 2, 2, None, "Lagrange / Brezzi-Douglas-Marini / discontinuous P"),
    "hs": ElementFamily("hs", 2, 3, None, "Hermite / Stenberg / discontinuous P"),
    "afn": ElementFamily("afn", 2, 5, None, "Argyris / Falk-Neilan velocity / vertex-continuous pressure"),
    "whitney3d": ElementFamily("whitney3d", 3, 1, 1, "lowest-order P1 / Nedelec / Raviart-Thomas / P0"),
}


def get_family(tag):
    try:
        return FAMILIES[tag]
    except KeyError:
        raise ElementError(f"unknown family {tag!r}") from None


def check_degree(tag, k):
    fam = get_family(tag)
    if k < fam.kmin or (fam.kmax is not None and k > fam.kmax):
        hi = "" if fam.kmax is None else f" and <= {fam.kmax}"
        raise ElementError(f"family {tag!r} requires degree >= {fam.kmin}{hi}, got {k}")
    return fam


def _radial_terms(geom, hom_degree):
    """(x - v0) times each monomial in (l1..ld) homogeneous of degree hom_degree.

    The coordinates l1..ld are linear and centered at v0, so these span the
    radial complement in the Raviart-Thomas shape space.
    """
    dim = geom.dim
    rad = BaryPoly.zero(dim, 1, (geom.space_dim,))
    for i in range(1, dim + 1):
        ci = BaryPoly.coordinate(dim, i).raised(1)
        rad.coeffs += ci.coeffs[:, None] * (geom.vertices[i] - geom.vertices[0])[None, :]
    terms = []
    for expo in _homogeneous_exponents(dim, hom_degree):
        mono = BaryPoly.constant(dim, 1.0)
        for i, e in enumerate(expo, start=1):
            c = BaryPoly.coordinate(dim, i)
            for _ in range(e):
                mono = mono * c
        terms.append(rad * mono)
    return terms


def _homogeneous_exponents(dim, degree):
    """Exponent tuples over (l1..ld) with total exactly `degree`."""
    if dim == 1:
        return [(degree,)]
    out = []
    for lead in range(degree, -1, -1):
        for rest in _homogeneous_exponents(dim - 1, degree - lead):
            out.append((lead,) + rest)
    return out


def shape_basis(tag, k, slot, geom: SimplexGeometry):
    """Shape space basis on a physical cell."""
    fam = get_family(tag)
    dim = fam.dim
    if tag == "whitney3d":
        if slot == 0:
            return monomial_basis(3, 1)
        if slot == 1:  # {a + b x x}
            const = vector_basis(monomial_basis(3, 0), 3)
            rad = _radial_terms(geom, 0)[0]
            cross = []
            for axis in range(3):
                e = np.zeros(3)
                e[axis] = 1.0
                q = BaryPoly.zero(3, 1, (3,))
                # e x (x - v0)
                r = rad
                q.coeffs[:, 0] = e[1] * r.coeffs[:, 2] - e[2] * r.coeffs[:, 1]
                q.coeffs[:, 1] = e[2] * r.coeffs[:, 0] - e[0] * r.coeffs[:, 2]
                q.coeffs[:, 2] = e[0] * r.coeffs[:, 1] - e[1] * r.coeffs[:, 0]
                cross.append(q)
            return const + cross
        if slot == 2:  # {a + c x}
            return vector_basis(monomial_basis(3, 0), 3) + _radial_terms(geom, 0)
        if slot == 3:
            return monomial_basis(3, 0)
        raise ElementError("whitney3d has slots 0..3")
    # 2D families
    if slot == 0:
        return monomial_basis(2, k)
    if slot == 1:
        if tag == "lrt":
            return vector_basis(monomial_basis(2, k - 1), 2) + _radial_terms(geom, k - 1)
        return vector_basis(monomial_basis(2, k - 1), 2)
    if slot == 2:
        deg = k - 1 if tag == "lrt" else k - 2
        return monomial_basis(2, deg)
    raise ElementError("2D families have slots 0..2")


def simplex_dofs(space, d, sid):
    """DOF block the family attaches to simplex (d, sid), in canonical order."""
    tag, k, slot, mesh = space.family, space.k, space.slot, space.mesh
    fr = mesh.frames
    if tag == "whitney3d":
        if slot == 0 and d == 0:
            return [PointValue(sid, distinguished=True)]
        if slot == 1 and d == 1:
            return [Moment((1, sid), "dot_t", BaryPoly.constant(1, 1.0), distinguished=True)]
        if slot == 2 and d == 2:
            return [Moment((2, sid), "dot_n", BaryPoly.constant(2, 1.0), distinguished=True)]
        if slot == 3 and d == 3:
            return [Moment((3, sid), "id", BaryPoly.constant(3, 1.0), distinguished=True)]
        return []

    edge_geom = mesh.geometry(1, sid) if d == 1 else None
    tangent = fr.edge_tangent[sid] if d == 1 else None

    if slot == 0:
        if d == 0:
            out = [PointValue(sid, distinguished=True)]
            if tag == "hs":
                out += [PointDerivative(sid, (0,)), PointDerivative(sid, (1,))]
            elif tag == "afn":
                out += [
                    PointDerivative(sid, (0,)),
                    PointDerivative(sid, (1,)),
                    PointDerivative(sid, (0, 0)),
                    PointDerivative(sid, (1, 1)),
                    PointDerivative(sid, (0, 1)),
                ]
            return out
        if d == 1:
            power, res = {"lrt": (1, k - 2), "lbdm": (1, k - 2), "hs": (2, k - 4), "afn": (3, k - 6)}[tag]
            bubbles = edge_bubble_basis(power, res)
            out = [
                Moment((1, sid), "ddt", edge_ddt(b, edge_geom, tangent)) for b in bubbles
            ]
            if tag == "afn":
                out += [
                    Moment((1, sid), "ddn", b) for b in edge_bubble_basis(2, k - 5)
                ]
            return out
        if d == 2:
            power, res = (2, k - 6) if tag == "afn" else (1, k - 3)
            geom = mesh.cell_geometry(sid)
            return [Moment((2, sid), "curl", curl2d(b, geom)) for b in face_bubble_basis(power, res)]
        return []

    if slot == 1:
        if d == 0:
            if tag == "hs":
                return [PointValue(sid, comp=0), PointValue(sid, comp=1)]
            if tag == "afn":
                return [
                    PointDerivative(sid, (0,), comp=0),
                    PointDerivative(sid, (1,), comp=0),
                    PointDerivative(sid, (0,), comp=1),
                    PointDerivative(sid, (1,), comp=1),
                    PointValue(sid, comp=0),
                    PointValue(sid, comp=1),
                ]
            return []
        if d == 1:
            out = [Moment((1, sid), "dot_n", BaryPoly.constant(1, 1.0), distinguished=True)]
            power, res = {"lrt": (1, k - 2), "lbdm": (1, k - 2), "hs": (2, k - 4), "afn": (3, k - 6)}[tag]
            out += [
                Moment((1, sid), "dot_n", edge_ddt(b, edge_geom, tangent))
                for b in edge_bubble_basis(power, res)
            ]
            if tag == "afn":
                out += [Moment((1, sid), "dot_t", b) for b in edge_bubble_basis(2, k - 5)]
            return out
        if d == 2:
            geom = mesh.cell_geometry(sid)
            if tag == "afn":
                bubbles = vector_basis(face_bubble_basis(1, k - 4), 2)
                w_basis = [curl2d(b, geom) for b in face_bubble_basis(2, k - 6)]
                projs = l2_project_basis(bubbles, w_basis, geom) if w_basis else [None] * len(bubbles)
                out = []
                for b, g in zip(bubbles, projs):
                    out.append(HarmonicMoment((2, sid), g, div2d(b, geom)))
                return out
            curl_tests = [curl2d(b, geom) for b in face_bubble_basis(1, k - 3)]
            div_deg = k - 1 if tag == "lrt" else k - 2
            out = [Moment((2, sid), "vec", t) for t in curl_tests]
            out += [Moment((2, sid), "div", q) for q in pk_mod_constants(2, div_deg)]
            return out
        return []

    if slot == 2:
        if d == 0:
            if tag == "afn":
                return [PointValue(sid)]
            return []
        if d == 2:
            out = [Moment((2, sid), "id", BaryPoly.constant(2, 1.0), distinguished=True)]
            if tag == "afn":
                out += [Moment((2, sid), "id", q) for q in _afn_pressure_tests(mesh, sid, k)]
            else:
                deg = k - 1 if tag == "lrt" else k - 2
                out += [Moment((2, sid), "id", q) for q in pk_mod_constants(2, deg)]
            return out
        return []
    raise ElementError("unsupported slot")


def _afn_pressure_tests(mesh, cell, k):
    """Deterministic basis of div([(l0 l1 l2) P_{k-4}]^2): mean-zero, vertex-zero."""
    geom = mesh.cell_geometry(cell)
    cands = [div2d(b, geom) for b in vector_basis(face_bubble_basis(1, k - 4), 2)]
    deg = max(c.degree for c in cands)
    A = np.stack([c.raised(deg).coeffs for c in cands], axis=1)
    _, _, piv = scipy_qr(A, mode="economic", pivoting=True)
    s = np.linalg.svd(A, compute_uv=False)
    rank = int((s > 1e-12 * s[0]).sum())
    expect = (k - 1) * k // 2 - 4
    if rank != expect:
        raise ElementError(f"pressure test rank {rank}, expected {expect}")
    return [cands[i] for i in sorted(piv[:rank])]


# -- the global space ----------------------------------------------------------


class FeFunction:
    """Coefficient vector in a finite element space."""

    __slots__ = ("space", "coeffs")

    def __init__(self, space, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[0] != space.ndofs:
            raise ElementError("coefficient length does not match space dimension")
        self.space = space
        self.coeffs = coeffs

    def cell_poly(self, cell):
        return self.space.cell_poly(cell, self.coeffs)


class FeSpace:
    """A global finite element space Lambda_h^slot for one family and degree."""

    def __init__(self, mesh: SimplicialMesh, family: str, k: int, slot: int):
        fam = check_degree(family, k)
        if mesh.dim != fam.dim:
            raise ElementError(f"family {family!r} is {fam.dim}D, mesh is {mesh.dim}D")
        if not 0 <= slot <= mesh.dim:
            raise ElementError("slot out of range")
        self.mesh = mesh
        self.family = family
        self.k = k
        self.slot = slot
        self.arity = SLOT_ARITY[mesh.dim][slot]
        self.quad_degree = 2 * k + 2

        self.blocks = {}
        self.dofs = []
        ndist_dim = slot  # distinguished DOFs live on slot-dimensional simplices
        self.distinguished_id = {}
        for d in range(mesh.dim + 1):
            for sid in range(mesh.n_simplices(d)):
                block = simplex_dofs(self, d, sid)
                if not block:
                    continue
                offset = len(self.dofs)
                self.blocks[(d, sid)] = (offset, len(block))
                for j, dof in enumerate(block):
                    if dof.distinguished:
                        self.distinguished_id[(d, sid)] = offset + j
                self.dofs.extend(block)
        self.ndofs = len(self.dofs)
        self.distinguished_mask = np.zeros(self.ndofs, dtype=bool)
        for gid in self.distinguished_id.values():
            self.distinguished_mask[gid] = True
        if set(self.distinguished_id) != {
            (ndist_dim, i) for i in range(mesh.n_simplices(ndist_dim))
        }:
            raise ElementError("distinguished DOFs must cover every slot-dim simplex")

        ncells = mesh.n_simplices(mesh.dim)
        self.cell_dofs = []
        self.cell_class = np.zeros(ncells, dtype=int)
        self._class_of_sig = {}
        self._class_shape = []
        self._class_nodal = []
        self._class_cond = []
        self.cell_condition = np.zeros(ncells)
        for c in range(ncells):
            ids = []
            # position order within the cell, so congruent cells share layout
            for d in range(mesh.dim + 1):
                for sid in (int(s) for s in mesh.cell_subs[d][c]):
                    blk = self.blocks.get((d, sid))
                    if blk:
                        ids.extend(range(blk[0], blk[0] + blk[1]))
            ids = np.array(ids, dtype=int)
            self.cell_dofs.append(ids)
            geom = mesh.cell_geometry(c)
            sig = (geom.vertices[1:] - geom.vertices[0]).tobytes()
            cls = self._class_of_sig.get(sig)
            if cls is None:
                basis = shape_basis(family, k, slot, geom)
                if len(basis) != len(ids):
                    raise ElementError(
                        f"cell {c}: {len(ids)} dofs vs shape dimension {len(basis)}"
                    )
                M = np.empty((len(ids), len(ids)))
                for i, gid in enumerate(ids):
                    dof = self.dofs[gid]
                    for j, p in enumerate(basis):
                        M[i, j] = dof.apply_poly(mesh, c, p)
                sv = np.linalg.svd(M, compute_uv=False)
                if sv[-1] <= 1e-12 * sv[0]:
                    raise ElementError(f"cell {c}: singular DOF matrix (unisolvency failure)")
                cls = len(self._class_shape)
                self._class_of_sig[sig] = cls
                self._class_shape.append(basis)
                self._class_nodal.append(np.linalg.inv(M))
                self._class_cond.append(sv[0] / sv[-1])
            self.cell_class[c] = cls
            self.cell_condition[c] = self._class_cond[cls]
        self._poly_cache = {}
        self._value_cache = {}

    # -- local bases ----------------------------------------------------------

    def shape_polys(self, cell):
        return self._class_shape[self.cell_class[cell]]

    def nodal_matrix(self, cell):
        return self._class_nodal[self.cell_class[cell]]

    def nodal_polys(self, cell):
        """Nodal basis polynomials on a cell (dual to the cell's DOFs)."""
        cell = int(self.cell_class[cell])
        out = self._poly_cache.get(cell)
        if out is None:
            basis = self._class_shape[cell]
            C = self._class_nodal[cell]
            deg = max(p.degree for p in basis)
            stacked = np.stack([p.raised(deg).coeffs for p in basis])
            vshape = basis[0].vshape
            out = []
            for j in range(C.shape[1]):
                q = BaryPoly.zero(self.mesh.dim, deg, vshape)
                q.coeffs = np.tensordot(C[:, j], stacked, axes=(0, 0))
                out.append(q)
            self._poly_cache[cell] = out
        return out

    def basis_values(self, cell, rule, op=None):
        """Values of the (transformed) nodal basis at rule points: (nq, nloc, arity)."""
        key = (int(self.cell_class[cell]), rule.degree, op)
        vals = self._value_cache.get(key)
        if vals is None:
            geom = self.mesh.cell_geometry(cell)
            polys = self.nodal_polys(cell)
            if op is not None:
                polys = [_DIFF_FUN[op](p, geom) for p in polys]
            cols = [p.eval(rule.points) for p in polys]
            cols = [c[:, None] if c.ndim == 1 else c for c in cols]
            vals = np.stack(cols, axis=1)
            self._value_cache[key] = vals
        return vals

    def cell_poly(self, cell, coeffs):
        """Polynomial of an FE coefficient vector on a cell (batched in trailing axes)."""
        local = np.asarray(coeffs)[self.cell_dofs[cell]]
        polys = self.nodal_polys(cell)
        deg = polys[0].degree
        stacked = np.stack([p.coeffs for p in polys])
        out = BaryPoly.zero(self.mesh.dim, deg, stacked.shape[2:] + local.shape[1:])
        out.coeffs = np.tensordot(stacked, local, axes=(0, 0))
        return out

    # -- interpolation / DOF application ---------------------------------------

    def eval_dof(self, gid, poly_provider, cells):
        """Evaluate DOF gid on a cellwise-polynomial field (zero outside `cells`)."""
        d, sid = self.dofs[gid].simplex
        candidates = [int(c) for c in self.mesh.star[d][sid] if int(c) in cells]
        if not candidates:
            return 0.0
        c = min(candidates)
        return self.dofs[gid].apply_poly(self.mesh, c, poly_provider(c))

    def interpolate(self, poly_provider, cells=None):
        """Coefficients of an in-space cellwise polynomial field (unbatched)."""
        if cells is None:
            cells = set(range(self.mesh.n_simplices(self.mesh.dim)))
        else:
            cells = set(int(c) for c in cells)
        cache = {}

        def provider(c):
            if c not in cache:
                cache[c] = poly_provider(c)
            return cache[c]

        out = np.zeros(self.ndofs)
        for gid in range(self.ndofs):
            out[gid] = self.eval_dof(gid, provider, cells)
        return out

    def block_ids(self, d, sid, include_distinguished=False):
        blk = self.blocks.get((d, sid))
        if not blk:
            return np.array([], dtype=int)
        ids = np.arange(blk[0], blk[0] + blk[1])
        if not include_distinguished:
            ids = ids[~self.distinguished_mask[ids]]
        return ids

    # -- matrices ---------------------------------------------------------------

    def _cached_matrix(self, key, make):
        cache = getattr(self, "_matrix_cache", None)
        if cache is None:
            cache = self._matrix_cache = {}
        out = cache.get(key)
        if out is None:
            out = cache[key] = make()
        return out

    def local_mass(self, cell, extra_degree=0):
        cls = int(self.cell_class[cell])

        def make():
            rule = simplex_quadrature(self.mesh.dim, self.quad_degree + extra_degree)
            vals = self.basis_values(cell, rule)
            geom = self.mesh.cell_geometry(cell)
            scale = geom.measure * math.factorial(self.mesh.dim)
            return scale * np.einsum("nia,nja,n->ij", vals, vals, rule.weights)

        return self._cached_matrix(("mass", cls, extra_degree), make)

    def local_cross(self, cell, other, op):
        """( other_i , d self_j ) on a cell; other is the next-slot space."""
        cls = int(self.cell_class[cell])

        def make():
            rule = simplex_quadrature(self.mesh.dim, self.quad_degree + other.quad_degree)
            a = other.basis_values(cell, rule)
            b = self.basis_values(cell, rule, op=op)
            geom = self.mesh.cell_geometry(cell)
            scale = geom.measure * math.factorial(self.mesh.dim)
            return scale * np.einsum("nia,nja,n->ij", a, b, rule.weights)

        return self._cached_matrix(("cross", cls, op), make)

    def local_stiff(self, cell, op):
        cls = int(self.cell_class[cell])

        def make():
            rule = simplex_quadrature(self.mesh.dim, self.quad_degree)
            b = self.basis_values(cell, rule, op=op)
            geom = self.mesh.cell_geometry(cell)
            scale = geom.measure * math.factorial(self.mesh.dim)
            return scale * np.einsum("nia,nja,n->ij", b, b, rule.weights)

        return self._cached_matrix(("stiff", cls, op), make)

    def mass_matrix(self, cells=None):
        if cells is None:
            cells = range(self.mesh.n_simplices(self.mesh.dim))
        M = np.zeros((self.ndofs, self.ndofs))
        for c in cells:
            ids = self.cell_dofs[c]
            M[np.ix_(ids, ids)] += self.local_mass(c)
        return M

    def l2_norm(self, coeffs, cells=None):
        if cells is None:
            cells = range(self.mesh.n_simplices(self.mesh.dim))
        acc = 0.0
        for c in cells:
            local = np.asarray(coeffs)[self.cell_dofs[c]]
            acc = acc + np.einsum("i...,ij,j...->...", local, self.local_mass(c), local)
        return np.sqrt(acc)


def diff_matrix(space: FeSpace, next_space: FeSpace) -> np.ndarray:
    """Matrix of d^slot from `space` into `next_space` (exact on the complex).

    Entries are computed once per cell congruence class; each global entry is
    assigned from the lowest-indexed cell shared by the two attachments, which
    is well defined because the DOFs are single valued on the complex.
    """
    mesh = space.mesh
    op = slot_diff(mesh.dim, space.slot)
    D = np.zeros((next_space.ndofs, space.ndofs))
    ncells = mesh.n_simplices(mesh.dim)
    star = mesh.star
    blocks = {}
    for c in range(ncells):
        cls = int(space.cell_class[c])
        if cls not in blocks:
            geom = mesh.cell_geometry(c)
            dpolys = [_DIFF_FUN[op](p, geom) for p in space.nodal_polys(c)]
            B = np.empty((len(next_space.cell_dofs[c]), len(dpolys)))
            for lj, gj in enumerate(next_space.cell_dofs[c]):
                for li in range(len(dpolys)):
                    B[lj, li] = next_space.dofs[gj].apply_poly(mesh, c, dpolys[li])
            blocks[cls] = B
        B = blocks[cls]
        row_ids = next_space.cell_dofs[c]
        col_ids = space.cell_dofs[c]
        for li, gi in enumerate(col_ids):
            di, si = space.dofs[gi].simplex
            supp = set(int(x) for x in star[di][si])
            for lj, gj in enumerate(row_ids):
                dj, sj = next_space.dofs[gj].simplex
                shared = supp & set(int(x) for x in star[dj][sj])
                if min(shared) != c:
                    continue
                D[gj, gi] = B[lj, li]
    return D


# -- public checks -------------------------------------------------------------


def unit_simplex_mesh(dim):
    if dim == 2:
        return SimplicialMesh(2, np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    return SimplicialMesh(
        3,
        np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        np.array([[0, 1, 2, 3]]),
    )


def build_reference(family, k, slot):
    """Reference element on the unit simplex: the one-cell space."""
    fam = check_degree(family, k)
    mesh = unit_simplex_mesh(fam.dim)
    return FeSpace(mesh, family, k, slot)


def check_unisolvency(space: FeSpace, cell=0, inject_duplicate=False):
    """Invertibility report of the cell's DOF-on-shape-basis matrix."""
    mesh = space.mesh
    ids = space.cell_dofs[cell]
    basis = space.shape_polys(cell)
    M = np.empty((len(ids), len(ids)))
    for i, gid in enumerate(ids):
        for j, p in enumerate(basis):
            M[i, j] = space.dofs[gid].apply_poly(mesh, cell, p)
    if inject_duplicate:
        M[-1] = M[0] if len(ids) > 1 else 0.0
    sv = np.linalg.svd(M, compute_uv=False)
    invertible = bool(sv[-1] > 1e-10 * sv[0])
    return {
        "invertible": invertible,
        "condition": float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf,
        "smin": float(sv[-1]),
        "smax": float(sv[0]),
        "ndofs": len(ids),
    }


def eval_L(space: FeSpace, simplex, coeffs):
    """L_sigma u for an FE function: its non-distinguished sigma-block expansion."""
    ids = space.block_ids(*simplex)
    out = np.zeros_like(np.asarray(coeffs, dtype=float))
    out[ids] = np.asarray(coeffs)[ids]
    return out


def eval_L_field(space: FeSpace, simplex, poly_provider, cells):
    """L_sigma applied to a cellwise polynomial field (coefficients returned)."""
    ids = space.block_ids(*simplex)
    out = np.zeros(space.ndofs)
    for gid in ids:
        out[gid] = space.eval_dof(gid, poly_provider, cells)
    return out


def check_span_condition(space: FeSpace, next_space: FeSpace):
    """Assumption check: non-distinguished next-slot DOFs kill d(distinguished basis)."""
    mesh = space.mesh
    op = slot_diff(mesh.dim, space.slot)
    worst = 0.0
    records = []
    for (d, sid), gid in sorted(space.distinguished_id.items()):
        support = sorted(int(c) for c in mesh.star[d][sid])
        cache = {}

        def dpoly(c):
            if c not in cache:
                li = list(space.cell_dofs[c]).index(gid)
                cache[c] = _DIFF_FUN[op](space.nodal_polys(c)[li], mesh.cell_geometry(c))
            return cache[c]

        vals = np.zeros(next_space.ndofs)
        touched = []
        support_set = set(support)
        for dd in range(mesh.dim + 1):
            seen = set()
            for c in support:
                for sj in (int(s) for s in mesh.cell_subs[dd][c]):
                    if sj in seen:
                        continue
                    seen.add(sj)
                    blk = next_space.blocks.get((dd, sj))
                    if not blk:
                        continue
                    for gj in range(blk[0], blk[0] + blk[1]):
                        vals[gj] = next_space.eval_dof(gj, dpoly, support_set)
                        touched.append(gj)
        touched = np.array(sorted(set(touched)), dtype=int)
        scale = max(np.abs(vals[touched]).max(), 1e-30)
        bad = touched[~next_space.distinguished_mask[touched]]
        resid = np.abs(vals[bad]).max() / scale if len(bad) else 0.0
        worst = max(worst, resid)
        records.append(((d, sid), float(resid)))
    return {"max_residual": float(worst), "per_simplex": records}


def bubble_complex_check(descriptor: str, k: int):
    """Exactness and dimension identities of the named edge/face bubble complex.

    Descriptors: lrt-edge, lbdm-edge, hs-edge, afn-edge, lbdm-face (= hs-face),
    afn-face, neilan-face.  Matrices are assembled on reference simplices.
    """
    tri = SimplexGeometry([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    seg = SimplexGeometry([[0.0], [1.0]])
    t = np.array([1.0])

    def mat(images, basis_codomain):
        if not images:
            return np.zeros((len(basis_codomain), 0))
        deg = max([p.degree for p in images] + [p.degree for p in basis_codomain])
        A = np.stack([p.raised(deg).coeffs.ravel() for p in basis_codomain], axis=1)
        B = np.stack([p.raised(deg).coeffs.ravel() for p in images], axis=1)
        coef, res, *_ = np.linalg.lstsq(A, B, rcond=None)
        resid = np.abs(A @ coef - B).max()
        if resid > 1e-9 * max(1.0, np.abs(B).max()):
            raise ElementError("bubble image leaves the stated codomain")
        return coef

    def rank(Mt):
        if Mt.size == 0:
            return 0
        s = np.linalg.svd(Mt, compute_uv=False)
        return int((s > 1e-11 * max(s[0], 1e-30)).sum())

    def mean_zero(polys, geom):
        # the mean-zero subspace within span(polys): kernel of the integral
        if not polys:
            return []
        means = np.array([[integrate(p, geom) for p in polys]])
        ns = _nullspace(means / max(np.abs(means).max(), 1e-30))
        deg = max(p.degree for p in polys)
        out = []
        for col in ns.T:
            q = BaryPoly.zero(geom.dim, deg, polys[0].vshape)
            for c, p in zip(col, polys):
                q.coeffs += c * p.raised(deg).coeffs
            out.append(q)
        return out

    if descriptor in ("lrt-edge", "lbdm-edge"):
        check_degree("lbdm" if descriptor.startswith("lbdm") else "lrt", k)
        src = edge_bubble_basis(1, k - 2)
        dst = mean_zero(monomial_basis(1, k - 1), seg)
        imgs = [deriv_dir(b, seg, t) for b in src]
        A = mat(imgs, dst) if dst else np.zeros((0, len(src)))
        dims = (len(src), len(dst))
        exact = rank(A) == len(src) == len(dst)
        return {"is_complex": True, "exact": bool(exact), "dims": dims}

    if descriptor == "hs-edge":
        check_degree("hs", k)
        src = edge_bubble_basis(2, k - 4)
        dst = mean_zero(edge_bubble_basis(1, k - 3), seg)
        imgs = [deriv_dir(b, seg, t) for b in src]
        A = mat(imgs, dst) if dst else np.zeros((0, len(src)))
        exact = rank(A) == len(src) == len(dst)
        return {"is_complex": True, "exact": bool(exact), "dims": (len(src), len(dst))}

    if descriptor == "afn-edge":
        check_degree("afn", k)
        src = edge_bubble_basis(3, k - 6)
        dst = mean_zero(edge_bubble_basis(2, k - 5), seg)
        imgs = [deriv_dir(b, seg, t) for b in src]
        A = mat(imgs, dst) if dst else np.zeros((0, len(src)))
        exact = rank(A) == len(src) == len(dst)
        return {"is_complex": True, "exact": bool(exact), "dims": (len(src), len(dst))}

    if descriptor in ("lbdm-face", "hs-face"):
        check_degree("hs" if descriptor.startswith("hs") else "lbdm", k)
        src = face_bubble_basis(1, k - 3)
        mid = _bdm_face_bubbles(tri, k - 1)
        dst = mean_zero(monomial_basis(2, k - 2), tri)
        return _face_complex_report(tri, src, mid, dst, expect_mid=k * k - 2 * k)

    if descriptor == "afn-face":
        check_degree("afn", k)
        src = face_bubble_basis(2, k - 6)
        mid = vector_basis(face_bubble_basis(1, k - 4), 2)
        p0 = [q for q in monomial_basis(2, k - 2)]
        p0 = _vertex_vanishing(p0, tri)
        dst = mean_zero(p0, tri)
        rep = _face_complex_report(tri, src, mid, dst, expect_mid=(k - 2) * (k - 3))
        rep["identity"] = {
            "dim_src_plus_dst": len(src) + len(dst),
            "(k-2)(k-3)": (k - 2) * (k - 3),
            "2 dim P_{k-4}": 2 * n_poly(2, k - 4),
            "holds": len(src) + len(dst) == (k - 2) * (k - 3) == 2 * n_poly(2, k - 4),
        }
        return rep

    if descriptor == "neilan-face":
        if k < 9:
            raise ElementError("neilan-face requires k >= 9")
        b3 = face_bubble_basis(3, k - 9)
        bdm = _bdm_face_bubbles(tri, k - 7)
        got = len(bdm)
        want = (k - 6) * (k - 8)
        bub2 = face_bubble_basis(2, 0)[0]
        mid = [bub2 * v for v in bdm]
        dst = mean_zero([bub2 * q for q in monomial_basis(2, k - 8)], tri)
        rep = _face_complex_report(tri, b3, mid, dst, expect_mid=want)
        rep["identity"] = {
            "dim_bdm_bubble": got,
            "(k-6)(k-8)": want,
            "holds": got == want and rep["exact"],
        }
        return rep

    raise ElementError(f"unknown bubble complex descriptor {descriptor!r}")


def _vertex_vanishing(polys, tri):
    verts = np.eye(3)
    kept = []
    if not polys:
        return []
    deg = max(p.degree for p in polys)
    A = np.stack([p.raised(deg).coeffs for p in polys], axis=1)
    V = np.stack([p.raised(deg).eval(verts) for p in polys], axis=1)  # (3, n)
    ns = _nullspace(V)
    out = []
    for col in ns.T:
        q = BaryPoly.zero(2, deg)
        for c, p in zip(col, polys):
            q.coeffs += c * p.raised(deg).coeffs
        out.append(q)
    return out


def _nullspace(A, tol=1e-11):
    u, s, vt = np.linalg.svd(A)
    if s.size == 0:
        return np.eye(A.shape[1])
    r = int((s > tol * s[0]).sum())
    return vt[r:].T


def _bdm_face_bubbles(tri, degree):
    """Basis of {v in [P_degree]^2 : v.n = 0 on all three edges}."""
    if degree < 0:
        return []
    cand = vector_basis(monomial_basis(2, degree), 2)
    rows = []
    rule = simplex_quadrature(1, 2 * degree + 2)
    for pos, nvec in _tri_edge_normals(tri):
        pts = np.zeros((len(rule), 3))
        for j, pj in enumerate(pos):
            pts[:, pj] = rule.points[:, j]
        for m in range(degree + 1):
            test = rule.points[:, 1] ** m
            rows.append(
                [
                    (rule.weights * test) @ (v.eval(pts) @ nvec)
                    for v in cand
                ]
            )
    A = np.array(rows)
    ns = _nullspace(A)
    out = []
    deg = degree
    for col in ns.T:
        q = BaryPoly.zero(2, deg, (2,))
        for c, v in zip(col, cand):
            q.coeffs += c * v.raised(deg).coeffs
        out.append(q)
    return out


def _tri_edge_normals(tri):
    v = tri.vertices
    out = []
    for a, b in ((0, 1), (0, 2), (1, 2)):
        t = v[b] - v[a]
        t = t / np.linalg.norm(t)
        out.append(((a, b), np.array([t[1], -t[0]])))
    return out


def _face_complex_report(tri, src, mid, dst, expect_mid=None):
    imgs1 = [curl2d(p, tri) for p in src]
    imgs2 = [div2d(p, tri) for p in mid]

    def coords(polys, frame):
        if not polys or not frame:
            return np.zeros((len(frame), len(polys)))
        deg = max([p.degree for p in polys] + [p.degree for p in frame])
        A = np.stack([p.raised(deg).coeffs.ravel() for p in frame], axis=1)
        B = np.stack([p.raised(deg).coeffs.ravel() for p in polys], axis=1)
        coef, *_ = np.linalg.lstsq(A, B, rcond=None)
        resid = np.abs(A @ coef - B).max()
        if resid > 1e-9 * max(1.0, np.abs(B).max()):
            raise ElementError("bubble image leaves the stated codomain")
        return coef

    A1 = coords(imgs1, mid)
    A2 = coords(imgs2, dst)
    comp = A2 @ A1 if A1.size and A2.size else np.zeros((len(dst), len(src)))
    is_complex = bool(np.abs(comp).max() < 1e-9) if comp.size else True

    def rk(M):
        if M.size == 0:
            return 0
        s = np.linalg.svd(M, compute_uv=False)
        return int((s > 1e-11 * max(s[0], 1e-30)).sum())

    r1, r2 = rk(A1), rk(A2)
    ker2 = len(mid) - r2
    exact = is_complex and (r1 == ker2) and (r2 == len(dst)) and (r1 == len(src))
    dims = {"src": len(src), "mid": len(mid), "dst": len(dst), "rank_first": r1, "rank_second": r2}
    if expect_mid is not None:
        dims["mid_expected"] = expect_mid
        exact = exact and len(mid) == expect_mid
    return {"is_complex": is_complex, "exact": bool(exact), "dims": dims}
