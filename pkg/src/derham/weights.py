"""Weight fields on h-patches and the skeleton smoothers built from them.

Each weight is a lowest-order auxiliary finite element field supported on the
h-patch of its simplex, solving a patch problem with homogeneous essential
trace.  Chained through the incidence signs they make the smoothers commute
with the de Rham differentials:

* vertex:   normalized star indicator
* edge:     flux field whose divergence matches the difference of the
            endpoint star indicators, zero boundary flux (rotated into the
            plane in 2D, where the first differential is the rotated gradient)
* face 3D:  edge-circulation field whose curl is the signed sum of the edge
            weights, zero tangential trace
* face 2D / cell 3D: continuous piecewise linear potential whose negative
            gradient is the signed sum of the sub-weights, zero boundary trace

Patch problems are underdetermined; the minimal-coefficient-norm solution is
selected by least squares, which keeps every run deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .elements import FeSpace, diff_matrix
from .mesh import SimplicialMesh
from .poly import BaryPoly, curl3d, grad, simplex_quadrature

COMPAT_TOL = 1e-12
RESIDUAL_TOL = 1e-11


class WeightError(RuntimeError):
    """Incompatible right-hand side or unsolvable patch problem."""


class WeightFunction:
    """A lowest-order field on the h-patch of one simplex."""

    __slots__ = ("simplex", "slot", "patch", "cell_polys", "arity", "residual")

    def __init__(self, simplex, slot, patch, cell_polys, arity, residual):
        self.simplex = simplex
        self.slot = slot
        self.patch = patch
        self.cell_polys = cell_polys
        self.arity = arity
        self.residual = residual

    def integrate_against(self, field, quad_degree):
        """(field, z)_{patch} via cellwise quadrature (batched in trailing axes)."""
        mesh = self.patch.mesh
        total = 0.0
        for c, zp in sorted(self.cell_polys.items()):
            geom = mesh.cell_geometry(c)
            rule = simplex_quadrature(geom.dim, quad_degree + zp.degree)
            zv = zp.eval(rule.points)
            fv = np.asarray(field.eval_cell(c, rule.points))
            if zv.ndim == 1:
                integrand = fv * zv.reshape((len(rule),) + (1,) * (fv.ndim - 1))
            else:
                integrand = np.einsum("na,na...->n...", zv, fv)
            total = total + np.tensordot(rule.weights, integrand, axes=(0, 0)) * (
                geom.measure * math.factorial(geom.dim)
            )
        return total


def _aux_family(dim):
    return ("lrt", 1) if dim == 2 else ("whitney3d", 1)


class AuxiliaryComplex:
    """Lowest-order spaces, differentials, and cached weights of one mesh."""

    def __init__(self, mesh: SimplicialMesh):
        fam, k = _aux_family(mesh.dim)
        self.mesh = mesh
        self.spaces = [FeSpace(mesh, fam, k, s) for s in range(mesh.dim + 1)]
        self.dmats = [
            diff_matrix(self.spaces[s], self.spaces[s + 1]) for s in range(mesh.dim)
        ]
        self._weights: dict[int, list[WeightFunction]] = {}

    def weights(self, slot):
        if slot not in self._weights:
            mesh = self.mesh
            if slot == 0:
                out = [_vertex_weight(mesh, v) for v in range(mesh.n_simplices(0))]
            elif slot == 1:
                out = [_edge_weight(mesh, self, e) for e in range(mesh.n_simplices(1))]
            elif slot == 2 and mesh.dim == 3:
                prev = self.weights(1)
                out = [_face_weight_3d(mesh, self, f, prev) for f in range(mesh.n_simplices(2))]
            elif slot == mesh.dim:
                prev = self.weights(slot - 1)
                out = [
                    _potential_weight(mesh, self, slot, s, prev)
                    for s in range(mesh.n_simplices(slot))
                ]
            else:
                raise WeightError("slot out of range")
            self._weights[slot] = out
        return self._weights[slot]


def build_weights(mesh: SimplicialMesh, slot: int, aux: AuxiliaryComplex | None = None):
    """Weight functions for every simplex of dimension `slot`."""
    if not 0 <= slot <= mesh.dim:
        raise WeightError("slot out of range")
    if aux is None:
        aux = AuxiliaryComplex(mesh)
    return aux.weights(slot)


def _vertex_weight(mesh, v):
    patch = mesh.h_patch(0, v)
    area = sum(mesh.cell_volume[c] for c in patch.cells)
    polys = {c: BaryPoly.constant(mesh.dim, 1.0 / area) for c in patch.cells}
    return WeightFunction((0, v), 0, patch, polys, 1, 0.0)


def _lstsq_min_norm(A, b):
    if A.shape[1] == 0:
        return np.zeros(0), float(np.linalg.norm(b))
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x, float(np.linalg.norm(A @ x - b))


def _edge_weight(mesh, aux, e):
    """Flux field on the edge h-patch; rotated into the plane in 2D."""
    x, y = (int(q) for q in mesh.simplices[1][e])
    patch = mesh.h_patch(1, e)
    cells = patch.cells
    sp_div = aux.spaces[mesh.dim - 1]
    sp_last = aux.spaces[mesh.dim]
    D = aux.dmats[mesh.dim - 1]

    # the rotated-gradient pairing flips the sign between 2D and 3D
    sgn = 1.0 if mesh.dim == 2 else -1.0
    star_x = set(int(c) for c in mesh.star[0][x])
    star_y = set(int(c) for c in mesh.star[0][y])
    area_x = sum(mesh.cell_volume[c] for c in star_x)
    area_y = sum(mesh.cell_volume[c] for c in star_y)
    dens = {
        c: sgn * ((c in star_y) / area_y - (c in star_x) / area_x) for c in cells
    }
    r = np.array([dens[c] * mesh.cell_volume[c] for c in cells])
    scale = max(np.abs(r).max(), 1e-30)
    if abs(r.sum()) > COMPAT_TOL * scale:
        raise WeightError(f"incompatible edge weight data at edge {e}")

    facet_dim = mesh.dim - 1
    bnd = set(patch.boundary_facets())
    interior = [f for f in patch.closure_simplices(facet_dim) if f not in bnd]
    col_ids = [sp_div.distinguished_id[(facet_dim, f)] for f in interior]
    row_ids = [sp_last.distinguished_id[(mesh.dim, c)] for c in cells]
    A = D[np.ix_(row_ids, col_ids)]
    xsol, resid = _lstsq_min_norm(A, r)
    if resid > RESIDUAL_TOL * scale:
        raise WeightError(f"edge weight solve failed at edge {e}: residual {resid}")

    coeffs = np.zeros(sp_div.ndofs)
    coeffs[col_ids] = xsol
    polys = {}
    for c in cells:
        p = sp_div.cell_poly(c, coeffs)
        if mesh.dim == 2:  # rotate by +90 degrees
            q = BaryPoly.zero(2, p.degree, (2,))
            q.coeffs[:, 0] = -p.coeffs[:, 1]
            q.coeffs[:, 1] = p.coeffs[:, 0]
            p = q
        polys[c] = p
    return WeightFunction((1, e), 1, patch, polys, mesh.dim, resid / scale)


def _signed_sum_field(mesh, patch, owner_dim, owner_id, parts):
    """Signed sum of sub-weight fields on the owner's h-patch, per cell.

    Returns (cell -> polynomial, summand scale); the scale is used to judge
    the cancellation-based compatibility of the sum.
    """
    sub_dim = owner_dim - 1
    verts = list(mesh.simplices[owner_dim][owner_id])
    out = {c: None for c in patch.cells}
    scale = 1e-30
    for pos in range(len(verts)):
        sub = tuple(v for q, v in enumerate(verts) if q != pos)
        sid = mesh.index[sub_dim][sub]
        if owner_dim == mesh.dim:
            sign = mesh.boundary_sign(owner_id, pos)
        else:
            sign = mesh.stokes_sign(pos)
        w = parts[sid]
        for c, p in w.cell_polys.items():
            scale = max(scale, p.max_abs())
            term = p * float(sign)
            cur = out.get(c)
            out[c] = term if cur is None else cur + term
    for c in patch.cells:
        if out[c] is None:
            out[c] = BaryPoly.zero(mesh.dim, 1, (mesh.dim,))
    return out, scale


def _constant_part(mesh, p):
    """Centroid value and the deviation of the field from that constant."""
    centroid = np.full((1, mesh.dim + 1), 1.0 / (mesh.dim + 1))
    val = p.eval(centroid)[0]
    corners = np.eye(mesh.dim + 1)
    spread = p.eval(corners) - val[None, :]
    return val, float(np.abs(spread).max())


def _constant_field_solve(mesh, patch, G, data_scale, space, sub_dim, diff_op, rhs_sign, tag):
    """Solve d(unknown) = rhs cellwise for a field with constant differentials.

    space carries one distinguished DOF per sub_dim simplex; boundary DOFs of
    the patch are pinned to zero and the remaining system is solved in the
    minimal-norm least squares sense.
    """
    bnd = set(patch.boundary_simplices(sub_dim))
    interior = [s for s in patch.closure_simplices(sub_dim) if s not in bnd]
    col_ids = [space.distinguished_id[(sub_dim, s)] for s in interior]

    rows, rhs = [], []
    compat = 0.0
    centroid = np.full((1, mesh.dim + 1), 1.0 / (mesh.dim + 1))
    for c in patch.cells:
        geom = mesh.cell_geometry(c)
        gc, spread = _constant_part(mesh, G[c])
        compat = max(compat, spread)
        ncomp = len(gc)
        block = np.zeros((ncomp, len(col_ids)))
        polys = space.nodal_polys(c)
        cd = space.cell_dofs[c]
        for j, gid in enumerate(col_ids):
            where = np.nonzero(cd == gid)[0]
            if len(where) == 0:
                continue
            dp = diff_op(polys[int(where[0])], geom)
            block[:, j] = dp.eval(centroid)[0]
        rows.append(block)
        rhs.append(rhs_sign * gc)
    if compat > COMPAT_TOL * data_scale:
        raise WeightError(f"weight data not cellwise constant at {tag}")
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    xsol, resid = _lstsq_min_norm(A, b)
    if resid > RESIDUAL_TOL * data_scale:
        raise WeightError(f"weight solve failed at {tag}: residual {resid}")
    coeffs = np.zeros(space.ndofs)
    coeffs[col_ids] = xsol
    polys = {c: space.cell_poly(c, coeffs) for c in patch.cells}
    return polys, resid / data_scale


def _face_weight_3d(mesh, aux, f, edge_weights):
    """Edge-circulation field with curl equal to the signed edge-weight sum."""
    patch = mesh.h_patch(2, f)
    G, scale = _signed_sum_field(mesh, patch, 2, f, edge_weights)
    polys, rel = _constant_field_solve(
        mesh, patch, G, scale, aux.spaces[1], 1, curl3d, 1.0, f"face {f}"
    )
    return WeightFunction((2, f), 2, patch, polys, 3, rel)


def _potential_weight(mesh, aux, slot, s, prev_weights):
    """Piecewise linear potential with -grad w = signed sum of sub-weights."""
    patch = mesh.h_patch(slot, s)
    G, scale = _signed_sum_field(mesh, patch, slot, s, prev_weights)
    polys, rel = _constant_field_solve(
        mesh, patch, G, scale, aux.spaces[0], 0, grad, -1.0, f"simplex ({slot},{s})"
    )
    return WeightFunction((slot, s), slot, patch, polys, 1, rel)


class SkeletonSmoother:
    """M^k: weighted patch integrals attached to the distinguished basis."""

    def __init__(self, space: FeSpace, weights):
        self.space = space
        self.slot = space.slot
        self.weights = weights
        if len(weights) != space.mesh.n_simplices(space.slot):
            raise WeightError("one weight per slot-dimensional simplex required")
        self._wvec = {}

    def weight_vector(self, sid):
        """(phi_i, z_sid) over the whole basis; exact for in-family FE inputs."""
        v = self._wvec.get(sid)
        if v is None:
            import math as _math

            space = self.space
            mesh = space.mesh
            w = self.weights[sid]
            v = np.zeros(space.ndofs)
            for c, zp in sorted(w.cell_polys.items()):
                rule = simplex_quadrature(mesh.dim, space.quad_degree + zp.degree)
                vals = space.basis_values(c, rule)
                zv = zp.eval(rule.points)
                if zv.ndim == 1:
                    zv = zv[:, None]
                geom = mesh.cell_geometry(c)
                scale = geom.measure * _math.factorial(mesh.dim)
                v[space.cell_dofs[c]] += scale * np.einsum(
                    "nia,na,n->i", vals, zv, rule.weights
                )
            self._wvec[sid] = v
        return v

    def _fe_fast_path(self, field):
        from .fields import FEField

        return isinstance(field, FEField) and field.space is self.space

    def _one_coeff(self, sid, field, quad_degree):
        if self._fe_fast_path(field):
            return np.tensordot(self.weight_vector(sid), field.coeffs, axes=(0, 0))
        return self.weights[sid].integrate_against(field, quad_degree)

    def apply(self, field, quad_degree=None):
        """Coefficients of M^k(field) in the target space (batched)."""
        space = self.space
        if quad_degree is None:
            quad_degree = space.quad_degree
        batch = tuple(getattr(field, "batch", ()))
        out = np.zeros((space.ndofs,) + batch)
        for sid in range(len(self.weights)):
            gid = space.distinguished_id[(self.slot, sid)]
            out[gid] = self._one_coeff(sid, field, quad_degree)
        return out

    def apply_restricted(self, field, simplex_ids, quad_degree=None):
        """Coefficients only for the listed slot-dim simplices (locality path)."""
        space = self.space
        if quad_degree is None:
            quad_degree = space.quad_degree
        batch = tuple(getattr(field, "batch", ()))
        out = np.zeros((space.ndofs,) + batch)
        for sid in simplex_ids:
            gid = space.distinguished_id[(self.slot, sid)]
            out[gid] = self._one_coeff(sid, field, quad_degree)
        return out


def build_smoothers(mesh, family, k, spaces=None, aux=None):
    """All smoothers M^0..M^dim for one family (spaces may be passed in)."""
    if spaces is None:
        spaces = [FeSpace(mesh, family, k, s) for s in range(mesh.dim + 1)]
    if aux is None:
        aux = AuxiliaryComplex(mesh)
    return [
        SkeletonSmoother(spaces[s], aux.weights(s)) for s in range(mesh.dim + 1)
    ]
