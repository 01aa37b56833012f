"""The commuting projections assembled from the smoothers and patch lifts.

The slot-0 projection combines the skeleton smoother with star-patch lifts
of the input's differential; each higher slot adds a correction built from
lifts on layer-extended patches so that the result is simultaneously a
projection and commutes with the complex.  An intermediate operator (the
"hat" map) carries the differential image of the previous slot's projection
and is what the corrections are measured against.

Every term only ever reads the input on the patch the construction
prescribes, and all accumulation runs in sorted simplex order, so output
DOFs near a cell are bitwise reproducible under far-field changes of the
input (the locality contract tested in verify).

Dependence radii, in mesh layers around a cell: slot 0 reads one layer; slot
1 two; the final slot two in 2D; slots 2 and 3 in 3D read three.
"""

from __future__ import annotations

import numpy as np

from .elements import FeSpace, diff_matrix, slot_diff
from .fields import AnalyticField, FEField, Field, PolyField, fd_consistency
from .harmonic import PatchComplex
from .weights import AuxiliaryComplex, SkeletonSmoother

RADII = {2: (1, 2, 2), 3: (1, 2, 3, 3)}


class ProjectorError(RuntimeError):
    pass


class CommutingProjector:
    """Assembled projections onto one family's complex over one mesh."""

    def __init__(self, mesh, family, k, quad_bump=2, check_vertex_values=True):
        self.mesh = mesh
        self.family = family
        self.k = k
        self.quad_bump = quad_bump
        self.check_vertex_values = check_vertex_values
        self.spaces = [FeSpace(mesh, family, k, s) for s in range(mesh.dim + 1)]
        self.dmats = [
            diff_matrix(self.spaces[s], self.spaces[s + 1]) for s in range(mesh.dim)
        ]
        self.aux = AuxiliaryComplex(mesh)
        self.smoothers = [
            SkeletonSmoother(self.spaces[s], self.aux.weights(s))
            for s in range(mesh.dim + 1)
        ]
        self._pc = {}
        self._star = {}
        self._layer = {}
        self._star_cells = {}
        self._closure = {}

    # -- patch bookkeeping ------------------------------------------------------

    def radius(self, slot):
        return RADII[self.mesh.dim][slot]

    def _complex_for(self, cells):
        key = tuple(sorted(int(c) for c in cells))
        pc = self._pc.get(key)
        if pc is None:
            pc = PatchComplex(self.mesh, key, self.spaces, self.dmats, quad_bump=self.quad_bump)
            self._pc[key] = pc
        return pc

    def star_cells(self, simplex):
        cells = self._star_cells.get(simplex)
        if cells is None:
            cells = self.mesh.star_patch(*simplex).cells
            self._star_cells[simplex] = cells
        return cells

    def star_pc(self, simplex):
        pc = self._star.get(simplex)
        if pc is None:
            pc = self._complex_for(self.star_cells(simplex))
            self._star[simplex] = pc
        return pc

    def layer_pc(self, simplex, layers):
        key = (simplex, layers)
        pc = self._layer.get(key)
        if pc is None:
            pc = self._complex_for(self.mesh.extended_patch(*simplex, layers).cells)
            self._layer[key] = pc
        return pc

    def _lift(self, pc, k, field):
        """R^k on the patch; exact coefficient path for in-family FE inputs."""
        if isinstance(field, FEField) and field.space is self.spaces[k]:
            return pc.solve_R(k, pc.moments_fe(k, pc.restrict(k, field.coeffs))).coeffs
        return pc.solve_R(k, pc.moments_analytic(k, field)).coeffs

    def _closure_simplices(self, patch_cells):
        key = tuple(patch_cells)
        out = self._closure.get(key)
        if out is None:
            mesh = self.mesh
            out = []
            for d in range(mesh.dim + 1):
                seen = set()
                for c in patch_cells:
                    seen.update(int(s) for s in mesh.cell_subs[d][c])
                out.extend((d, s) for s in sorted(seen))
            self._closure[key] = out
        return out

    def _vertex_value(self, pc, local_coeffs, vertex, check):
        """Value of a slot-0 patch function at a vertex (= its point DOF)."""
        sp = self.spaces[0]
        gid = sp.distinguished_id[(0, vertex)]
        val = local_coeffs[pc.pos[0][gid]]
        if check:
            glob = pc.scatter(0, local_coeffs)
            vals = []
            for c in pc.cells:
                if vertex not in set(int(v) for v in self.mesh.simplices[self.mesh.dim][c]):
                    continue
                posn = list(self.mesh.simplices[self.mesh.dim][c]).index(vertex)
                pt = np.zeros((1, self.mesh.dim + 1))
                pt[0, posn] = 1.0
                vals.append(sp.cell_poly(c, glob).eval(pt)[0])
            spread = np.abs(np.stack(vals) - val).max()
            scale = max(1.0, float(np.abs(val).max()))
            if spread > 1e-10 * scale:
                raise ProjectorError(
                    f"vertex value disagrees across cells at vertex {vertex}: {spread}"
                )
        return val

    # -- slot 0 -------------------------------------------------------------------

    def project0(self, u: Field):
        """Projection of an H^1-type input; reads one layer around each cell."""
        du = u.differential()
        sp0 = self.spaces[0]
        out = self.smoothers[0].apply(u, sp0.quad_degree + self.quad_bump)
        for simplex in self.mesh.all_simplices():
            pc = self.star_pc(simplex)
            t = self._lift(pc, 1, du)
            tg = pc.scatter(0, t)
            ids = sp0.block_ids(*simplex)
            out[ids] += tg[ids]
            if simplex[0] == 0:
                gid = sp0.distinguished_id[simplex]
                out[gid] += self._vertex_value(pc, t, simplex[1], self.check_vertex_values)
        return out

    # -- hat maps -------------------------------------------------------------------

    def _hat1(self, w: Field, restrict=None):
        """Differential image of the slot-0 machinery applied to a slot-1 field.

        With restrict=(patch cells) only the terms contributing on that patch
        are assembled; the returned coefficients are then valid there only.
        """
        sp0, sp1 = self.spaces[0], self.spaces[1]
        batch = tuple(getattr(w, "batch", ()))
        acc0 = np.zeros((sp0.ndofs,) + batch)
        if restrict is None:
            simplices = self.mesh.all_simplices()
            out = self.smoothers[1].apply(w, sp1.quad_degree + self.quad_bump)
        else:
            simplices = self._closure_simplices(restrict)
            edge_ids = [s for (d, s) in simplices if d == 1]
            out = self.smoothers[1].apply_restricted(
                w, edge_ids, sp1.quad_degree + self.quad_bump
            )
        check = self.check_vertex_values and restrict is None
        for simplex in simplices:
            pc = self.star_pc(simplex)
            t = self._lift(pc, 1, w)
            tg = pc.scatter(0, t)
            ids = sp0.block_ids(*simplex)
            acc0[ids] += tg[ids]
            if simplex[0] == 0:
                gid = sp0.distinguished_id[simplex]
                acc0[gid] += self._vertex_value(pc, t, simplex[1], check)
        out += np.tensordot(self.dmats[0], acc0, axes=(1, 0))
        return out

    def _hat2(self, v: Field, restrict=None):
        """3D intermediate map feeding slot 2 (curl of slot-1 corrections)."""
        if self.mesh.dim != 3:
            raise ProjectorError("hat-2 map exists in 3D only")
        sp1, sp2 = self.spaces[1], self.spaces[2]
        batch = tuple(getattr(v, "batch", ()))
        acc1 = np.zeros((sp1.ndofs,) + batch)
        if restrict is None:
            simplices = self.mesh.all_simplices()
            out = self.smoothers[2].apply(v, sp2.quad_degree + self.quad_bump)
        else:
            simplices = self._closure_simplices(restrict)
            face_ids = [s for (d, s) in simplices if d == 2]
            out = self.smoothers[2].apply_restricted(
                v, face_ids, sp2.quad_degree + self.quad_bump
            )
        for simplex in simplices:
            pcl = self.layer_pc(simplex, 1)
            t = self._lift(pcl, 2, v)
            tf = FEField(sp1, pcl.scatter(1, t))
            h = self._hat1(tf, restrict=self.star_cells(simplex))
            r = tf.coeffs - h
            ids = sp1.block_ids(*simplex)
            acc1[ids] += r[ids]
            if simplex[0] == 1:
                gid = sp1.distinguished_id[simplex]
                acc1[gid] += r[gid]
        out += np.tensordot(self.dmats[1], acc1, axes=(1, 0))
        return out

    # -- slots 1..dim ------------------------------------------------------------------

    def project1(self, xi: Field, use_q_form=False):
        """Slot-1 projection; reads two layers around each cell."""
        sp1 = self.spaces[1]
        dxi = xi.differential()
        out = self._hat1(xi)
        for simplex in self.mesh.all_simplices():
            pcl = self.layer_pc(simplex, 1)
            if use_q_form:
                t = pcl.Q_field(1, xi, dxi)
            else:
                t = self._lift(pcl, 2, dxi)
            tf = FEField(sp1, pcl.scatter(1, t))
            h = self._hat1(tf, restrict=self.star_cells(simplex))
            r = tf.coeffs - h
            ids = sp1.block_ids(*simplex)
            out[ids] += r[ids]
            if simplex[0] == 1:
                gid = sp1.distinguished_id[simplex]
                out[gid] += r[gid]
        return out

    def project2(self, v: Field, use_q_form=False):
        """Slot-2 projection: the 2D final slot or the 3D H(div) slot."""
        if self.mesh.dim == 2:
            return self._project_final(v)
        sp2 = self.spaces[2]
        dv = v.differential()
        out = self._hat2(v)
        for simplex in self.mesh.all_simplices():
            pcl = self.layer_pc(simplex, 2)
            if use_q_form:
                t = pcl.Q_field(2, v, dv)
            else:
                t = self._lift(pcl, 3, dv)
            tf = FEField(sp2, pcl.scatter(2, t))
            h = self._hat2(tf, restrict=self.star_cells(simplex))
            r = tf.coeffs - h
            ids = sp2.block_ids(*simplex)
            out[ids] += r[ids]
            if simplex[0] == 2:
                gid = sp2.distinguished_id[simplex]
                out[gid] += r[gid]
        return out

    def project3(self, p: Field):
        """3D final slot."""
        if self.mesh.dim != 3:
            raise ProjectorError("slot 3 exists in 3D only")
        return self._project_final(p)

    def _project_final(self, p: Field):
        """Final slot: smoother plus the divergence of layered corrections."""
        dim = self.mesh.dim
        sp_prev = self.spaces[dim - 1]
        sp_top = self.spaces[dim]
        layers = self.radius(dim) - 1
        batch = tuple(getattr(p, "batch", ()))
        out = self.smoothers[dim].apply(p, sp_top.quad_degree + self.quad_bump)
        acc = np.zeros((sp_prev.ndofs,) + batch)
        hat = self._hat1 if dim == 2 else self._hat2
        for simplex in self.mesh.all_simplices():
            pcl = self.layer_pc(simplex, layers)
            t = self._lift(pcl, dim, p)
            tf = FEField(sp_prev, pcl.scatter(dim - 1, t))
            h = hat(tf, restrict=self.star_cells(simplex))
            r = tf.coeffs - h
            ids = sp_prev.block_ids(*simplex)
            acc[ids] += r[ids]
            if simplex[0] == dim - 1:
                gid = sp_prev.distinguished_id[simplex]
                acc[gid] += r[gid]
        out += np.tensordot(self.dmats[dim - 1], acc, axes=(1, 0))
        return out

    def _with_chain(self, slot, field):
        """Attach the exact differential path to in-family FE inputs."""
        if (
            isinstance(field, FEField)
            and field.space is self.spaces[slot]
            and field._next_space is None
            and slot < self.mesh.dim
        ):
            return FEField(
                self.spaces[slot], field.coeffs, next_space=self.spaces[slot + 1], dmat=self.dmats[slot]
            )
        return field

    def project(self, slot, field, **kw):
        table = {0: self.project0, 1: self.project1, 2: self.project2}
        if self.mesh.dim == 3:
            table[3] = self.project3
        if slot not in table:
            raise ProjectorError(f"no slot {slot} in {self.mesh.dim}D")
        return table[slot](self._with_chain(slot, field), **kw)

    # -- diagnostics ------------------------------------------------------------------

    def commutation_residual(self, slot, field):
        """|| pi^{s+1}(d u) - d(pi^s u) ||_L2 / max(||d u||_L2, eps)."""
        dfield = field.differential()
        if (
            isinstance(dfield, AnalyticField)
            and dfield.d_fn is None
            and slot + 1 < self.mesh.dim
        ):
            # d(d u) vanishes identically for exact images
            arity2 = self.spaces[slot + 2].arity
            batch = tuple(dfield.batch)

            def zero(x, _a=arity2, _b=batch):
                shape = (x.shape[0],) + ((_a,) if _a > 1 else ()) + _b
                return np.zeros(shape)

            dfield = AnalyticField(
                self.mesh, dfield.fn, dfield.arity, d_fn=zero, d_arity=arity2, batch=batch
            )
        a = self.project(slot + 1, dfield)
        b = np.tensordot(self.dmats[slot], self.project(slot, field), axes=(1, 0))
        sp = self.spaces[slot + 1]
        dcoef = self._field_l2(slot + 1, dfield)
        num = sp.l2_norm(a - b)
        return np.max(num / np.maximum(dcoef, 1e-14))

    def _field_l2(self, slot, field):
        import math

        from .poly import simplex_quadrature

        total = 0.0
        sp = self.spaces[slot]
        rule = simplex_quadrature(self.mesh.dim, sp.quad_degree + self.quad_bump)
        for c in range(self.mesh.n_simplices(self.mesh.dim)):
            fv = np.asarray(field.eval_cell(c, rule.points))
            geom = self.mesh.cell_geometry(c)
            if sp.arity == 1:
                sq = fv * fv
            else:
                sq = np.einsum("na...,na...->n...", fv, fv)
            total = total + geom.measure * math.factorial(self.mesh.dim) * np.tensordot(
                rule.weights, sq, axes=(0, 0)
            )
        return np.sqrt(total)

    def projection_defect(self, slot, coeffs):
        """Relative coefficient error of reprojecting an FE function."""
        next_space = self.spaces[slot + 1] if slot < self.mesh.dim else None
        dmat = self.dmats[slot] if slot < self.mesh.dim else None
        f = FEField(self.spaces[slot], coeffs, next_space=next_space, dmat=dmat)
        got = self.project(slot, f)
        scale = np.maximum(np.abs(coeffs).max(axis=0), 1e-14)
        return np.max(np.abs(got - coeffs).max(axis=0) / scale)
