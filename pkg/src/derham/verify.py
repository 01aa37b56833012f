"""Verification harness: exactness ranks, assumption checks, locality probes,
boundedness studies, and deterministic JSON reports.

Every check returns a CheckRecord; suites collect them into a
VerificationReport whose JSON serialization is byte-stable for a fixed
configuration (timings are zeroed unless explicitly requested).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .elements import (
    FeSpace,
    check_span_condition,
    check_unisolvency,
    diff_matrix,
    eval_L_field,
    get_family,
    slot_diff,
)
from .fields import PolyField, random_poly_field
from .harmonic import RANK_TOL, PatchComplex
from .mesh import SimplicialMesh, shape_regularity
from .poly import BaryPoly, multi_indices, simplex_quadrature
from .projector import CommutingProjector

SPAN_TOL = 1e-11
CONST_TOL = 1e-12


@dataclass
class CheckRecord:
    name: str
    status: str  # pass | fail | skipped
    data: dict
    tolerance: float | None = None
    seconds: float = 0.0

    def as_dict(self, include_timings=False):
        return {
            "name": self.name,
            "status": self.status,
            "data": self.data,
            "tolerance": self.tolerance,
            "seconds": round(self.seconds, 3) if include_timings else 0.0,
        }


@dataclass
class VerificationReport:
    meta: dict
    mesh: dict
    family: dict
    checks: list = field(default_factory=list)
    schema_version: int = 1

    def add(self, record: CheckRecord):
        self.checks.append(record)

    @property
    def n_failed(self):
        return sum(1 for c in self.checks if c.status == "fail")

    def as_dict(self, include_timings=False):
        return {
            "meta": dict(sorted(self.meta.items())),
            "mesh": dict(sorted(self.mesh.items())),
            "family": dict(sorted(self.family.items())),
            "checks": [c.as_dict(include_timings) for c in self.checks],
            "schema_version": self.schema_version,
        }


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def new_report(mesh: SimplicialMesh, family: str, k: int, config: dict | None = None):
    fam = get_family(family)
    return VerificationReport(
        meta={"package": "derham", "config": _jsonable(config or {})},
        mesh={
            "dim": mesh.dim,
            "cells": mesh.n_simplices(mesh.dim),
            "vertices": mesh.n_simplices(0),
            "shape_regularity": shape_regularity(mesh),
        },
        family={"tag": family, "degree": k, "description": fam.description},
    )


# -- exactness ------------------------------------------------------------------


def rank_identities(dims, dlocs):
    """Exactness report of one restricted complex from dimensions and d-matrices."""
    nslots = len(dims)
    ok = True
    details = {}
    for s in range(nslots - 2):
        comp = dlocs[s + 1] @ dlocs[s]
        resid = float(np.abs(comp).max()) if comp.size else 0.0
        details[f"dd_zero_{s}"] = resid
        ok &= resid < 1e-9

    def rank(M):
        if M.size == 0:
            return 0
        sv = np.linalg.svd(M, compute_uv=False)
        return int((sv > RANK_TOL * max(sv[0], 1e-30)).sum())

    ranks = [rank(d) for d in dlocs]
    kernel_head = dims[0] - ranks[0]
    details["kernel_head"] = kernel_head
    ok &= kernel_head == 1
    for s in range(1, nslots - 1):
        kerdim = dims[s] - ranks[s]
        details[f"kernel_{s}"] = kerdim
        details[f"image_{s-1}"] = ranks[s - 1]
        ok &= kerdim == ranks[s - 1]
    details["image_tail"] = ranks[-1]
    ok &= ranks[-1] == dims[-1]
    euler = sum((-1) ** s * dims[s] for s in range(nslots))
    details["euler"] = euler
    ok &= euler == 1
    return bool(ok), details


def _patch_restriction(mesh, spaces, dmats, cells):
    closure = {}
    for d in range(mesh.dim + 1):
        ids = set()
        for c in cells:
            ids.update(int(s) for s in mesh.cell_subs[d][c])
        closure[d] = ids
    loc_ids = []
    for s, sp in enumerate(spaces):
        ids = []
        for (d, sid), (off, cnt) in sorted(sp.blocks.items()):
            if sid in closure[d]:
                ids.extend(range(off, off + cnt))
        loc_ids.append(np.array(sorted(ids), dtype=int))
    dims = [len(i) for i in loc_ids]
    dlocs = [dmats[s][np.ix_(loc_ids[s + 1], loc_ids[s])] for s in range(mesh.dim)]
    return dims, dlocs


def verify_exactness(mesh, family, k, layers_max=2, spaces=None, dmats=None):
    """Rank identities globally and on every h- and layer-extended patch."""
    if spaces is None:
        spaces = [FeSpace(mesh, family, k, s) for s in range(mesh.dim + 1)]
    if dmats is None:
        dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(mesh.dim)]

    def run():
        failures = []
        total = 0
        all_cells = tuple(range(mesh.n_simplices(mesh.dim)))
        ok, details = rank_identities(*_patch_restriction(mesh, spaces, dmats, all_cells))
        total += 1
        if not ok:
            failures.append({"patch": "global", "details": details})
        for d in range(mesh.dim + 1):
            for sid in range(mesh.n_simplices(d)):
                patches = [("h", mesh.h_patch(d, sid))]
                for ell in range(layers_max + 1):
                    patches.append((f"layer{ell}", mesh.extended_patch(d, sid, ell)))
                for kind, patch in patches:
                    ok, details = rank_identities(
                        *_patch_restriction(mesh, spaces, dmats, patch.cells)
                    )
                    total += 1
                    if not ok:
                        failures.append(
                            {"patch": f"{kind}({d},{sid})", "details": _jsonable(details)}
                        )
        return failures, total

    (failures, total), secs = _timed(run)
    status = "pass" if not failures else "fail"
    return CheckRecord(
        name=f"exactness[{family},k={k}]",
        status=status,
        data={"patches_checked": total, "failures": failures[:10], "n_failed": len(failures)},
        tolerance=RANK_TOL,
        seconds=secs,
    )


# -- assumptions ------------------------------------------------------------------


def verify_assumptions(mesh, family, k, spaces=None):
    """Span condition, constant annihilation, and locality of the DOF blocks."""
    if spaces is None:
        spaces = [FeSpace(mesh, family, k, s) for s in range(mesh.dim + 1)]
    records = []

    def span():
        worst = 0.0
        for s in range(mesh.dim):
            rep = check_span_condition(spaces[s], spaces[s + 1])
            worst = max(worst, rep["max_residual"])
        return worst

    worst, secs = _timed(span)
    records.append(
        CheckRecord(
            name="span_condition",
            status="pass" if worst < SPAN_TOL else "fail",
            data={"max_residual": worst},
            tolerance=SPAN_TOL,
            seconds=secs,
        )
    )

    def const():
        sp0 = spaces[0]
        one = BaryPoly.constant(mesh.dim, 1.0)
        cells = set(range(mesh.n_simplices(mesh.dim)))
        worst = 0.0
        for d in range(mesh.dim + 1):
            for sid in range(mesh.n_simplices(d)):
                out = eval_L_field(sp0, (d, sid), lambda c: one, cells)
                if out.size:
                    worst = max(worst, float(np.abs(out).max()))
        return worst

    worst, secs = _timed(const)
    records.append(
        CheckRecord(
            name="constant_annihilation",
            status="pass" if worst < CONST_TOL else "fail",
            data={"max_value": worst},
            tolerance=CONST_TOL,
            seconds=secs,
        )
    )

    def support():
        bad = 0
        for s, sp in enumerate(spaces):
            for (d, sid), (off, cnt) in sp.blocks.items():
                star = set(int(c) for c in mesh.star[d][sid])
                unit = np.zeros(sp.ndofs)
                for gid in range(off, off + cnt):
                    unit[:] = 0.0
                    unit[gid] = 1.0
                    for c in range(mesh.n_simplices(mesh.dim)):
                        if c not in star and sp.cell_poly(c, unit).max_abs() != 0.0:
                            bad += 1
        return bad

    bad, secs = _timed(support)
    records.append(
        CheckRecord(
            name="local_support",
            status="pass" if bad == 0 else "fail",
            data={"violations": bad},
            tolerance=0.0,
            seconds=secs,
        )
    )

    def probe():
        # L_sigma must not see input changes outside the star patch
        sp0 = spaces[0]
        rng = np.random.default_rng(0)
        cells = set(range(mesh.n_simplices(mesh.dim)))
        worst = 0.0
        for d in range(mesh.dim + 1):
            for sid in range(mesh.n_simplices(d)):
                star = set(int(c) for c in mesh.star[d][sid])
                far = cells - star
                if not far:
                    continue
                base = BaryPoly.constant(mesh.dim, 0.0)
                coeffs = rng.standard_normal(3)
                poly = BaryPoly.zero(mesh.dim, 1)
                poly.coeffs[: min(3, poly.coeffs.shape[0])] = coeffs[
                    : min(3, poly.coeffs.shape[0])
                ]

                def base_provider(c):
                    return poly

                def bumped_provider(c):
                    if c in far:
                        return poly + BaryPoly.constant(mesh.dim, 7.5).raised(1)
                    return poly

                a = eval_L_field(sp0, (d, sid), base_provider, cells)
                b = eval_L_field(sp0, (d, sid), bumped_provider, cells)
                if not np.array_equal(a, b):
                    worst = max(worst, float(np.abs(a - b).max()))
        return worst

    worst, secs = _timed(probe)
    records.append(
        CheckRecord(
            name="dof_locality_probe",
            status="pass" if worst == 0.0 else "fail",
            data={"max_change": worst},
            tolerance=0.0,
            seconds=secs,
        )
    )

    def distinguished():
        missing = 0
        for s, sp in enumerate(spaces):
            missing += int(
                len(sp.distinguished_id) != mesh.n_simplices(s)
            )
        return missing

    missing, secs = _timed(distinguished)
    records.append(
        CheckRecord(
            name="distinguished_dofs_present",
            status="pass" if missing == 0 else "fail",
            data={"missing_slots": missing},
            tolerance=0.0,
            seconds=secs,
        )
    )
    return records


def verify_unisolvency(mesh, family, k):
    """Per-slot reference and physical-cell unisolvency with condition stats."""
    records = []
    for slot in range(mesh.dim + 1):
        def run():
            sp = FeSpace(mesh, family, k, slot)
            rep = check_unisolvency(sp, cell=0)
            mutant = check_unisolvency(sp, cell=0, inject_duplicate=True)
            cond = float(sp.cell_condition.max())
            return rep, mutant, cond

        (rep, mutant, cond), secs = _timed(run)
        good = rep["invertible"] and not mutant["invertible"]
        records.append(
            CheckRecord(
                name=f"unisolvency_slot{slot}",
                status="pass" if good else "fail",
                data={
                    "condition": rep["condition"],
                    "max_cell_condition": cond,
                    "duplicate_mutant_rejected": not mutant["invertible"],
                },
                tolerance=1e-10,
                seconds=secs,
            )
        )
    return records


# -- locality probes ------------------------------------------------------------------


class _BumpedField:
    """Base field plus a constant bump on a set of cells (cellwise data probe)."""

    def __init__(self, base, bump_cells, bump_value, dfield=None):
        self.base = base
        self.mesh = base.mesh
        self.arity = base.arity
        self.batch = base.batch
        self.bump_cells = set(int(c) for c in bump_cells)
        self.bump_value = np.asarray(bump_value, dtype=float)
        self._dfield = dfield

    def eval_cell(self, cell, bary_pts):
        vals = np.asarray(self.base.eval_cell(cell, bary_pts))
        if cell in self.bump_cells:
            add = self.bump_value
            vals = vals + add.reshape((1,) + add.shape + (1,) * (vals.ndim - 1 - add.ndim))
        return vals

    def differential(self):
        # a cellwise-constant bump has vanishing differential
        if self._dfield is None:
            return self.base.differential()
        return self._dfield


def locality_probe(P: CommutingProjector, slot, cell, rng=None):
    """Far perturbations leave the cell's DOFs bitwise unchanged; near ones must not."""
    mesh = P.mesh
    rng = rng or np.random.default_rng(0)
    radius = P.radius(slot)
    patch = mesh.extended_patch(mesh.dim, cell, radius)
    far = sorted(set(range(mesh.n_simplices(mesh.dim))) - set(patch.cells))

    sp = P.spaces[slot]
    probe_ids = []
    for d in range(mesh.dim + 1):
        for sid in (int(s) for s in mesh.cell_subs[d][cell]):
            blk = sp.blocks.get((d, sid))
            if blk:
                probe_ids.extend(range(blk[0], blk[0] + blk[1]))
    probe_ids = np.array(sorted(probe_ids), dtype=int)

    def run():
        base = random_poly_field(mesh, slot, max(P.k - 1, 1), rng)
        bump = rng.standard_normal(sp.arity if sp.arity > 1 else ()) + 1.0
        out0 = P.project(slot, base)
        if far:
            far_field = _BumpedField(base, far, bump)
            out1 = P.project(slot, far_field)
            far_identical = bool(np.array_equal(out0[probe_ids], out1[probe_ids]))
        else:
            far_identical = None
        near_field = _BumpedField(base, [cell], bump)
        out2 = P.project(slot, near_field)
        near_changed = bool(not np.array_equal(out0[probe_ids], out2[probe_ids]))
        return far_identical, near_changed

    (far_identical, near_changed), secs = _timed(run)
    if far_identical is None:
        status = "skipped"
    else:
        status = "pass" if (far_identical and near_changed) else "fail"
    return CheckRecord(
        name=f"locality_slot{slot}_cell{cell}",
        status=status,
        data={
            "radius": radius,
            "far_cells": len(far),
            "far_identical": far_identical,
            "near_changed": near_changed,
        },
        tolerance=0.0,
        seconds=secs,
    )


def locality_sweep(P: CommutingProjector, slot, rng=None):
    """Probe every cell; pass iff every probe with a nonempty far region passes."""
    rng = rng or np.random.default_rng(2024)
    records = [
        locality_probe(P, slot, c, rng) for c in range(P.mesh.n_simplices(P.mesh.dim))
    ]
    probed = [r for r in records if r.status != "skipped"]
    ok = all(r.status == "pass" for r in probed)
    return CheckRecord(
        name=f"locality_sweep_slot{slot}",
        status="pass" if ok and probed else ("skipped" if not probed else "fail"),
        data={
            "probed": len(probed),
            "skipped": len(records) - len(probed),
            "failures": [r.name for r in probed if r.status != "pass"],
        },
        tolerance=0.0,
        seconds=sum(r.seconds for r in records),
    )


# -- boundedness ---------------------------------------------------------------------


def _cell_graph_norm(space, cell, coeffs):
    M = space.local_mass(cell)
    local = np.asarray(coeffs)[space.cell_dofs[cell]]
    val = np.einsum("i...,ij,j...->...", local, M, local)
    if space.slot < space.mesh.dim:
        S = space.local_stiff(cell, slot_diff(space.mesh.dim, space.slot))
        val = val + np.einsum("i...,ij,j...->...", local, S, local)
    return np.sqrt(val)


def _field_patch_norm(P, slot, field, cells):
    """Graph norm of an analytic input over a set of cells (with differential)."""
    sp = P.spaces[slot]
    rule = simplex_quadrature(P.mesh.dim, sp.quad_degree + P.quad_bump)
    total = 0.0
    dfield = field.differential() if slot < P.mesh.dim else None
    for c in cells:
        geom = P.mesh.cell_geometry(c)
        scale = geom.measure * math.factorial(P.mesh.dim)
        fv = np.asarray(field.eval_cell(c, rule.points))
        sq = fv * fv if sp.arity == 1 else np.einsum("na,na->n", fv, fv)
        total += scale * (rule.weights @ sq)
        if dfield is not None:
            dv = np.asarray(dfield.eval_cell(c, rule.points))
            dsq = dv * dv if dv.ndim == 1 else np.einsum("na,na->n", dv, dv)
            total += scale * (rule.weights @ dsq)
    return math.sqrt(total)


def boundedness_study(mesh0, family, k, refinements=3, drift_bound=2.0):
    """Norm-ratio drift of the projections and patch operators under refinement."""

    def run():
        meshes = [mesh0]
        for _ in range(refinements):
            meshes.append(meshes[-1].refined())
        pi0_ratios, pi1_ratios, r_norms, q_norms = [], [], [], []
        for mesh in meshes:
            P = CommutingProjector(mesh, family, k, check_vertex_values=False)
            u = PolyField(mesh, _quadratic_scalar(mesh.dim), 0)
            cu = P.project0(u)
            worst0 = 0.0
            for c in range(mesh.n_simplices(mesh.dim)):
                num = float(_cell_graph_norm(P.spaces[0], c, cu))
                den = _field_patch_norm(P, 0, u, mesh.extended_patch(mesh.dim, c, 1).cells)
                worst0 = max(worst0, num / max(den, 1e-30))
            pi0_ratios.append(worst0)

            v = PolyField(mesh, _linear_vector(mesh.dim), 1)
            cv = P.project1(v)
            worst1 = 0.0
            for c in range(mesh.n_simplices(mesh.dim)):
                num = float(_cell_graph_norm(P.spaces[1], c, cv))
                den = _field_patch_norm(P, 1, v, mesh.extended_patch(mesh.dim, c, 2).cells)
                worst1 = max(worst1, num / max(den, 1e-30))
            pi1_ratios.append(worst1)

            rn, qn = 0.0, 0.0
            for v0 in range(mesh.n_simplices(0)):
                pc = P.star_pc((0, v0))
                for kk in range(1, mesh.dim + 1):
                    rn = max(rn, pc.operator_norm_R(kk))
                for kk in range(mesh.dim + 1):
                    qn = max(qn, pc.operator_norm_Q(kk))
            r_norms.append(rn)
            q_norms.append(qn)
        return meshes, pi0_ratios, pi1_ratios, r_norms, q_norms

    (meshes, pi0_ratios, pi1_ratios, r_norms, q_norms), secs = _timed(run)

    def drift(seq):
        return max(seq) / max(min(seq), 1e-30)

    drifts = {
        "pi0": drift(pi0_ratios),
        "pi1": drift(pi1_ratios),
        "R": drift(r_norms),
        "Q": drift(q_norms),
    }
    ok = all(v < drift_bound for v in drifts.values())
    return CheckRecord(
        name=f"boundedness[{family},k={k}]",
        status="pass" if ok else "fail",
        data={
            "meshes": [m.n_simplices(m.dim) for m in meshes],
            "pi0_ratios": pi0_ratios,
            "pi1_ratios": pi1_ratios,
            "R_norms": r_norms,
            "Q_norms": q_norms,
            "drift": drifts,
        },
        tolerance=drift_bound,
        seconds=secs,
    )


def _quadratic_scalar(dim):
    from .fields import CartesianPoly
    from .poly import multi_indices

    p = CartesianPoly.zero(dim, 2)
    mi = [tuple(a) for a in multi_indices(dim, 2)]
    for axis in range(dim):
        e = tuple(2 if j == axis else 0 for j in range(dim))
        p.coeffs[mi.index(e)] = 1.0
    return p


def _linear_vector(dim):
    from .fields import CartesianPoly
    from .poly import multi_indices

    p = CartesianPoly.zero(dim, 1, (dim,))
    mi = [tuple(a) for a in multi_indices(dim, 1)]
    for axis in range(dim):
        e = tuple(1 if j == axis else 0 for j in range(dim))
        p.coeffs[mi.index(e), axis] = 1.0
        p.coeffs[0, axis] = 0.5 * (axis + 1)
    return p


def scaling_invariance(mesh, family, k, factor=2.0):
    """Per-unit-scaled norm ratios agree between the mesh and its dilation."""

    def run():
        dim = mesh.dim
        P1 = CommutingProjector(mesh, family, k, check_vertex_values=False)
        mesh2 = mesh.scaled(factor)
        P2 = CommutingProjector(mesh2, family, k, check_vertex_values=False)
        u1 = PolyField(mesh, _quadratic_scalar(dim), 0)
        # pulled-back input: u2(x) = u1(x / factor)
        q2 = _quadratic_scalar(dim)
        for idx, a in enumerate(multi_indices(dim, 2)):
            q2.coeffs[idx] /= factor ** int(sum(a))
        u2 = PolyField(mesh2, q2, 0)
        c1 = P1.project0(u1)
        c2 = P2.project0(u2)
        worst = 0.0
        for c in range(mesh.n_simplices(dim)):
            l2_1 = _cell_l2(P1.spaces[0], c, c1)
            l2_2 = _cell_l2(P2.spaces[0], c, c2)
            semi_1 = _cell_semi(P1.spaces[0], c, c1)
            semi_2 = _cell_semi(P2.spaces[0], c, c2)
            # units: L2 scales by factor^(d/2), the seminorm by factor^(d/2 - 1)
            worst = max(worst, abs(l2_2 / l2_1 - factor ** (dim / 2)) / factor ** (dim / 2))
            worst = max(
                worst, abs(semi_2 / semi_1 - factor ** (dim / 2 - 1)) / factor ** (dim / 2 - 1)
            )
        return worst

    worst, secs = _timed(run)
    return CheckRecord(
        name=f"scaling_invariance[{family},k={k}]",
        status="pass" if worst < 1e-9 else "fail",
        data={"max_relative_mismatch": worst},
        tolerance=1e-9,
        seconds=secs,
    )


def _cell_l2(space, cell, coeffs):
    local = np.asarray(coeffs)[space.cell_dofs[cell]]
    return float(np.sqrt(local @ space.local_mass(cell) @ local))


def _cell_semi(space, cell, coeffs):
    local = np.asarray(coeffs)[space.cell_dofs[cell]]
    S = space.local_stiff(cell, slot_diff(space.mesh.dim, space.slot))
    return float(np.sqrt(local @ S @ local))


# -- report emission ---------------------------------------------------------------


def emit_report(report: VerificationReport, path, include_timings=False):
    """Write the report as deterministic JSON (timings zeroed by default)."""
    payload = _jsonable(report.as_dict(include_timings=include_timings))
    text = json.dumps(payload, indent=2, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")
    return path
