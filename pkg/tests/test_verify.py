import json

import numpy as np
import pytest

from derham.elements import FeSpace, diff_matrix
from derham.mesh import structured_mesh
from derham.projector import CommutingProjector
from derham.verify import (
    CheckRecord,
    boundedness_study,
    emit_report,
    locality_probe,
    locality_sweep,
    new_report,
    rank_identities,
    scaling_invariance,
    verify_assumptions,
    verify_exactness,
    verify_unisolvency,
)


@pytest.fixture(scope="module")
def lrt1_n2_proj():
    return CommutingProjector(structured_mesh(2, 2), "lrt", 1)


def test_exactness_lrt1_n2():
    mesh = structured_mesh(2, 2)
    rec = verify_exactness(mesh, "lrt", 1)
    assert rec.status == "pass"
    assert rec.data["n_failed"] == 0
    # global + (h + layers 0..2) for every simplex
    assert rec.data["patches_checked"] == 1 + 4 * (9 + 16 + 8)


def test_exactness_whitney_n1():
    mesh = structured_mesh(3, 1)
    rec = verify_exactness(mesh, "whitney3d", 1)
    assert rec.status == "pass", rec.data


def test_exactness_mutant_detected():
    mesh = structured_mesh(2, 1)
    spaces = [FeSpace(mesh, "lrt", 1, s) for s in range(3)]
    dmats = [diff_matrix(spaces[s], spaces[s + 1]) for s in range(2)]
    dmats[0] = np.zeros_like(dmats[0])  # dead differential: head kernel explodes
    rec = verify_exactness(mesh, "lrt", 1, spaces=spaces, dmats=dmats)
    assert rec.status == "fail"
    assert rec.data["n_failed"] > 0


def test_rank_identities_direct():
    ok, details = rank_identities([2, 1], [np.array([[1.0, -1.0]])])
    assert ok and details["euler"] == 1


@pytest.mark.parametrize("family,k", [("lrt", 2), ("hs", 3)])
def test_assumptions_pass(family, k):
    mesh = structured_mesh(2, 1)
    records = verify_assumptions(mesh, family, k)
    assert all(r.status == "pass" for r in records), [
        (r.name, r.status, r.data) for r in records
    ]
    names = {r.name for r in records}
    assert {"span_condition", "constant_annihilation", "local_support", "dof_locality_probe"} <= names


def test_unisolvency_records():
    mesh = structured_mesh(2, 1)
    records = verify_unisolvency(mesh, "lbdm", 2)
    assert len(records) == 3
    assert all(r.status == "pass" for r in records)
    assert all(r.data["duplicate_mutant_rejected"] for r in records)


def test_locality_probe_pi0(lrt1_n2_proj):
    P = lrt1_n2_proj
    rec = locality_probe(P, 0, 0)
    assert rec.status == "pass"
    assert rec.data["far_identical"] is True
    assert rec.data["near_changed"] is True


def test_locality_probe_vacuous_is_skipped(lrt1_n2_proj):
    P = lrt1_n2_proj
    # radius-2 patch of any cell covers all 8 cells on the 2x2 mesh
    rec = locality_probe(P, 1, 0)
    assert rec.status == "skipped"


def test_locality_sweep_slot0(lrt1_n2_proj):
    rec = locality_sweep(lrt1_n2_proj, 0)
    assert rec.status == "pass"
    assert rec.data["probed"] == 8


def test_boundedness_study_small():
    rec = boundedness_study(structured_mesh(2, 1), "lrt", 1, refinements=2)
    assert rec.status == "pass", rec.data
    assert len(rec.data["pi0_ratios"]) == 3
    assert all(np.isfinite(v) for v in rec.data["pi0_ratios"])


def test_scaling_invariance():
    rec = scaling_invariance(structured_mesh(2, 1), "lrt", 1)
    assert rec.status == "pass", rec.data


def test_report_roundtrip_and_determinism(tmp_path):
    mesh = structured_mesh(2, 1)
    rep = new_report(mesh, "lrt", 1, {"seed": 7})
    rep.add(CheckRecord("alpha", "pass", {"x": 1.0}, 1e-9, seconds=0.123))
    rep.add(CheckRecord("beta", "fail", {"y": [1, 2]}, None, seconds=0.456))
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    emit_report(rep, p1)
    emit_report(rep, p2)
    assert p1.read_bytes() == p2.read_bytes()
    data = json.loads(p1.read_text())
    assert data["schema_version"] == 1
    assert [c["name"] for c in data["checks"]] == ["alpha", "beta"]
    assert all(c["seconds"] == 0.0 for c in data["checks"])
    assert data["mesh"]["cells"] == 2
    # pass/fail counts equal record count
    statuses = [c["status"] for c in data["checks"]]
    assert len(statuses) == 2 and statuses.count("pass") + statuses.count("fail") == 2


def test_empty_report_valid(tmp_path):
    mesh = structured_mesh(2, 1)
    rep = new_report(mesh, "lrt", 1)
    path = emit_report(rep, tmp_path / "empty.json")
    data = json.loads(open(path).read())
    assert data["checks"] == []
