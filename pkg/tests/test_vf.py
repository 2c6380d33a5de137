import numpy as np
import pytest

from conftest import make_icosphere, make_planar_quad
from oracles import qp_enumerate
from ribfence.geometry import TriMesh
from ribfence.vf import (
    ConstraintSet,
    FilterConfig,
    FilterError,
    PenetrationFaultError,
    build_constraints,
    filter_step,
    solve_qp,
)

CFG = FilterConfig()


def _random_rows(rng, m):
    n = rng.normal(size=(m, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    b = rng.uniform(-0.02, 0.008, size=m)
    z = np.arange(m, dtype=np.int64)
    return ConstraintSet(A=n, b=b, faces=z, conditions=np.ones(m, dtype=np.int8),
                         kinds=np.zeros(m, dtype=np.int8), features=z)


# ---------------------------------------------------------------------------
# QP solver
# ---------------------------------------------------------------------------

def test_qp_unconstrained_passthrough():
    dxd = np.array([0.001, -0.002, 0.0005])
    res = solve_qp(dxd, ConstraintSet.empty(), CFG)
    np.testing.assert_array_equal(res.dx, dxd)
    assert not res.clamped
    assert len(res.active) == 0


def test_qp_single_plane_projection():
    cs = ConstraintSet(A=np.array([[0.0, 0.0, 1.0]]), b=np.array([0.0]),
                       faces=np.array([0]), conditions=np.array([1], dtype=np.int8),
                       kinds=np.array([0], dtype=np.int8), features=np.array([-1]))
    res = solve_qp(np.array([0.001, 0.0, -0.002]), cs, CFG)
    np.testing.assert_allclose(res.dx, [0.001, 0.0, 0.0], atol=1e-12)
    assert res.clamped
    assert list(res.active) == [0]


def test_qp_matches_enumeration_oracle():
    rng = np.random.default_rng(21)
    checked = 0
    for _ in range(500):
        m = int(rng.integers(1, 9))
        cs = _random_rows(rng, m)
        dxd = rng.uniform(-0.005, 0.005, size=3)
        want = qp_enumerate(dxd, cs.A, cs.b)
        res = solve_qp(dxd, cs, CFG)
        if want is None:
            continue  # no feasible point found by the oracle; nothing to compare
        checked += 1
        assert not res.degenerate
        np.testing.assert_allclose(res.dx, want, atol=1e-8)
        assert np.min(cs.A @ res.dx - cs.b) >= -CFG.tol
    assert checked > 400


def test_qp_monotone_restriction():
    rng = np.random.default_rng(23)
    for _ in range(100):
        m = int(rng.integers(2, 9))
        cs = _random_rows(rng, m)
        b = -np.abs(cs.b)  # keep every prefix feasible at dx = 0
        dxd = rng.uniform(-0.005, 0.005, size=3)
        prev = -1.0
        for k in range(1, m + 1):
            sub = ConstraintSet(A=cs.A[:k], b=b[:k], faces=cs.faces[:k],
                                conditions=cs.conditions[:k], kinds=cs.kinds[:k],
                                features=cs.features[:k])
            res = solve_qp(dxd, sub, CFG)
            dev = float(np.linalg.norm(res.dx - dxd))
            assert dev >= prev - 1e-12
            prev = dev


def test_qp_optimality_vs_random_feasible_points():
    rng = np.random.default_rng(29)
    for _ in range(30):
        m = int(rng.integers(1, 7))
        cs = _random_rows(rng, m)
        dxd = rng.uniform(-0.005, 0.005, size=3)
        res = solve_qp(dxd, cs, CFG)
        if res.degenerate:
            continue
        cost = np.linalg.norm(res.dx - dxd)
        samples = rng.uniform(-0.02, 0.02, size=(3000, 3))
        feas = samples[np.all(samples @ cs.A.T - cs.b >= 0.0, axis=1)]
        if len(feas):
            assert cost <= np.linalg.norm(feas - dxd, axis=1).min() + 1e-9


def test_qp_deterministic():
    rng = np.random.default_rng(31)
    cs = _random_rows(rng, 6)
    dxd = np.array([0.003, -0.001, 0.002])
    a = solve_qp(dxd, cs, CFG)
    b = solve_qp(dxd, cs, CFG)
    assert np.array_equal(a.dx, b.dx)
    assert np.array_equal(a.active, b.active)
    assert a.clamped == b.clamped and a.degenerate == b.degenerate


# ---------------------------------------------------------------------------
# constraint assembly
# ---------------------------------------------------------------------------

def _big_triangle():
    v = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 2.0, 0.0]])
    return TriMesh(v, np.array([[0, 1, 2]]))


def test_single_face_interior_constraint():
    mesh = _big_triangle()
    x = np.array([0.0, 0.0, 0.03])
    cs = build_constraints(mesh, x, CFG)
    assert len(cs) == 1
    np.testing.assert_allclose(cs.A[0], [0.0, 0.0, 1.0], atol=1e-12)
    assert abs(cs.b[0] - (CFG.probe_radius - 0.03)) < 1e-12
    assert cs.conditions[0] == 1
    assert cs.faces[0] == 0


def test_convex_edge_radial_constraint():
    # tent: two faces meeting at a ridge, outside below
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, -1.0, 1.0], [0.5, 1.0, 1.0]])
    f = np.array([[0, 1, 2], [1, 0, 3]])
    mesh = TriMesh(v, f)
    x = np.array([0.5, 0.0, -0.04])
    cs = build_constraints(mesh, x, CFG)
    assert len(cs) == 1  # both faces report the same radial plane; dedup collapses them
    np.testing.assert_allclose(cs.A[0], [0.0, 0.0, -1.0], atol=1e-12)
    assert cs.conditions[0] == 2
    assert abs(cs.b[0] - (CFG.probe_radius - 0.04)) < 1e-12


def test_concave_crease_two_face_planes():
    # asymmetric valley: wing A dips, wing B rises; x hovers over B's side so
    # A's closest point clamps onto the shared edge
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, -1.0, -0.3], [0.5, 1.0, 0.8]])
    f = np.array([[1, 0, 2], [0, 1, 3]])
    mesh = TriMesh(v, f)
    n_a = np.array([0.0, -0.3, 1.0]) / np.linalg.norm([0.0, -0.3, 1.0])
    n_b = np.array([0.0, -0.8, 1.0]) / np.linalg.norm([0.0, -0.8, 1.0])
    x = np.array([0.5, 0.25, 0.5])
    cfg = FilterConfig(cull_radius=2.0)  # unit-scale geometry needs a wide cull
    cs = build_constraints(mesh, x, cfg)
    assert len(cs) == 2
    by_face = {int(cs.faces[i]): i for i in range(2)}
    ia, ib = by_face[0], by_face[1]
    np.testing.assert_allclose(cs.A[ia], n_a, atol=1e-12)
    np.testing.assert_allclose(cs.A[ib], n_b, atol=1e-12)
    assert cs.conditions[ia] == 3  # edge clamp on the concave crease
    assert cs.conditions[ib] == 1  # interior hit on the facing wing
    # dense direction sweep: filtered motion never crosses either face plane
    rng = np.random.default_rng(37)
    for _ in range(200):
        d = rng.normal(size=3)
        d *= 0.002 / np.linalg.norm(d)
        res = solve_qp(d, cs, CFG)
        assert np.min(cs.A @ res.dx - cs.b) >= -CFG.tol


def test_coplanar_faces_dedup_to_one_row():
    quad = make_planar_quad()
    x = np.array([0.7, 0.3, 0.02])
    cs = build_constraints(quad, x, CFG)
    assert len(cs) == 1
    np.testing.assert_allclose(cs.A[0], [0.0, 0.0, 1.0], atol=1e-12)


def test_penetration_fault_inside_sphere():
    sphere = make_icosphere(2)
    with pytest.raises(PenetrationFaultError):
        build_constraints(sphere, np.array([0.97, 0.0, 0.0]), CFG)
    # just outside: no fault, constraints present
    cs = build_constraints(sphere, np.array([1.02, 0.0, 0.0]), CFG)
    assert len(cs) >= 1


def test_constraint_cap_keeps_most_binding():
    sphere = make_icosphere(3, radius=0.03)
    x = np.array([0.0, 0.0, 0.0345])
    cfg = FilterConfig(probe_radius=0.004, cull_radius=0.02, n_max=16)
    cs = build_constraints(sphere, x, cfg)
    assert len(cs) == 16


def test_config_invariants():
    with pytest.raises(FilterError):
        FilterConfig(probe_radius=0.0)
    with pytest.raises(FilterError):
        FilterConfig(cull_radius=0.012)
    with pytest.raises(FilterError):
        FilterConfig(n_max=4)


# ---------------------------------------------------------------------------
# filter_step
# ---------------------------------------------------------------------------

def test_filter_step_far_from_fixture_passthrough():
    mesh = _big_triangle()
    x = np.array([0.0, 0.0, 0.5])
    x_ref = x + np.array([0.002, 0.001, -0.003])
    out, res = filter_step(x, x_ref, mesh, CFG)
    np.testing.assert_array_equal(out, x_ref)
    assert not res.clamped


def test_filter_step_rejects_oversized_reference_jump():
    mesh = _big_triangle()
    with pytest.raises(FilterError):
        filter_step(np.zeros(3) + [0, 0, 0.5], np.array([0.0, 0.0, 0.6]), mesh, CFG)


def test_filter_step_presses_onto_offset_surface():
    mesh = _big_triangle()
    x = np.array([0.0, 0.0, 0.03])
    for _ in range(40):
        x, res = filter_step(x, x - [0.0, 0.0, 0.002], mesh, CFG)
    assert abs(x[2] - CFG.probe_radius) < 1e-6
    assert res.clamped


def test_filter_step_slides_tangentially():
    mesh = _big_triangle()
    x = np.array([-0.3, 0.0, 0.015])
    start = x.copy()
    tangential = 0.0
    for _ in range(60):
        step = np.array([0.001, 0.0, -0.0005])
        tangential += step[0]
        x, _ = filter_step(x, x + step, mesh, CFG)
    assert abs(x[2] - CFG.probe_radius) < 1e-6
    # tangential progress is not sacrificed while pressing in
    assert x[0] - start[0] >= 0.9 * tangential
