"""Torso generation, chamfer fitting and anthropometric measures."""
import numpy as np
import pytest

from ribfence.body import (
    BodyError,
    FORMAT_VERSION,
    PointCloud,
    PoseParams,
    ShapeParams,
    chamfer_distance,
    fit_body,
    generate_body,
    load_cloud,
    measure,
    sample_skin,
    sample_surface,
    _fd_gradient,
    _skin_vertices,
)
from ribfence.geometry import mesh_closest_point, point_inside

from oracles import brute_chamfer


@pytest.fixture(scope="module")
def default_body():
    return generate_body(ShapeParams(), PoseParams())


@pytest.fixture(scope="module")
def posed_body():
    pose = PoseParams(rot=np.array([0.1, 0.2, -0.05]), trans=np.array([0.3, -0.1, 0.2]),
                      flexion=0.3, lateral=-0.2, twist=0.25, shoulder_tilt=0.15)
    return generate_body(ShapeParams(), pose)


# ---------------------------------------------------------------------------
# parameter types
# ---------------------------------------------------------------------------

def test_shape_params_validation():
    with pytest.raises(BodyError):
        ShapeParams(height=-0.1)
    with pytest.raises(BodyError):
        ShapeParams(chest_half_width=0.0)
    with pytest.raises(BodyError):
        ShapeParams(squareness=1.5)
    with pytest.raises(BodyError):
        ShapeParams(squareness=6.5)
    with pytest.raises(BodyError):
        ShapeParams(rib_spacing=0.5)
    with pytest.raises(BodyError):
        ShapeParams(rib_spacing=2.0)
    with pytest.raises(BodyError):
        ShapeParams(spine_offset=np.nan)


def test_pose_params_validation():
    with pytest.raises(BodyError):
        PoseParams(flexion=np.pi / 2 + 0.01)
    with pytest.raises(BodyError):
        PoseParams(twist=-2.0)
    with pytest.raises(BodyError):
        PoseParams(rot=np.array([3.0, 3.0, 3.0]))  # magnitude > pi


def test_shape_vector_roundtrip():
    s = ShapeParams(height=0.7, squareness=3.0)
    assert ShapeParams.from_vector(s.as_vector()) == s
    with pytest.raises(BodyError):
        ShapeParams.from_vector(np.zeros(9))


def test_json_roundtrip():
    s = ShapeParams(height=0.66, waist_half_width=0.13)
    assert ShapeParams.from_json(s.to_json()) == s
    p = PoseParams(rot=np.array([0.1, -0.2, 0.05]), trans=np.array([1.0, 2.0, 3.0]),
                   flexion=0.3, twist=-0.1)
    q = PoseParams.from_json(p.to_json())
    assert np.allclose(q.rot, p.rot) and np.allclose(q.trans, p.trans)
    assert q.joints() == pytest.approx(p.joints())
    assert f'"format_version": {FORMAT_VERSION}' in s.to_json()


def test_json_rejects_wrong_version_or_kind():
    s = ShapeParams()
    doc = s.to_json().replace(f'"format_version": {FORMAT_VERSION}',
                              '"format_version": 99')
    with pytest.raises(BodyError):
        ShapeParams.from_json(doc)
    with pytest.raises(BodyError):
        PoseParams.from_json(s.to_json())  # kind mismatch


def test_point_cloud_validation():
    with pytest.raises(BodyError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(BodyError):
        PointCloud(np.array([[0.0, 0.0, np.inf]]))
    pc = PointCloud(np.zeros((5, 3)))
    assert len(pc) == 5


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_default_body_closed_outward(default_body):
    b = default_body
    assert b.skin.is_closed()
    assert b.skin.signed_volume() > 0
    assert b.rib_mesh.is_closed()
    assert b.rib_mesh.signed_volume() > 0
    assert point_inside(b.skin, b.spine_center)
    assert np.linalg.norm(b.spine_axis) == pytest.approx(1.0, abs=1e-12)
    for name in ("shoulder_left", "shoulder_right", "sternum", "crotch"):
        assert name in b.landmarks


def test_generate_deterministic(default_body):
    again = generate_body(ShapeParams(), PoseParams())
    assert np.array_equal(again.skin.vertices, default_body.skin.vertices)
    assert np.array_equal(again.skin.faces, default_body.skin.faces)
    assert np.array_equal(again.rib_mesh.vertices, default_body.rib_mesh.vertices)


def test_chest_width_monotonic(default_body):
    wide = generate_body(ShapeParams(chest_half_width=2 * 0.17), PoseParams())
    assert measure(wide)["CC"] > measure(default_body)["CC"]


def test_generate_rejects_bad_inputs():
    with pytest.raises(BodyError):
        generate_body(ShapeParams(), PoseParams(), resolution=8)
    with pytest.raises(BodyError):
        generate_body(ShapeParams(shoulder_drop=0.5), PoseParams())


def test_rib_border_sets(default_body, posed_body):
    b = default_body
    assert len(b.rib_border_sets) == 12
    spine = np.array([0.0, 0.0, -1.0])  # spine meridian direction in section plane
    for (side, idx), (sup, inf) in b.rib_border_sets.items():
        assert len(sup) >= 8 and len(inf) >= 8
        assert side in ("left", "right") and 1 <= idx <= 6
        # ordered laterally away from the spine meridian
        pts = b.rib_mesh.vertices[sup]
        ang = np.arctan2(pts[:, 0] if side == "right" else -pts[:, 0], -pts[:, 2])
        assert np.all(np.diff(ang) > 0)
        # superior border sits above the inferior one
        assert np.all(b.rib_mesh.vertices[sup][:, 1] > b.rib_mesh.vertices[inf][:, 1])
    # indices never depend on the parameter values
    other = generate_body(ShapeParams(height=0.72, chest_half_width=0.19,
                                      rib_spacing=1.3), PoseParams())
    for key in b.rib_border_sets:
        for j in (0, 1):
            assert np.array_equal(b.rib_border_sets[key][j],
                                  other.rib_border_sets[key][j])
            assert np.array_equal(b.rib_border_sets[key][j],
                                  posed_body.rib_border_sets[key][j])


def test_posed_body_valid(posed_body):
    assert posed_body.skin.is_closed()
    assert posed_body.skin.signed_volume() > 0
    assert point_inside(posed_body.skin, posed_body.spine_center)


def test_sample_surface_on_mesh(default_body):
    pts = sample_surface(default_body.skin, 64, seed=4)
    for p in pts[:16]:
        d, _, _ = mesh_closest_point(default_body.skin, p)
        assert d < 1e-9
    assert np.array_equal(pts, sample_surface(default_body.skin, 64, seed=4))
    assert not np.array_equal(pts, sample_surface(default_body.skin, 64, seed=5))


def test_sample_skin_avoids_caps(default_body):
    pts = sample_skin(default_body, 500, seed=2)
    h = ShapeParams().height
    # cap discs live exactly at y = 0 and y = h
    assert np.all(pts[:, 1] > 1e-6)
    assert np.all(pts[:, 1] < h - 1e-6)


# ---------------------------------------------------------------------------
# chamfer distance
# ---------------------------------------------------------------------------

def test_chamfer_identical_zero():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(a, a[::-1]) == 0.0  # multiset equality


def test_chamfer_translate_isolated_points():
    # far-apart points: each point's nearest neighbour is its own translate
    g = np.stack(np.meshgrid(*[np.arange(3.0)] * 3), axis=-1).reshape(-1, 3)
    shifted = g + np.array([0.01, 0.0, 0.0])
    assert chamfer_distance(g, shifted) == pytest.approx(2e-4, abs=1e-12)


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = rng.normal(size=(rng.integers(5, 200), 3))
        b = rng.normal(size=(rng.integers(5, 200), 3))
        assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)


def test_chamfer_positive_when_different():
    a = np.zeros((3, 3))
    b = a.copy()
    b[0, 0] = 0.5
    assert chamfer_distance(a, b) > 0


def test_chamfer_rejects_empty():
    with pytest.raises(BodyError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((4, 3)))


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

def test_measure_circle_analytic():
    s = ShapeParams(chest_half_width=0.15, chest_half_depth=0.15, squareness=2.0)
    cc = measure(generate_body(s, PoseParams()))["CC"]
    assert cc == pytest.approx(2 * np.pi * 0.15, abs=5e-4)  # mesh chord error


def test_measure_homogeneity(default_body):
    base = measure(default_body)
    v = ShapeParams().as_vector() * 1.1
    v[7] = ShapeParams().rib_spacing   # unitless params stay put
    v[8] = ShapeParams().squareness
    scaled = measure(generate_body(ShapeParams.from_vector(v), PoseParams()))
    for key in ("CC", "WC", "SCH"):
        assert scaled[key] / base[key] == pytest.approx(1.1, rel=1e-6)


def test_measure_default_plausible(default_body):
    m = measure(default_body)
    assert 0.8 <= m["CC"] <= 1.1
    assert 0.0 < m["WC"] < m["CC"]
    assert m["SCH"] == pytest.approx(ShapeParams().height - ShapeParams().shoulder_drop,
                                     abs=1e-9)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def test_fd_gradient_matches_central_differences():
    rng = np.random.default_rng(8)
    q = rng.normal(size=(4, 4))
    q = q @ q.T + 4 * np.eye(4)
    f = lambda x: float(x @ q @ x)
    x0 = rng.normal(size=4)
    h = 1e-4
    expected = np.array([
        (f(x0 + h * np.eye(4)[i]) - f(x0 - h * np.eye(4)[i])) / (2 * h)
        for i in range(4)])
    got = _fd_gradient(f, x0, h)
    assert np.allclose(got, expected, rtol=1e-4, atol=0)


def test_fit_fixed_point():
    cloud = PointCloud(_skin_vertices(ShapeParams(), PoseParams(), 48))
    body = generate_body(ShapeParams(), PoseParams(), resolution=48)
    fit = fit_body(cloud, body.landmarks, PoseParams(), resolution=48, max_iter=50)
    assert fit.converged
    assert np.abs(fit.shape.as_vector() - ShapeParams().as_vector()).max() < 1e-6
    assert np.abs(fit.pose.rot).max() < 1e-6
    assert np.abs(fit.pose.trans).max() < 1e-6
    assert np.abs(fit.pose.joints()).max() < 1e-6


@pytest.fixture(scope="module")
def recovery_setup():
    gt_shape = ShapeParams(height=0.57, chest_half_width=0.178, chest_half_depth=0.109,
                           waist_half_width=0.144, waist_half_depth=0.110,
                           shoulder_drop=0.057, squareness=2.65)
    gt_pose = PoseParams(rot=np.array([-0.04, 0.06, 0.03]),
                         trans=np.array([-0.05, 0.02, 0.07]),
                         flexion=-0.03, lateral=0.04, twist=-0.05, shoulder_tilt=0.03)
    body = generate_body(gt_shape, gt_pose, resolution=64)
    cloud = PointCloud(sample_skin(body, 2000, seed=11))

    def perturbed(seed, scale_rot=0.1, scale_trans=0.05):
        rng = np.random.default_rng(seed)
        unit = lambda v: v / np.linalg.norm(v)
        dq = rng.uniform(-0.1, 0.1, size=4)
        return PoseParams(rot=gt_pose.rot + scale_rot * unit(rng.normal(size=3)),
                          trans=gt_pose.trans + scale_trans * unit(rng.normal(size=3)),
                          flexion=gt_pose.flexion + dq[0],
                          lateral=gt_pose.lateral + dq[1],
                          twist=gt_pose.twist + dq[2],
                          shoulder_tilt=gt_pose.shoulder_tilt + dq[3])

    fit1 = fit_body(cloud, body.landmarks, perturbed(5), resolution=64, max_iter=100)
    fit2 = fit_body(cloud, body.landmarks, perturbed(17), resolution=64, max_iter=100)
    return gt_shape, fit1, fit2


def test_fit_recovers_shape(recovery_setup):
    gt_shape, fit, _ = recovery_setup
    rel = np.abs(fit.shape.as_vector() - gt_shape.as_vector()) / np.abs(gt_shape.as_vector())
    assert rel.max() < 0.10
    # small-cloud floor: looser than the full-size acceptance bound
    assert fit.residual < 3e-4


def test_fit_basin(recovery_setup):
    _, fit1, fit2 = recovery_setup
    ratio = max(fit1.residual, fit2.residual) / min(fit1.residual, fit2.residual)
    assert ratio < 2.0


def test_fit_rejects_bad_inputs(default_body):
    with pytest.raises(BodyError):
        fit_body(np.zeros((50, 3)), default_body.landmarks, PoseParams())
    cloud = np.zeros((200, 3))
    with pytest.raises(BodyError):
        fit_body(cloud, {"sternum": np.zeros(3)}, PoseParams())


def test_fit_noisy_landmarks():
    # landmark noise model: isotropic Gaussian, sigma 1 cm
    gt_shape = ShapeParams(height=0.62, chest_half_width=0.175)
    body = generate_body(gt_shape, PoseParams(), resolution=64)
    cloud = PointCloud(sample_skin(body, 1500, seed=23))
    rng = np.random.default_rng(29)
    noisy = {k: v + rng.normal(scale=0.01, size=3) for k, v in body.landmarks.items()}
    fit = fit_body(cloud, noisy, PoseParams(), resolution=64, max_iter=80)
    rel = np.abs(fit.shape.as_vector() - gt_shape.as_vector()) / np.abs(gt_shape.as_vector())
    assert rel.max() < 0.15
    assert fit.residual < 6e-4


# ---------------------------------------------------------------------------
# point cloud IO
# ---------------------------------------------------------------------------

def test_load_cloud_roundtrip(tmp_path):
    from ribfence.meshio import write_ply_points, write_xyz
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(120, 3))
    write_xyz(tmp_path / "scan.xyz", pts)
    write_ply_points(tmp_path / "scan.ply", pts)
    a = load_cloud(tmp_path / "scan.xyz")
    b = load_cloud(tmp_path / "scan.ply")
    assert isinstance(a, PointCloud) and isinstance(b, PointCloud)
    assert np.allclose(a.points, pts, atol=1e-12)
    assert np.allclose(b.points, pts, atol=1e-12)
