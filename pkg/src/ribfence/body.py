"""Parametric torso: superellipse sections lofted along the spine.

The skin mesh, an inward rib surface with tagged rib-border rings, and a
small set of named landmarks all come from the same 10 shape + 10 pose
numbers, so fitting those numbers to a scanned point cloud recovers
everything downstream code needs. Rib border vertex indices depend only on
the mesh resolution, never on the parameter values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import TriMesh, as_vec3, point_inside

FORMAT_VERSION = 1

# section control levels as fractions of torso height; keeping them
# dimensionless makes every measurement scale-homogeneous in the size params
_F_WAIST = 0.37
_F_CHEST = 0.70
_CROTCH_OF_WAIST = 0.90
_TOP_OF_CHEST = 0.62
_SHOULDER_OF_CHEST = (0.99, 0.90)  # (width, depth) fractions at the shoulder line

_RIB_COUNT = 6
_RIB_HALF_H = 0.04    # border half-height as a fraction of rib_extent
_RIB_SLANT = 0.12     # front-to-back droop as a fraction of rib_extent
_RIB_SCALE = 0.86     # rib surface = skin sections scaled inward
_RIB_RES_MIN = 48     # internal rib mesh stays dense enough for the borders
_FRONT_GAP = 0.26     # rad kept clear of the sternum meridian
_RING_COUNT = 64      # skin loft rings (plus caps)


class BodyError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeParams:
    """Torso shape, metres unless noted; the analog of a learned shape vector."""

    height: float = 0.60
    chest_half_width: float = 0.17
    chest_half_depth: float = 0.115
    waist_half_width: float = 0.15
    waist_half_depth: float = 0.105
    shoulder_drop: float = 0.06
    rib_extent: float = 0.21
    rib_spacing: float = 1.0      # unitless pitch multiplier
    squareness: float = 2.5       # superellipse exponent
    spine_offset: float = 0.055   # spine sits this far behind the section centre

    def __post_init__(self):
        sizes = (self.height, self.chest_half_width, self.chest_half_depth,
                 self.waist_half_width, self.waist_half_depth, self.shoulder_drop,
                 self.rib_extent, self.spine_offset)
        if any(not np.isfinite(v) or v <= 0.0 for v in sizes):
            raise BodyError("size parameters must be positive and finite")
        if not 2.0 <= self.squareness <= 6.0:
            raise BodyError("squareness must be in [2, 6]")
        if not 0.5 < self.rib_spacing < 2.0:
            raise BodyError("rib_spacing must be in (0.5, 2.0)")

    def as_vector(self) -> np.ndarray:
        return np.array([self.height, self.chest_half_width, self.chest_half_depth,
                         self.waist_half_width, self.waist_half_depth,
                         self.shoulder_drop, self.rib_extent, self.rib_spacing,
                         self.squareness, self.spine_offset])

    @classmethod
    def from_vector(cls, v) -> "ShapeParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (10,):
            raise BodyError(f"shape vector must have 10 entries, got {v.shape}")
        return cls(*[float(x) for x in v])

    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, "kind": "shape",
                           "fields": {k: float(v) for k, v in self.__dict__.items()}})

    @classmethod
    def from_json(cls, text: str) -> "ShapeParams":
        doc = json.loads(text)
        _check_doc(doc, "shape")
        return cls(**doc["fields"])


@dataclass(frozen=True)
class PoseParams:
    """Global pose plus the 4 trunk joint angles (radians)."""

    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))       # axis-angle
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    flexion: float = 0.0
    lateral: float = 0.0
    twist: float = 0.0
    shoulder_tilt: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rot", as_vec3(self.rot).copy())
        object.__setattr__(self, "trans", as_vec3(self.trans).copy())
        self.rot.setflags(write=False)
        self.trans.setflags(write=False)
        if np.linalg.norm(self.rot) > np.pi + 1e-12:
            raise BodyError("rotation axis-angle magnitude must be <= pi")
        for name in ("flexion", "lateral", "twist", "shoulder_tilt"):
            if abs(getattr(self, name)) > np.pi / 2 + 1e-12:
                raise BodyError(f"{name} must be within +/- pi/2")

    def joints(self) -> np.ndarray:
        return np.array([self.flexion, self.lateral, self.twist, self.shoulder_tilt])

    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, "kind": "pose",
                           "fields": {"rot": self.rot.tolist(), "trans": self.trans.tolist(),
                                      "flexion": self.flexion, "lateral": self.lateral,
                                      "twist": self.twist,
                                      "shoulder_tilt": self.shoulder_tilt}})

    @classmethod
    def from_json(cls, text: str) -> "PoseParams":
        doc = json.loads(text)
        _check_doc(doc, "pose")
        f = doc["fields"]
        return cls(rot=np.asarray(f["rot"]), trans=np.asarray(f["trans"]),
                   flexion=f["flexion"], lateral=f["lateral"], twist=f["twist"],
                   shoulder_tilt=f["shoulder_tilt"])


def _check_doc(doc, kind):
    if doc.get("format_version") != FORMAT_VERSION:
        raise BodyError(f"unsupported format_version {doc.get('format_version')!r}")
    if doc.get("kind") != kind:
        raise BodyError(f"expected kind {kind!r}, got {doc.get('kind')!r}")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None  # carried through, ignored by fitting

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise BodyError(f"points must be (n,3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise BodyError("non-finite point coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class BodyInstance:
    skin: TriMesh
    rib_mesh: TriMesh
    spine_center: np.ndarray
    spine_axis: np.ndarray
    rib_border_sets: dict          # (side, index) -> (superior idx, inferior idx)
    landmarks: dict                # name -> Vec3
    shape: ShapeParams
    pose: PoseParams
    resolution: int


@dataclass(frozen=True)
class FitResult:
    shape: ShapeParams
    pose: PoseParams
    residual: float
    converged: bool
    stages: dict


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _section_interpolators(shape: ShapeParams):
    h = shape.height
    y_sh = h - shape.shoulder_drop
    levels = np.array([0.0, _F_WAIST * h, _F_CHEST * h, y_sh, h])
    if not np.all(np.diff(levels) > 0):
        raise BodyError("shoulder_drop too large for this height")
    aw, bw = shape.waist_half_width, shape.waist_half_depth
    ac, bc = shape.chest_half_width, shape.chest_half_depth
    a = np.array([_CROTCH_OF_WAIST * aw, aw, ac, _SHOULDER_OF_CHEST[0] * ac,
                  _TOP_OF_CHEST * ac])
    b = np.array([_CROTCH_OF_WAIST * bw, bw, bc, _SHOULDER_OF_CHEST[1] * bc,
                  _TOP_OF_CHEST * bc])
    return PchipInterpolator(levels, a), PchipInterpolator(levels, b)


def _superellipse(a, b, p, phi):
    c, s = np.cos(phi), np.sin(phi)
    e = 2.0 / p
    x = a * np.sign(c) * np.abs(c) ** e
    z = b * np.sign(s) * np.abs(s) ** e
    return x, z


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _pose_points(pts, y_ref, shape: ShapeParams, pose: PoseParams):
    """Apply joint bending (weighted by original height) then the global pose."""
    h = shape.height
    y_waist = _F_WAIST * h
    y_chest = _F_CHEST * h
    y_sh = h - shape.shoulder_drop
    w_trunk = _smoothstep((y_ref - 0.12 * h) / (y_sh - 0.12 * h))
    w_tilt = _smoothstep((y_ref - y_chest) / (y_sh - y_chest))
    out = np.asarray(pts, dtype=np.float64).copy()
    x_axis = np.array([1.0, 0.0, 0.0])
    y_axis = np.array([0.0, 1.0, 0.0])
    z_axis = np.array([0.0, 0.0, 1.0])
    trunk_pivot = np.array([0.0, y_waist, 0.0])
    tilt_pivot = np.array([0.0, y_chest, 0.0])
    for axis, angle, w, pivot in ((x_axis, pose.flexion, w_trunk, trunk_pivot),
                                  (z_axis, pose.lateral, w_trunk, trunk_pivot),
                                  (y_axis, pose.twist, w_trunk, trunk_pivot),
                                  (z_axis, pose.shoulder_tilt, w_tilt, tilt_pivot)):
        if angle != 0.0:
            out = _rotate_about(out, axis, angle * w, pivot)
    rg = Rotation.from_rotvec(np.array(pose.rot))
    return rg.apply(out) + pose.trans


def _rotate_about(pts, axis, angles, pivot):
    v = pts - pivot
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    kv = np.cross(axis, v)
    kd = v @ axis
    return pivot + v * c + kv * s + np.outer(kd * (1.0 - c.ravel()), axis)


def _local_rotation_at(y, shape: ShapeParams, pose: PoseParams) -> Rotation:
    """Composed rotation acting on directions at height y (weight gradient ignored)."""
    h = shape.height
    y_sh = h - shape.shoulder_drop
    y_chest = _F_CHEST * h
    w_trunk = float(_smoothstep(np.array([(y - 0.12 * h) / (y_sh - 0.12 * h)]))[0])
    w_tilt = float(_smoothstep(np.array([(y - y_chest) / (y_sh - y_chest)]))[0])
    r = Rotation.from_rotvec([pose.flexion * w_trunk, 0.0, 0.0])
    r = Rotation.from_rotvec([0.0, 0.0, pose.lateral * w_trunk]) * r
    r = Rotation.from_rotvec([0.0, pose.twist * w_trunk, 0.0]) * r
    r = Rotation.from_rotvec([0.0, 0.0, pose.shoulder_tilt * w_tilt]) * r
    return Rotation.from_rotvec(np.array(pose.rot)) * r


def _loft_mesh(rings: np.ndarray, bottom_center, top_center) -> TriMesh:
    """Closed loft: side quads between consecutive rings plus cap fans."""
    n_rings, res, _ = rings.shape
    verts = rings.reshape(-1, 3)
    k = np.arange(res)
    k1 = (k + 1) % res
    faces = []
    for ell in range(n_rings - 1):
        b0 = ell * res
        b1 = b0 + res
        faces.append(np.column_stack([b0 + k, b1 + k, b1 + k1]))
        faces.append(np.column_stack([b0 + k, b1 + k1, b0 + k1]))
    cb = len(verts)
    ct = cb + 1
    verts = np.vstack([verts, bottom_center, top_center])
    # rings run clockwise seen from above, so the fans wind c->k then c->k1
    faces.append(np.column_stack([np.full(res, cb), k, k1]))
    top0 = (n_rings - 1) * res
    faces.append(np.column_stack([np.full(res, ct), top0 + k1, top0 + k]))
    return TriMesh(verts, np.concatenate(faces))


def _skin_rings_local(shape: ShapeParams, resolution: int):
    h = shape.height
    fa, fb = _section_interpolators(shape)
    ys = np.linspace(0.0, h, _RING_COUNT + 1)
    phi = -np.pi + 2.0 * np.pi * np.arange(resolution) / resolution
    a = fa(ys)[:, None]
    b = fb(ys)[:, None]
    x, z = _superellipse(a, b, shape.squareness, phi[None, :])
    rings = np.stack([x, np.broadcast_to(ys[:, None], x.shape), z], axis=2)
    return rings, ys


def _skin_vertices(shape: ShapeParams, pose: PoseParams, resolution: int) -> np.ndarray:
    """Posed skin loft vertices only; the cheap path for fitting loops."""
    rings, ys = _skin_rings_local(shape, resolution)
    pts = rings.reshape(-1, 3)
    y_ref = pts[:, 1].copy()
    return _pose_points(pts, y_ref, shape, pose)


def _rib_layout(shape: ShapeParams):
    h = shape.height
    y_chest = _F_CHEST * h
    pitch = shape.rib_extent * shape.rib_spacing / _RIB_COUNT
    rh = _RIB_HALF_H * shape.rib_extent
    centers = y_chest - (np.arange(1, _RIB_COUNT + 1) - 0.5) * pitch
    return centers, rh, pitch


def _rib_rings_local(shape: ShapeParams, ribres: int):
    """Slanted rib-surface rings; returns (rings, ring role map)."""
    centers, rh, _ = _rib_layout(shape)
    bases = [centers[-1] - 4.0 * rh]
    roles = {}
    for i in range(_RIB_COUNT, 0, -1):  # bottom-up
        roles[("inf", i)] = len(bases)
        bases.append(centers[i - 1] - rh)
        roles[("sup", i)] = len(bases)
        bases.append(centers[i - 1] + rh)
    bases.append(centers[0] + 4.0 * rh)
    bases = np.asarray(bases)
    if np.any(np.diff(bases) <= 0):
        raise BodyError("rib rings overlap; rib_spacing too small for this extent")
    fa, fb = _section_interpolators(shape)
    phi = -np.pi + 2.0 * np.pi * np.arange(ribres) / ribres
    slant = _RIB_SLANT * shape.rib_extent * (1.0 + np.sin(phi)) / 2.0
    ys = bases[:, None] - slant[None, :]
    if np.any(ys <= 0.0) or np.any(ys >= shape.height):
        raise BodyError("rib band leaves the torso; check rib_extent/height")
    a = fa(ys) * _RIB_SCALE
    b = fb(ys) * _RIB_SCALE
    x, z = _superellipse(a, b, shape.squareness, phi[None, :])
    rings = np.stack([x, ys, z], axis=2)
    return rings, roles, phi


def _border_azimuth_indices(phi: np.ndarray):
    """Azimuth index lists per side, ordered laterally away from the spine.

    The spine meridian sits at phi = -pi/2 and the sternum at +pi/2; one
    step is kept clear at the spine and _FRONT_GAP radians at the sternum so
    left and right tubes never meet.
    """
    res = len(phi)
    step = 2.0 * np.pi / res
    def wrap(d):
        return (d + np.pi) % (2.0 * np.pi) - np.pi
    right, left = [], []
    for k in range(res):
        d = wrap(phi[k] + np.pi / 2.0)  # angular offset from the spine meridian
        if step * 0.5 < d < np.pi - _FRONT_GAP:
            right.append((d, k))
        elif step * 0.5 < -d < np.pi - _FRONT_GAP:
            left.append((-d, k))
    right = [k for _, k in sorted(right)]
    left = [k for _, k in sorted(left)]
    return left, right


def generate_body(shape: ShapeParams, pose: PoseParams, resolution: int = 96) -> BodyInstance:
    """Deterministic torso build; identical parameters give identical meshes."""
    if resolution < 16:
        raise BodyError("resolution must be >= 16")
    h = shape.height
    y_chest = _F_CHEST * h
    y_sh = h - shape.shoulder_drop
    fa, fb = _section_interpolators(shape)

    rings, ys = _skin_rings_local(shape, resolution)
    flat = rings.reshape(-1, 3)
    caps = np.array([[0.0, 0.0, 0.0], [0.0, h, 0.0]])
    posed = _pose_points(np.vstack([flat, caps]), np.concatenate([flat[:, 1], caps[:, 1]]),
                         shape, pose)
    skin = _loft_mesh(posed[:-2].reshape(rings.shape), posed[-2], posed[-1])

    ribres = max(resolution, _RIB_RES_MIN)
    rib_rings, roles, phi = _rib_rings_local(shape, ribres)
    rflat = rib_rings.reshape(-1, 3)
    centers, rh, _ = _rib_layout(shape)
    rcaps = np.array([[0.0, float(rib_rings[0, :, 1].mean()), 0.0],
                      [0.0, float(rib_rings[-1, :, 1].mean()), 0.0]])
    rposed = _pose_points(np.vstack([rflat, rcaps]),
                          np.concatenate([rflat[:, 1], rcaps[:, 1]]), shape, pose)
    rib_mesh = _loft_mesh(rposed[:-2].reshape(rib_rings.shape), rposed[-2], rposed[-1])

    left_k, right_k = _border_azimuth_indices(phi)
    border_sets = {}
    for i in range(1, _RIB_COUNT + 1):
        sup_ring = roles[("sup", i)] * ribres
        inf_ring = roles[("inf", i)] * ribres
        for side, ks in (("left", left_k), ("right", right_k)):
            sup = np.asarray([sup_ring + k for k in ks], dtype=np.int64)
            inf = np.asarray([inf_ring + k for k in ks], dtype=np.int64)
            if len(sup) < 8:
                raise BodyError("rib border needs >= 8 vertices; raise resolution")
            border_sets[(side, i)] = (sup, inf)

    y_s = float(centers.mean())
    local_marks = {
        "shoulder_left": np.array([-float(fa(y_sh)), y_sh, 0.0]),
        "shoulder_right": np.array([float(fa(y_sh)), y_sh, 0.0]),
        "sternum": np.array([0.0, y_chest, float(fb(y_chest))]),
        "crotch": np.array([0.0, 0.0, 0.0]),
        "waist": np.array([0.0, _F_WAIST * h, float(fb(_F_WAIST * h))]),
    }
    names = sorted(local_marks)
    mark_pts = np.array([local_marks[n] for n in names])
    spine_local = np.array([[0.0, y_s, -shape.spine_offset]])
    posed_marks = _pose_points(np.vstack([mark_pts, spine_local]),
                               np.concatenate([mark_pts[:, 1], spine_local[:, 1]]),
                               shape, pose)
    landmarks = {n: posed_marks[j] for j, n in enumerate(names)}
    spine_center = posed_marks[-1]
    spine_axis = _local_rotation_at(y_s, shape, pose).apply([0.0, 1.0, 0.0])

    skin.validate()
    rib_mesh.validate()
    if not point_inside(skin, spine_center):
        raise BodyError("spine centre fell outside the skin mesh")
    return BodyInstance(skin=skin, rib_mesh=rib_mesh, spine_center=spine_center,
                        spine_axis=spine_axis, rib_border_sets=border_sets,
                        landmarks=landmarks, shape=shape, pose=pose,
                        resolution=resolution)


def _landmark_positions(shape: ShapeParams, pose: PoseParams) -> dict:
    """Posed landmarks without building any mesh (fast path for stage 2)."""
    h = shape.height
    y_sh = h - shape.shoulder_drop
    y_chest = _F_CHEST * h
    fa, fb = _section_interpolators(shape)
    local = {
        "shoulder_left": np.array([-float(fa(y_sh)), y_sh, 0.0]),
        "shoulder_right": np.array([float(fa(y_sh)), y_sh, 0.0]),
        "sternum": np.array([0.0, y_chest, float(fb(y_chest))]),
        "crotch": np.array([0.0, 0.0, 0.0]),
        "waist": np.array([0.0, _F_WAIST * h, float(fb(_F_WAIST * h))]),
    }
    names = sorted(local)
    pts = np.array([local[n] for n in names])
    posed = _pose_points(pts, pts[:, 1], shape, pose)
    return {n: posed[j] for j, n in enumerate(names)}


def sample_surface(mesh: TriMesh, n: int, seed: int = 0, face_mask=None) -> np.ndarray:
    """Area-weighted uniform points on the mesh surface (optionally masked)."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas.copy()
    if face_mask is not None:
        areas = np.where(face_mask, areas, 0.0)
    idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    t = mesh.triangles[idx]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def sample_skin(body: BodyInstance, n: int, seed: int = 0) -> np.ndarray:
    """Scan-like samples: the lofted skin only, never the end-cap discs."""
    mask = np.ones(body.skin.n_faces, dtype=bool)
    mask[-2 * body.resolution:] = False  # cap fans close the loft
    return sample_surface(body.skin, n, seed=seed, face_mask=mask)


# ---------------------------------------------------------------------------
# chamfer + fitting
# ---------------------------------------------------------------------------

def _cloud_array(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise BodyError(f"expected (n,3) points, got {pts.shape}")
    return pts


def load_cloud(path) -> PointCloud:
    """Read a scan from .ply, .xyz or .txt into a PointCloud."""
    from .meshio import load_point_cloud
    return PointCloud(load_point_cloud(path))


def chamfer_distance(a, b) -> float:
    """Mean nearest-neighbour squared distance, a->b plus b->a (m^2)."""
    pa = _cloud_array(a)
    pb = _cloud_array(b)
    if len(pa) == 0 or len(pb) == 0:
        raise BodyError("chamfer distance of an empty cloud")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def _chamfer_to_tree(cloud_tree, cloud_pts, model_pts) -> float:
    # same quantity as chamfer_distance with the cloud-side tree reused
    d1 = cKDTree(model_pts).query(cloud_pts)[0]
    d2 = cloud_tree.query(model_pts)[0]
    return float(np.mean(d1 ** 2) + np.mean(d2 ** 2))


def _fd_gradient(f, x, step, prep=None):
    """Central-difference gradient, the only gradient the fit stages use."""
    if prep is None:
        prep = lambda v: v
    g = np.empty_like(x)
    for i in range(len(x)):
        xp = x.copy(); xp[i] += step
        xm = x.copy(); xm[i] -= step
        g[i] = (f(prep(xp)) - f(prep(xm))) / (2.0 * step)
    return g


def _descend(f, x0, step0, max_iter, rel_tol, fd_step, lo=None, hi=None):
    """Fixed-step gradient descent with backtracking halving.

    Gradients are central finite differences; convergence is declared when
    an accepted move improves the residual by less than rel_tol relative.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    def clipped(v):
        if lo is not None:
            v = np.maximum(v, lo)
        if hi is not None:
            v = np.minimum(v, hi)
        return v
    fx = f(x)
    step = step0
    converged = False
    evals = 1
    for _ in range(max_iter):
        g = _fd_gradient(f, x, fd_step, clipped)
        evals += 2 * len(x)
        gn = np.linalg.norm(g)
        if gn < 1e-14:
            converged = True
            break
        d = -g / gn
        s = step
        accepted = False
        while s > step0 * 1e-6:
            xt = clipped(x + s * d)
            ft = f(xt)
            evals += 1
            if ft < fx:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            converged = True
            break
        rel = (fx - ft) / max(fx, 1e-300)
        x, fx = xt, ft
        step = min(step0 * 8.0, s * 2.0)
        if rel < rel_tol:
            converged = True
            break
    return x, fx, converged, evals


def _procrustes(src, dst):
    """Rigid Kabsch alignment src -> dst; returns (rotvec, translation)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    u, _, vt = np.linalg.svd((src - mu_s).T @ (dst - mu_d))
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    rot = Rotation.from_matrix(r).as_rotvec()
    return rot, mu_d - r @ mu_s


_JOINT_NAMES = ("flexion", "lateral", "twist", "shoulder_tilt")


def fit_body(cloud, landmarks: dict, init: PoseParams, resolution: int = 96,
             max_iter: int = 150, rel_tol: float = 1e-6, fd_step: float = 1e-4,
             passes: int = 2) -> FitResult:
    """Staged fit: (1) global rotation/translation by chamfer descent,
    (2) joint angles by landmark least squares, (3) shape by chamfer
    descent. The sequence runs as block-coordinate passes because pose and
    shape are coupled through the cloud; stage (2) never touches shape and
    stage (3) never touches pose. Stage (1) descends from a Kabsch
    alignment of the current model landmarks."""
    pts = _cloud_array(cloud)
    if len(pts) < 100:
        raise BodyError("fitting needs at least 100 points")
    for need in ("shoulder_left", "shoulder_right", "sternum"):
        if need not in landmarks:
            raise BodyError(f"missing landmark {need!r}")
    cloud_tree = cKDTree(pts)
    shape = ShapeParams()
    pose = init

    names = [n for n in sorted(landmarks) if n in
             ("shoulder_left", "shoulder_right", "sternum", "crotch", "waist")]
    target = np.array([as_vec3(landmarks[n]) for n in names])

    lo = ShapeParams().as_vector() * 0.4
    hi = ShapeParams().as_vector() * 2.2
    lo[8], hi[8] = 2.0, 6.0
    lo[7], hi[7] = 0.55, 1.9

    stages = []
    converged = False
    residual = np.inf
    for _ in range(passes):
        # stage 1: global rotation + translation
        model0 = _landmark_positions(shape, replace(pose, rot=np.zeros(3),
                                                    trans=np.zeros(3)))
        if len(names) >= 3:
            rot0, trans0 = _procrustes(np.array([model0[n] for n in names]), target)
            pose = replace(pose, rot=rot0, trans=trans0)

        def f_global(v):
            p = replace(pose, rot=v[:3], trans=v[3:])
            return _chamfer_to_tree(cloud_tree, pts,
                                    _skin_vertices(shape, p, resolution))

        v0 = np.concatenate([pose.rot, pose.trans])
        v1, r1, conv1, ev1 = _descend(f_global, v0, 0.02, max_iter, rel_tol, fd_step)
        pose = replace(pose, rot=v1[:3], trans=v1[3:])

        # stage 2: joint angles against the named landmarks
        def res_joints(q):
            p = replace(pose, **dict(zip(_JOINT_NAMES, q)))
            model = _landmark_positions(shape, p)
            return (np.array([model[n] for n in names]) - target).ravel()

        ls = least_squares(res_joints, pose.joints(), bounds=(-np.pi / 2, np.pi / 2),
                           xtol=1e-10, max_nfev=200)
        pose = replace(pose, **dict(zip(_JOINT_NAMES, ls.x)))

        # stage 3: shape against the cloud with the pose frozen; descend in
        # units of the default shape so all 10 axes move at comparable rates
        scale = ShapeParams().as_vector()

        def f_shape(z):
            return _chamfer_to_tree(cloud_tree, pts,
                                    _skin_vertices(ShapeParams.from_vector(z * scale),
                                                   pose, resolution))

        z3, r3, conv3, ev3 = _descend(f_shape, shape.as_vector() / scale, 0.02,
                                      max_iter, rel_tol, fd_step,
                                      lo=lo / scale, hi=hi / scale)
        shape = ShapeParams.from_vector(z3 * scale)
        residual = float(r3)
        converged = bool(conv1 and conv3 and ls.status > 0)
        stages.append({"global": {"residual": float(r1), "converged": bool(conv1),
                                  "evals": ev1},
                       "joints": {"cost": float(ls.cost), "status": int(ls.status)},
                       "shape": {"residual": float(r3), "converged": bool(conv3),
                                 "evals": ev3}})
    return FitResult(shape=shape, pose=pose, residual=residual,
                     converged=converged, stages={"passes": stages})


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

def _section_perimeter(mesh: TriMesh, origin, axis, level: float) -> float:
    """Perimeter of the mesh slice {q : (q - origin) . axis = level}."""
    d = (mesh.vertices - origin) @ axis - level
    d[d == 0.0] = 1e-30  # on-plane vertices count as the positive side
    fd = d[mesh.faces]
    crossing = np.nonzero((fd.max(axis=1) > 0.0) & (fd.min(axis=1) < 0.0))[0]
    total = 0.0
    for fi in crossing:
        tri = mesh.triangles[fi]
        dv = fd[fi]
        pts = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            if (dv[a] > 0.0) != (dv[b] > 0.0):
                t = dv[a] / (dv[a] - dv[b])
                pts.append(tri[a] + t * (tri[b] - tri[a]))
        if len(pts) == 2:
            total += float(np.linalg.norm(pts[1] - pts[0]))
    return total


def measure(body: BodyInstance) -> dict:
    """Chest/waist circumference and shoulder-to-crotch height, metres."""
    axis = body.spine_axis
    origin = body.spine_center
    lm = body.landmarks
    cc_level = float((lm["sternum"] - origin) @ axis)
    wc_level = float((lm["waist"] - origin) @ axis)
    shoulder_mid = 0.5 * (lm["shoulder_left"] + lm["shoulder_right"])
    sch = float(abs((shoulder_mid - lm["crotch"]) @ axis))
    return {"CC": _section_perimeter(body.skin, origin, axis, cc_level),
            "WC": _section_perimeter(body.skin, origin, axis, wc_level),
            "SCH": sch}
