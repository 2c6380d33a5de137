"""Rib border projection, curve fitting and forbidden-region tube meshes.

Border vertices of the internal rib surface are cast radially from the
spine axis onto the skin, each border becomes a least-squares cubic, and
every rib gets a closed elliptical tube swept along the central curve.
Those 12 tubes are the forbidden regions the constraint filter enforces.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import meshio
from .body import FORMAT_VERSION, BodyInstance, _loft_mesh
from .geometry import GeometryError, TriMesh, concatenate, point_inside, raycast, unit

_SIDES = ("left", "right")
_PULLBACK = 1e-6  # cast origin backs off the vertex so on-skin points self-hit


class RibError(ValueError):
    pass


class ProjectionError(RibError):
    """A projection ray failed to reach the skin."""

    def __init__(self, msg, side=None, index=None, vertex=None):
        super().__init__(msg)
        self.side = side
        self.index = index
        self.vertex = vertex


class TubeDegeneracyError(RibError):
    pass


class TubeIntersectionError(RibError):
    def __init__(self, msg, pair=None):
        super().__init__(msg)
        self.pair = pair


@dataclass(frozen=True)
class RibCurve:
    side: str
    index: int
    superior_samples: np.ndarray   # (n,3), ordered laterally from the spine
    inferior_samples: np.ndarray
    t_superior: np.ndarray         # normalized chord-length parameters
    t_inferior: np.ndarray
    superior_poly: np.ndarray      # (4,3) coefficients, ascending powers
    inferior_poly: np.ndarray
    central_poly: np.ndarray

    def __post_init__(self):
        ns, ni = len(self.superior_samples), len(self.inferior_samples)
        if ns != ni or ns < 4:
            raise RibError(f"borders need matching sample counts >= 4, got {ns}/{ni}")
        for name in ("superior_poly", "inferior_poly", "central_poly"):
            if getattr(self, name).shape != (4, 3):
                raise RibError(f"{name} must be (4,3) cubic coefficients")


@dataclass(frozen=True)
class VFTube:
    side: str
    index: int
    mesh: TriMesh
    minor_axis: float   # full axis length, metres; ellipse height off the skin
    major_axis: float   # full axis length, tangent to the skin; always 2x minor

    def __post_init__(self):
        if self.major_axis != 2.0 * self.minor_axis:
            raise RibError("major axis must equal twice the minor axis")


@dataclass(frozen=True)
class FixtureConfig:
    c_prop: float = 0.5      # minor axis as a fraction of mean sup-inf distance
    segments: int = 48
    ring_sides: int = 16

    def __post_init__(self):
        if not np.isfinite(self.c_prop) or self.c_prop <= 0.0:
            raise RibError("c_prop must be positive")
        if self.segments < 8 or self.ring_sides < 8:
            raise RibError("segments and ring_sides must be >= 8")


@dataclass(frozen=True)
class FixtureSet:
    curves: list
    tubes: list
    mesh: TriMesh                  # all tubes merged
    face_ranges: dict = field(default_factory=dict)  # "rib_<side>_<i>" -> (lo, hi)

    def __len__(self):
        return len(self.tubes)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_points(skin: TriMesh, spine_center, spine_axis, points) -> np.ndarray:
    """Cast each point radially away from the spine axis onto the skin.

    The ray direction is d = p - s', with s' the spine point sharing p's
    axial coordinate, so hits keep the source's axial coordinate exactly.
    """
    s = np.asarray(spine_center, dtype=np.float64)
    axis = unit(spine_axis)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty_like(pts)
    for i, p in enumerate(pts):
        d = p - (s + ((p - s) @ axis) * axis)
        nd = np.linalg.norm(d)
        if nd < 1e-12:
            raise ProjectionError(f"point {i} lies on the spine axis", vertex=i)
        d = d / nd
        hit = raycast(skin, p - _PULLBACK * d, d)
        if hit is None:
            raise ProjectionError(f"projection ray missed the skin for point {i}",
                                  vertex=i)
        out[i] = hit.point
    return out


def project_rib_vertices(body: BodyInstance, side: str, index: int):
    """Project one rib's border vertices onto the skin; order is preserved."""
    try:
        sup_idx, inf_idx = body.rib_border_sets[(side, index)]
    except KeyError:
        raise RibError(f"no rib border set for ({side!r}, {index})") from None
    verts = body.rib_mesh.vertices
    results = []
    for ids in (sup_idx, inf_idx):
        try:
            results.append(project_points(body.skin, body.spine_center,
                                          body.spine_axis, verts[ids]))
        except ProjectionError as e:
            raise ProjectionError(
                f"rib {side} {index}: projection failed for border vertex "
                f"{int(ids[e.vertex])}", side=side, index=index,
                vertex=int(ids[e.vertex])) from None
    return results[0], results[1]


# ---------------------------------------------------------------------------
# curve fitting
# ---------------------------------------------------------------------------

def _chord_params(samples) -> np.ndarray:
    seg = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    total = seg.sum()
    if total <= 0.0:
        raise RibError("degenerate border: zero arc length")
    return np.concatenate([[0.0], np.cumsum(seg)]) / total


def _lsq_cubic(t, samples) -> np.ndarray:
    a = np.vander(t, 4, increasing=True)
    coeffs, *_ = np.linalg.lstsq(a, samples, rcond=None)
    return coeffs


def polyval3(coeffs, t) -> np.ndarray:
    """Evaluate (k,3) ascending-power coefficients at parameters t -> (n,3)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return np.vander(t, coeffs.shape[0], increasing=True) @ coeffs


def polyder3(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return coeffs[1:] * np.arange(1.0, coeffs.shape[0])[:, None]


def fit_rib_curves(superior, inferior, side: str = "right", index: int = 1) -> RibCurve:
    """Least-squares cubics over normalized chord length, per coordinate."""
    sup = np.asarray(superior, dtype=np.float64)
    inf = np.asarray(inferior, dtype=np.float64)
    if len(sup) < 4 or len(inf) < 4:
        raise RibError("cubic fit needs at least 4 samples per border")
    if len(sup) != len(inf):
        raise RibError("superior and inferior borders must pair up")
    ts = _chord_params(sup)
    ti = _chord_params(inf)
    sup_poly = _lsq_cubic(ts, sup)
    inf_poly = _lsq_cubic(ti, inf)
    return RibCurve(side=side, index=index,
                    superior_samples=sup, inferior_samples=inf,
                    t_superior=ts, t_inferior=ti,
                    superior_poly=sup_poly, inferior_poly=inf_poly,
                    central_poly=0.5 * (sup_poly + inf_poly))


# ---------------------------------------------------------------------------
# tube sweep
# ---------------------------------------------------------------------------

def _rmf_frames(points, tangents, u0):
    """Rotation-minimizing frames by the double-reflection method."""
    n = len(points)
    u = np.empty((n, 3))
    u[0] = u0
    for i in range(n - 1):
        v1 = points[i + 1] - points[i]
        c1 = v1 @ v1
        if c1 < 1e-30:
            u[i + 1] = u[i]
            continue
        ul = u[i] - (2.0 / c1) * (v1 @ u[i]) * v1
        tl = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - tl
        c2 = v2 @ v2
        u[i + 1] = ul if c2 < 1e-30 else ul - (2.0 / c2) * (v2 @ ul) * v2
    return u


def build_tube(curve: RibCurve, segments: int = 48, ring_sides: int = 16,
               c_prop: float = 0.5) -> VFTube:
    """Sweep an ellipse along the central cubic.

    The minor axis (normal to the skin) is c_prop times the mean distance
    between the border cubics; the major axis is exactly twice that and is
    kept tangent to the skin by aligning it with the superior-inferior
    direction at each station. Frames transport by rotation minimization,
    then rotate in-plane toward that direction, which stays stable where a
    Frenet frame would flip.
    """
    if segments < 8 or ring_sides < 8:
        raise RibError("segments and ring_sides must be >= 8")
    t_dense = np.linspace(0.0, 1.0, 512)
    gap = np.linalg.norm(polyval3(curve.superior_poly, t_dense)
                         - polyval3(curve.inferior_poly, t_dense), axis=1)
    minor = float(c_prop * gap.mean())
    if minor <= 0.0:
        raise RibError("degenerate tube: zero minor axis")

    t = np.linspace(0.0, 1.0, segments + 1)
    center = polyval3(curve.central_poly, t)
    d1 = polyval3(polyder3(curve.central_poly), t)
    d2 = polyval3(polyder3(polyder3(curve.central_poly)), t)
    speed = np.linalg.norm(d1, axis=1)
    if np.any(speed < 1e-12):
        raise TubeDegeneracyError(f"rib {curve.side} {curve.index}: "
                                  "stationary centerline point")
    # curvature radius below the in-plane extent folds the sweep
    cross = np.cross(d1, d2)
    kappa = np.linalg.norm(cross, axis=1) / speed ** 3
    if np.any(kappa > 0) and float(1.0 / kappa.max()) < minor:
        raise TubeDegeneracyError(
            f"rib {curve.side} {curve.index}: curvature radius "
            f"{1.0 / kappa.max():.4g} m below minor axis {minor:.4g} m")

    tangent = d1 / speed[:, None]
    major_dir = polyval3(curve.superior_poly, t) - polyval3(curve.inferior_poly, t)
    major_dir -= np.einsum("ij,ij->i", major_dir, tangent)[:, None] * tangent
    norms = np.linalg.norm(major_dir, axis=1)
    if np.any(norms < 1e-12):
        raise TubeDegeneracyError(f"rib {curve.side} {curve.index}: "
                                  "border direction parallel to centerline")
    major_dir /= norms[:, None]

    u = _rmf_frames(center, tangent, major_dir[0])
    v = np.cross(tangent, u)
    # in-plane angle of the skin-tangent direction, unwrapped for continuity
    theta = np.unwrap(np.arctan2(np.einsum("ij,ij->i", major_dir, v),
                                 np.einsum("ij,ij->i", major_dir, u)))
    e_major = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v
    e_minor = np.cross(tangent, e_major)

    phi = 2.0 * np.pi * np.arange(ring_sides) / ring_sides
    # clockwise seen from +tangent, matching the loft helper's cap winding
    rings = (center[:, None, :]
             + minor * np.cos(phi)[None, :, None] * e_major[:, None, :]
             - 0.5 * minor * np.sin(phi)[None, :, None] * e_minor[:, None, :])
    mesh = _loft_mesh(rings, center[0], center[-1])
    try:
        mesh.validate()
    except GeometryError as e:
        raise TubeDegeneracyError(
            f"rib {curve.side} {curve.index}: swept mesh invalid ({e})") from None
    return VFTube(side=curve.side, index=curve.index, mesh=mesh,
                  minor_axis=minor, major_axis=2.0 * minor)


# ---------------------------------------------------------------------------
# whole-cage assembly
# ---------------------------------------------------------------------------

def _aabb(mesh, pad):
    return mesh.vertices.min(axis=0) - pad, mesh.vertices.max(axis=0) + pad


def _boxes_overlap(a, b):
    return bool(np.all(a[0] <= b[1]) and np.all(b[0] <= a[1]))


def _meshes_intersect(ma: TriMesh, mb: TriMesh) -> bool:
    for src, dst in ((ma, mb), (mb, ma)):
        lo, hi = _aabb(dst, 0.0)
        v = src.vertices
        near = v[np.all((v >= lo) & (v <= hi), axis=1)]
        for p in near:
            if point_inside(dst, p):
                return True
    return False


def build_all_fixtures(body: BodyInstance, config: FixtureConfig | None = None) -> FixtureSet:
    """Project, fit and sweep all 12 ribs; refuses to emit intersecting tubes."""
    cfg = config or FixtureConfig()
    curves = []
    tubes = []
    for side in _SIDES:
        for index in range(1, 7):
            sup, inf = project_rib_vertices(body, side, index)
            curve = fit_rib_curves(sup, inf, side=side, index=index)
            curves.append(curve)
            tubes.append(build_tube(curve, segments=cfg.segments,
                                    ring_sides=cfg.ring_sides, c_prop=cfg.c_prop))

    boxes = [_aabb(t.mesh, 0.0) for t in tubes]
    for i in range(len(tubes)):
        for j in range(i + 1, len(tubes)):
            if not _boxes_overlap(boxes[i], boxes[j]):
                continue
            if _meshes_intersect(tubes[i].mesh, tubes[j].mesh):
                a, b = tubes[i], tubes[j]
                raise TubeIntersectionError(
                    f"rib_{a.side}_{a.index} intersects rib_{b.side}_{b.index}",
                    pair=((a.side, a.index), (b.side, b.index)))

    merged, offsets = concatenate([t.mesh for t in tubes])
    bounds = list(offsets[1:]) + [merged.n_faces]
    ranges = {}
    for t, off, nxt in zip(tubes, offsets, bounds):
        ranges[f"rib_{t.side}_{t.index}"] = (int(off), int(nxt))
    return FixtureSet(curves=curves, tubes=tubes, mesh=merged, face_ranges=ranges)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def fixtures_to_json(fs: FixtureSet) -> str:
    ribs = []
    for curve, tube in zip(fs.curves, fs.tubes):
        ribs.append({"side": curve.side, "index": curve.index,
                     "minor_axis": tube.minor_axis, "major_axis": tube.major_axis,
                     "superior_poly": curve.superior_poly.tolist(),
                     "inferior_poly": curve.inferior_poly.tolist(),
                     "central_poly": curve.central_poly.tolist()})
    return json.dumps({"format_version": FORMAT_VERSION, "kind": "fixtures",
                       "ribs": ribs}, indent=2)


def write_fixtures(obj_path, fs: FixtureSet, sidecar_path=None):
    """OBJ with per-tube object names plus a JSON sidecar of curve data."""
    names = list(fs.face_ranges)
    starts = [fs.face_ranges[n][0] for n in names]
    meshio.write_obj(obj_path, fs.mesh, object_names=names, face_groups=starts)
    if sidecar_path is not None:
        with open(sidecar_path, "w") as fh:
            fh.write(fixtures_to_json(fs))
