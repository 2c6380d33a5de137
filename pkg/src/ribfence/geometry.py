"""Triangle-mesh and plane primitives: closest-point queries, normals,
adjacency, dihedral classification, ray casting, sphere culling.

All quantities are metres unless stated otherwise. Vectors are plain
float64 numpy arrays of shape (3,); meshes are indexed triangle soups
with counter-clockwise (outward) winding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property

import numpy as np

_TINY = np.finfo(np.float64).tiny
PLANAR_TOL = 1e-9
MIN_TRIANGLE_AREA = 1e-12  # m^2
RAY_T_MIN = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateTriangleError(GeometryError):
    pass


class BoundaryEdgeError(GeometryError):
    pass


class FeatureKind(IntEnum):
    INTERIOR = 0
    EDGE = 1
    VERTEX = 2


class Convexity(IntEnum):
    CONCAVE = -1
    PLANAR = 0
    CONVEX = 1


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise GeometryError(f"expected 3-vector, got shape {a.shape}")
    # scalar-sum finiteness probe (cheap, hot path); the sum is non-finite
    # for any NaN/Inf component but can also overflow for huge finite
    # values, so only the exact check may reject
    if not math.isfinite(a[0] + a[1] + a[2]) and not np.all(np.isfinite(a)):
        raise GeometryError("non-finite vector component")
    return a


def unit(v) -> np.ndarray:
    a = as_vec3(v)
    n = np.linalg.norm(a)
    if n < _TINY:
        raise GeometryError("cannot normalize zero vector")
    return a / n


@dataclass(frozen=True)
class Plane:
    """Oriented plane; the positive side is the half-space the normal points into."""

    normal: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "normal", as_vec3(self.normal))
        object.__setattr__(self, "point", as_vec3(self.point))
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be unit length")

    def signed_distance(self, q) -> float:
        return float(np.dot(self.normal, as_vec3(q) - self.point))


class TriMesh:
    """Indexed triangle mesh.

    Vertices (n,3) float64 and faces (m,3) int64 are stored read-only;
    adjacency and per-face query caches build lazily on first use so
    construction stays cheap for throwaway meshes.
    """

    def __init__(self, vertices, faces, check: bool = True):
        v = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (n,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (m,3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite vertex coordinates")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f
        if check:
            self._check_indices()

    def _check_indices(self):
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")
        if self.faces.size:
            _, counts = np.unique(self._edge_keys(), return_counts=True)
            if np.any(counts > 2):
                raise GeometryError("non-manifold edge shared by more than 2 faces")

    def _edge_keys(self) -> np.ndarray:
        # Undirected edge -> single integer key for counting/grouping.
        f = self.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        lo = pairs.min(axis=1).astype(np.int64)
        hi = pairs.max(axis=1).astype(np.int64)
        return lo * len(self.vertices) + hi

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def triangles(self) -> np.ndarray:
        """(m,3,3) vertex coordinates per face."""
        t = self.vertices[self.faces]
        t.setflags(write=False)
        return t

    @cached_property
    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norms = np.linalg.norm(n, axis=1)
        if np.any(norms < 2.0 * MIN_TRIANGLE_AREA):
            bad = int(np.argmin(norms))
            raise DegenerateTriangleError(f"face {bad} has area <= {MIN_TRIANGLE_AREA}")
        n = n / norms[:, None]
        n.setflags(write=False)
        return n

    @cached_property
    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    @cached_property
    def face_centroids(self) -> np.ndarray:
        return self.triangles.mean(axis=1)

    @cached_property
    def face_bound_radii(self) -> np.ndarray:
        """Radius of the smallest centroid-centred ball containing each face."""
        d = self.triangles - self.face_centroids[:, None, :]
        return np.sqrt((d * d).sum(axis=2)).max(axis=1)

    @cached_property
    def _cull_tables(self):
        """KD-tree cull support: (tree over regular faces, their indices,
        oversized-face indices, max bound radius of the regular set).

        Faces whose bounding radius exceeds 3x the median (cap fans, slivers)
        would blow up every ball query's radius; they are few, so they are
        kept on an always-checked list instead of in the tree.
        """
        from scipy.spatial import cKDTree
        br = self.face_bound_radii
        cutoff = 3.0 * float(np.median(br))
        small = np.nonzero(br <= cutoff)[0]
        large = np.nonzero(br > cutoff)[0]
        if len(small) == 0:       # degenerate: all faces oversized
            small, large = large, small
        tree = cKDTree(self.face_centroids[small])
        return tree, small, large, float(br[small].max())

    @cached_property
    def _edge_tables(self):
        # edges: (E,2) sorted vertex pairs; edge_faces: (E,2) incident faces, -1 pads
        # boundary edges; face_edges: (m,3) edge index per face edge slot
        # (slot 0 = v0v1, 1 = v1v2, 2 = v2v0).
        f = self.faces
        m = len(f)
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        owner = np.tile(np.arange(m, dtype=np.int64), 3)
        lo = pairs.min(axis=1)
        hi = pairs.max(axis=1)
        keys = lo * len(self.vertices) + hi
        order = np.argsort(keys, kind="stable")
        skeys = keys[order]
        uniq, start = np.unique(skeys, return_index=True)
        E = len(uniq)
        edges = np.empty((E, 2), dtype=np.int64)
        edges[:, 0] = uniq // len(self.vertices)
        edges[:, 1] = uniq % len(self.vertices)
        edge_faces = np.full((E, 2), -1, dtype=np.int64)
        face_edges = np.empty((m, 3), dtype=np.int64)
        counts = np.diff(np.append(start, len(skeys)))
        for e in range(E):
            s = start[e]
            for k in range(counts[e]):
                fo = owner[order[s + k]]
                edge_faces[e, k] = fo
        inv = np.empty(len(keys), dtype=np.int64)
        inv[order] = np.repeat(np.arange(E), counts)
        face_edges[:, 0] = inv[:m]
        face_edges[:, 1] = inv[m:2 * m]
        face_edges[:, 2] = inv[2 * m:]
        edges.setflags(write=False)
        edge_faces.setflags(write=False)
        face_edges.setflags(write=False)
        return edges, edge_faces, face_edges

    @property
    def edges(self) -> np.ndarray:
        return self._edge_tables[0]

    @property
    def edge_faces(self) -> np.ndarray:
        return self._edge_tables[1]

    @property
    def face_edges(self) -> np.ndarray:
        return self._edge_tables[2]

    @cached_property
    def edge_adjacency(self) -> dict:
        """Map (lo, hi) vertex pair -> tuple of incident face indices."""
        edges, edge_faces, _ = self._edge_tables
        out = {}
        for e in range(len(edges)):
            fs = tuple(int(x) for x in edge_faces[e] if x >= 0)
            out[(int(edges[e, 0]), int(edges[e, 1]))] = fs
        return out

    @cached_property
    def edge_convexities(self) -> np.ndarray:
        """Per-edge Convexity code; boundary edges hold a sentinel of -128."""
        edges, edge_faces, _ = self._edge_tables
        out = np.full(len(edges), -128, dtype=np.int8)
        interior = edge_faces[:, 1] >= 0
        idx = np.nonzero(interior)[0]
        if len(idx) == 0:
            return out
        fa = edge_faces[idx, 0]
        fb = edge_faces[idx, 1]
        mid = 0.5 * (self.vertices[edges[idx, 0]] + self.vertices[edges[idx, 1]])
        # opposite vertex of face B: the one not on the edge
        fb_verts = self.faces[fb]
        opp = np.empty(len(idx), dtype=np.int64)
        for k in range(3):
            cand = fb_verts[:, k]
            mask = (cand != edges[idx, 0]) & (cand != edges[idx, 1])
            opp[mask] = cand[mask]
        w = self.vertices[opp] - mid
        wn = np.linalg.norm(w, axis=1)
        wn[wn < _TINY] = 1.0
        d = np.einsum("ij,ij->i", self.face_normals[fa], w / wn[:, None])
        code = np.zeros(len(idx), dtype=np.int8)
        code[d < -PLANAR_TOL] = Convexity.CONVEX
        code[d > PLANAR_TOL] = Convexity.CONCAVE
        out[idx] = code
        return out

    @cached_property
    def vertex_convex(self) -> np.ndarray:
        """True where every interior edge at the vertex is convex or planar.

        Vertices touching a boundary edge are never marked convex.
        """
        edges, _, _ = self._edge_tables
        conv = self.edge_convexities
        ok = np.ones(self.n_vertices, dtype=bool)
        bad = (conv == Convexity.CONCAVE) | (conv == -128)
        for col in (0, 1):
            np.minimum.at(ok, edges[:, col], ~bad)
        # isolated vertices (no incident edge) are not convex features
        touched = np.zeros(self.n_vertices, dtype=bool)
        touched[edges.ravel()] = True
        return ok & touched

    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def is_closed(self) -> bool:
        return bool(np.all(self.edge_faces[:, 1] >= 0)) if self.n_faces else False

    def validate(self):
        """Raise GeometryError unless indices, manifoldness and winding hold."""
        self._check_indices()
        self.face_normals  # raises on degenerate faces
        if self.n_faces:
            # a consistently wound surface uses each directed half-edge once
            f = self.faces.astype(np.int64)
            a = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
            b = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
            directed = a * np.int64(self.n_vertices) + b
            if len(np.unique(directed)) != len(directed):
                raise GeometryError("inconsistent winding (repeated half-edge)")
        if self.is_closed() and self.signed_volume() <= 0.0:
            raise GeometryError("closed mesh is wound inward (signed volume <= 0)")
        return self


def concatenate(meshes) -> TriMesh:
    """Merge meshes into one, preserving face order; returns merged mesh and
    the per-input face offset table."""
    vs, fs, offsets = [], [], []
    nv = 0
    nf = 0
    for m in meshes:
        vs.append(m.vertices)
        fs.append(m.faces + nv)
        offsets.append(nf)
        nv += m.n_vertices
        nf += m.n_faces
    merged = TriMesh(np.concatenate(vs), np.concatenate(fs))
    return merged, np.asarray(offsets, dtype=np.int64)


# ---------------------------------------------------------------------------
# Closest point on triangle (Ericson, Real-Time Collision Detection 5.1.5),
# vectorized over triangles for a single query point, with feature tags.
# ---------------------------------------------------------------------------

def closest_points_on_triangles(q: np.ndarray, tris: np.ndarray):
    """Closest point from q to each triangle in tris (k,3,3).

    Returns (cp (k,3), kind (k,) FeatureKind codes, feature (k,) local index:
    vertex 0..2, edge slot 0=v0v1 / 1=v1v2 / 2=v2v0, or -1 for interior).
    """
    q = np.asarray(q, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.float64)
    k = len(tris)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    cp = np.empty((k, 3))
    kind = np.empty(k, dtype=np.int8)
    feat = np.full(k, -1, dtype=np.int8)
    remain = np.ones(k, dtype=bool)

    ab = b - a
    ac = c - a
    ap = q - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)

    is_a = (d1 <= _TINY) & (d2 <= _TINY)
    cp[is_a] = a[is_a]
    kind[is_a] = FeatureKind.VERTEX
    feat[is_a] = 0
    remain &= ~is_a

    bp = q - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    is_b = (d3 >= -_TINY) & (d4 <= d3) & remain
    cp[is_b] = b[is_b]
    kind[is_b] = FeatureKind.VERTEX
    feat[is_b] = 1
    remain &= ~is_b

    vc = d1 * d4 - d3 * d2
    is_ab = (vc <= _TINY) & (d1 >= -_TINY) & (d3 <= _TINY) & remain
    if np.any(is_ab):
        v = (d1[is_ab] / (d1[is_ab] - d3[is_ab]))[:, None]
        cp[is_ab] = a[is_ab] + v * ab[is_ab]
        kind[is_ab] = FeatureKind.EDGE
        feat[is_ab] = 0
        remain &= ~is_ab

    cpv = q - c
    d5 = np.einsum("ij,ij->i", ab, cpv)
    d6 = np.einsum("ij,ij->i", ac, cpv)
    is_c = (d6 >= -_TINY) & (d5 <= d6) & remain
    cp[is_c] = c[is_c]
    kind[is_c] = FeatureKind.VERTEX
    feat[is_c] = 2
    remain &= ~is_c

    vb = d5 * d2 - d1 * d6
    is_ac = (vb <= _TINY) & (d2 >= -_TINY) & (d6 <= _TINY) & remain
    if np.any(is_ac):
        w = (d2[is_ac] / (d2[is_ac] - d6[is_ac]))[:, None]
        cp[is_ac] = a[is_ac] + w * ac[is_ac]
        kind[is_ac] = FeatureKind.EDGE
        feat[is_ac] = 2
        remain &= ~is_ac

    va = d3 * d6 - d5 * d4
    is_bc = (va <= _TINY) & ((d4 - d3) >= -_TINY) & ((d5 - d6) >= -_TINY) & remain
    if np.any(is_bc):
        d43 = d4[is_bc] - d3[is_bc]
        w = (d43 / (d43 + d5[is_bc] - d6[is_bc]))[:, None]
        cp[is_bc] = b[is_bc] + w * (c[is_bc] - b[is_bc])
        kind[is_bc] = FeatureKind.EDGE
        feat[is_bc] = 1
        remain &= ~is_bc

    if np.any(remain):
        denom = 1.0 / (va[remain] + vb[remain] + vc[remain])
        v = (vb[remain] * denom)[:, None]
        w = (vc[remain] * denom)[:, None]
        cp[remain] = a[remain] + ab[remain] * v + ac[remain] * w
        kind[remain] = FeatureKind.INTERIOR
        feat[remain] = -1

    return cp, kind, feat


def triangle_area(tri) -> float:
    t = np.asarray(tri, dtype=np.float64)
    return 0.5 * float(np.linalg.norm(np.cross(t[1] - t[0], t[2] - t[0])))


def closest_point_on_triangle(q, tri):
    """Closest point on a single triangle.

    Returns (cp, (FeatureKind, local index)); local index is -1 for interior,
    an edge slot (0=v0v1, 1=v1v2, 2=v2v0) or a vertex index otherwise.
    """
    tri = np.asarray(tri, dtype=np.float64)
    if triangle_area(tri) <= MIN_TRIANGLE_AREA:
        raise DegenerateTriangleError(f"triangle area <= {MIN_TRIANGLE_AREA}")
    cp, kind, feat = closest_points_on_triangles(as_vec3(q), tri[None])
    return cp[0], (FeatureKind(int(kind[0])), int(feat[0]))


def face_normal(tri) -> np.ndarray:
    """Unit normal of a triangle following its winding order."""
    t = np.asarray(tri, dtype=np.float64)
    n = np.cross(t[1] - t[0], t[2] - t[0])
    nn = np.linalg.norm(n)
    if nn <= 2.0 * MIN_TRIANGLE_AREA:
        raise DegenerateTriangleError(f"triangle area <= {MIN_TRIANGLE_AREA}")
    return n / nn


def edge_convexity(mesh: TriMesh, edge) -> Convexity:
    """Classify the dihedral at an interior mesh edge as seen from outside.

    `edge` is a vertex index pair in any order.
    """
    i, j = int(edge[0]), int(edge[1])
    key = (min(i, j), max(i, j))
    adj = mesh.edge_adjacency.get(key)
    if adj is None:
        raise GeometryError(f"no such edge {key}")
    if len(adj) < 2:
        raise BoundaryEdgeError(f"edge {key} is a boundary edge")
    edges = mesh.edges
    eidx = np.nonzero((edges[:, 0] == key[0]) & (edges[:, 1] == key[1]))[0][0]
    return Convexity(int(mesh.edge_convexities[eidx]))


@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    face: int
    t: float


def raycast(mesh: TriMesh, origin, direction) -> RayHit | None:
    """Nearest ray/mesh intersection with t > RAY_T_MIN metres, or None.

    Direction is normalized internally; ties at shared edges resolve to the
    lowest face index so replays stay deterministic.
    """
    o = as_vec3(origin)
    d = unit(direction)
    t0, t1, t2 = mesh.triangles[:, 0], mesh.triangles[:, 1], mesh.triangles[:, 2]
    e1 = t1 - t0
    e2 = t2 - t0
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    eps = 1e-12
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - t0
    u = inv * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = inv * np.einsum("ij,j->i", qv, d)
    t = inv * np.einsum("ij,ij->i", e2, qv)
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > RAY_T_MIN)
    if not np.any(hit):
        return None
    idx = np.nonzero(hit)[0]
    ts = t[idx]
    tmin = ts.min()
    near = idx[np.abs(ts - tmin) <= 1e-12]
    face = int(near.min())
    t_face = float(t[face])
    return RayHit(point=o + t_face * d, face=face, t=t_face)


def _cull_candidates(mesh: TriMesh, c: np.ndarray, bound: float) -> np.ndarray:
    """Faces whose centroid-distance lower bound admits a point within
    `bound` of `c`, in ascending face order. Exactly the faces a linear
    `|c - centroid| - bound_radius <= bound` scan would keep: a face the
    tree ball excludes has centroid distance > bound + its bound radius."""
    tree, small, large, small_max = mesh._cull_tables
    near = tree.query_ball_point(c, bound + small_max)
    idx = np.concatenate([small[np.asarray(near, dtype=np.int64)], large]) \
        if len(near) else large
    idx = np.sort(idx)
    dc = np.linalg.norm(mesh.face_centroids[idx] - c, axis=1)
    return idx[dc - mesh.face_bound_radii[idx] <= bound]


def faces_in_sphere(mesh: TriMesh, center, radius: float) -> np.ndarray:
    """Indices of all faces whose closest point to center lies within radius.

    Exact: a conservative centroid/bound-radius cull narrows candidates, then
    true point-triangle distances decide membership.
    """
    if radius <= 0:
        raise GeometryError("radius must be > 0")
    c = as_vec3(center)
    cand = _cull_candidates(mesh, c, radius)
    if len(cand) == 0:
        return cand
    cp, _, _ = closest_points_on_triangles(c, mesh.triangles[cand])
    d = np.linalg.norm(cp - c, axis=1)
    return cand[d <= radius]


def mesh_closest_point(mesh: TriMesh, point):
    """(distance, closest point, face index) from a point to the whole mesh.

    A face can hold the minimum only if its centroid-distance lower bound
    beats the best upper bound from the nearest few centroids; candidates are
    kept in ascending face order so distance ties resolve to the lowest face
    index, independent of the cull.
    """
    c = as_vec3(point)
    tree, small, large, _ = mesh._cull_tables
    k = min(8, len(small))
    dc_near, i_near = tree.query(c, k=k)
    i_all = small[np.atleast_1d(i_near)]
    if len(large):
        i_all = np.concatenate([i_all, large])
    dc_all = np.linalg.norm(mesh.face_centroids[i_all] - c, axis=1)
    ub = float((dc_all + mesh.face_bound_radii[i_all]).min())
    cand = _cull_candidates(mesh, c, ub)
    cp, _, _ = closest_points_on_triangles(c, mesh.triangles[cand])
    d = np.linalg.norm(cp - c, axis=1)
    j = int(np.argmin(d))
    return float(d[j]), cp[j], int(cand[j])


def point_inside(mesh: TriMesh, point) -> bool:
    """Even-odd containment test for closed meshes via ray parity."""
    o = as_vec3(point)
    # direction chosen away from axes to dodge edge-grazing rays
    d = unit(np.array([0.57735026918962584, 0.57735026918962562, 0.5773502691896254]))
    t0, t1, t2 = mesh.triangles[:, 0], mesh.triangles[:, 1], mesh.triangles[:, 2]
    e1 = t1 - t0
    e2 = t2 - t0
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - t0
    u = inv * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = inv * np.einsum("ij,j->i", qv, d)
    t = inv * np.einsum("ij,ij->i", e2, qv)
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    return bool(np.count_nonzero(hit) % 2 == 1)
