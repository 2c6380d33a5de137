"""Forbidden-region virtual fixtures: per-cycle reference filtering.

Each control cycle culls fixture triangles near the probe, turns them into
half-space constraints (plane through the closest point, offset by the probe
radius), and projects the desired increment onto the feasible set:

    min ||dx - dx_d||^2   s.t.   A dx >= b,   b_i = -n_i . (x - cp_i) + r

The constraint normal depends on where the closest point lands: face normal
for interior hits and concave features, the radial direction (x - cp) for
convex edges and vertices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import (
    Convexity,
    FeatureKind,
    TriMesh,
    _cull_candidates,
    as_vec3,
    closest_points_on_triangles,
)

MAX_REF_STEP = 0.005  # m, largest per-cycle reference increment the filter is sized for
_DEDUP_DOT = 1.0 - 1e-9
_DEDUP_B = 1e-9


class FilterError(ValueError):
    pass


class PenetrationFaultError(FilterError):
    """Probe centre is strictly inside the fixture; recovery is the caller's call."""

    def __init__(self, depth: float, point: np.ndarray):
        self.depth = float(depth)
        self.point = np.asarray(point, dtype=np.float64)
        super().__init__(f"probe centre {self.point.tolist()} inside fixture, depth {depth:.2e} m")


@dataclass(frozen=True)
class FilterConfig:
    probe_radius: float = 0.01
    cull_radius: float = 0.05
    n_max: int = 64
    tol: float = 1e-9

    def __post_init__(self):
        if self.probe_radius <= 0.0:
            raise FilterError("probe_radius must be > 0")
        if self.cull_radius <= self.probe_radius + MAX_REF_STEP:
            raise FilterError("cull_radius must exceed probe_radius + max per-cycle step")
        if self.n_max < 16:
            raise FilterError("n_max must be >= 16")
        if self.tol <= 0.0:
            raise FilterError("tol must be > 0")


@dataclass(frozen=True)
class ConstraintSet:
    """Half-space rows A dx >= b with per-row provenance.

    conditions: 1 = interior face plane, 2 = convex edge/vertex radial,
    3 = concave (or planar) edge face plane. features holds the edge index
    (kind EDGE), vertex index (kind VERTEX) or -1 (interior).
    """

    A: np.ndarray
    b: np.ndarray
    faces: np.ndarray
    conditions: np.ndarray
    kinds: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.b)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 3)), np.zeros(0), z, z.astype(np.int8), z.astype(np.int8), z)


@dataclass(frozen=True)
class FilterResult:
    dx: np.ndarray
    active: np.ndarray          # row indices with slack < tol
    clamped: bool               # dx differs from the request beyond tol
    degenerate: bool = False    # solver gave up; dx = 0
    kkt_residual: float = 0.0
    iterations: int = 0
    constraints: ConstraintSet = field(default_factory=ConstraintSet.empty)


# ---------------------------------------------------------------------------
# QP: dual active-set projection onto {A x >= b}, specialized to 3 unknowns.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _solve_working_set(A, b, dxd, W, nW):
    """Equality-constrained projection onto the working-set rows.

    Returns (x, lam, ok); ok = False when the rows are linearly dependent.
    """
    x = dxd.copy()
    lam = np.zeros(3)
    if nW == 0:
        return x, lam, True
    G = np.zeros((3, 3))
    rhs = np.zeros(3)
    for i in range(nW):
        ri = W[i]
        rhs[i] = b[ri] - (A[ri, 0] * dxd[0] + A[ri, 1] * dxd[1] + A[ri, 2] * dxd[2])
        for j in range(nW):
            rj = W[j]
            G[i, j] = A[ri, 0] * A[rj, 0] + A[ri, 1] * A[rj, 1] + A[ri, 2] * A[rj, 2]
    if nW == 1:
        if G[0, 0] < 1e-12:
            return x, lam, False
        lam[0] = rhs[0] / G[0, 0]
    elif nW == 2:
        det = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
        if abs(det) < 1e-12:
            return x, lam, False
        lam[0] = (rhs[0] * G[1, 1] - rhs[1] * G[0, 1]) / det
        lam[1] = (rhs[1] * G[0, 0] - rhs[0] * G[1, 0]) / det
    else:
        c00 = G[1, 1] * G[2, 2] - G[1, 2] * G[2, 1]
        c01 = G[1, 2] * G[2, 0] - G[1, 0] * G[2, 2]
        c02 = G[1, 0] * G[2, 1] - G[1, 1] * G[2, 0]
        det = G[0, 0] * c00 + G[0, 1] * c01 + G[0, 2] * c02
        if abs(det) < 1e-12:
            return x, lam, False
        c10 = G[0, 2] * G[2, 1] - G[0, 1] * G[2, 2]
        c11 = G[0, 0] * G[2, 2] - G[0, 2] * G[2, 0]
        c12 = G[0, 1] * G[2, 0] - G[0, 0] * G[2, 1]
        c20 = G[0, 1] * G[1, 2] - G[0, 2] * G[1, 1]
        c21 = G[0, 2] * G[1, 0] - G[0, 0] * G[1, 2]
        c22 = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
        lam[0] = (c00 * rhs[0] + c10 * rhs[1] + c20 * rhs[2]) / det
        lam[1] = (c01 * rhs[0] + c11 * rhs[1] + c21 * rhs[2]) / det
        lam[2] = (c02 * rhs[0] + c12 * rhs[1] + c22 * rhs[2]) / det
    for i in range(nW):
        ri = W[i]
        x[0] += lam[i] * A[ri, 0]
        x[1] += lam[i] * A[ri, 1]
        x[2] += lam[i] * A[ri, 2]
    return x, lam, True


@njit(cache=True)
def _qp_enumerate(A, b, dxd, tol):
    """Exact fallback: try every working set of size <= 3, keep the feasible
    minimum. The optimum of a strictly convex QP is unique, so any minimal
    feasible subset reproduces it. O(m^3) solves; only used when the active
    set loop stalls."""
    m = A.shape[0]
    best = dxd * 0.0
    best_cost = np.inf
    x = np.zeros(3)
    # empty working set
    feasible = True
    for i in range(m):
        if A[i, 0] * dxd[0] + A[i, 1] * dxd[1] + A[i, 2] * dxd[2] < b[i] - tol:
            feasible = False
            break
    if feasible:
        return dxd.copy(), 0
    W = np.empty(3, dtype=np.int64)
    for i in range(m):
        W[0] = i
        xi, li, ok = _solve_working_set(A, b, dxd, W, 1)
        if ok:
            c = (xi[0] - dxd[0]) ** 2 + (xi[1] - dxd[1]) ** 2 + (xi[2] - dxd[2]) ** 2
            if c < best_cost and _feasible(A, b, xi, tol):
                best_cost = c
                best = xi
        for j in range(i + 1, m):
            W[1] = j
            xj, lj, ok = _solve_working_set(A, b, dxd, W, 2)
            if ok:
                c = (xj[0] - dxd[0]) ** 2 + (xj[1] - dxd[1]) ** 2 + (xj[2] - dxd[2]) ** 2
                if c < best_cost and _feasible(A, b, xj, tol):
                    best_cost = c
                    best = xj
            for k in range(j + 1, m):
                W[2] = k
                xk, lk, ok = _solve_working_set(A, b, dxd, W, 3)
                if ok:
                    c = (xk[0] - dxd[0]) ** 2 + (xk[1] - dxd[1]) ** 2 + (xk[2] - dxd[2]) ** 2
                    if c < best_cost and _feasible(A, b, xk, tol):
                        best_cost = c
                        best = xk
    if best_cost < np.inf:
        return best, 0
    return dxd * 0.0, 1


@njit(cache=True)
def _feasible(A, b, x, tol):
    for i in range(A.shape[0]):
        if A[i, 0] * x[0] + A[i, 1] * x[1] + A[i, 2] * x[2] < b[i] - tol:
            return False
    return True


@njit(cache=True)
def _qp_project(A, b, dxd, tol, max_iter):
    """min ||x - dxd|| s.t. A x >= b by a dual active-set sweep.

    Starting at the unconstrained optimum, the most violated row is driven to
    equality along the component of its normal orthogonal to the working set;
    rows whose multiplier would turn negative drop out along the way (partial
    steps). Each addition strictly grows the deviation from dxd, so working
    sets never repeat and the sweep cannot cycle. Returns (x, status,
    iterations); status 1 marks a numerically degenerate system (caller
    enumerates).
    """
    m = A.shape[0]
    W = np.full(3, -1, dtype=np.int64)
    lam = np.zeros(3)
    nW = 0
    x = dxd.copy()
    r = np.zeros(3)
    it = 0
    while it < max_iter:
        it += 1
        # most violated row outside the working set (lowest index on ties)
        worst = -1
        worst_v = tol
        for i in range(m):
            v = b[i] - (A[i, 0] * x[0] + A[i, 1] * x[1] + A[i, 2] * x[2])
            if v > worst_v:
                in_w = False
                for k in range(nW):
                    if W[k] == i:
                        in_w = True
                        break
                if not in_w:
                    worst_v = v
                    worst = i
        if worst < 0:
            return x, 0, it
        p = worst
        lam_p = 0.0
        while it < max_iter:
            it += 1
            # dual direction r solves (N N^T) r = N a_p over active normals N;
            # primal direction z = a_p - N^T r is orthogonal to every active
            # row, so driving p to equality leaves the working set satisfied.
            if nW == 0:
                r[0] = 0.0
                r[1] = 0.0
                r[2] = 0.0
            elif nW == 1:
                r0 = W[0]
                g00 = A[r0, 0] * A[r0, 0] + A[r0, 1] * A[r0, 1] + A[r0, 2] * A[r0, 2]
                if g00 < 1e-14:
                    return dxd * 0.0, 1, it
                r[0] = (A[r0, 0] * A[p, 0] + A[r0, 1] * A[p, 1]
                        + A[r0, 2] * A[p, 2]) / g00
            elif nW == 2:
                r0 = W[0]
                r1 = W[1]
                g00 = A[r0, 0] * A[r0, 0] + A[r0, 1] * A[r0, 1] + A[r0, 2] * A[r0, 2]
                g01 = A[r0, 0] * A[r1, 0] + A[r0, 1] * A[r1, 1] + A[r0, 2] * A[r1, 2]
                g11 = A[r1, 0] * A[r1, 0] + A[r1, 1] * A[r1, 1] + A[r1, 2] * A[r1, 2]
                h0 = A[r0, 0] * A[p, 0] + A[r0, 1] * A[p, 1] + A[r0, 2] * A[p, 2]
                h1 = A[r1, 0] * A[p, 0] + A[r1, 1] * A[p, 1] + A[r1, 2] * A[p, 2]
                det = g00 * g11 - g01 * g01
                if abs(det) < 1e-14:
                    return dxd * 0.0, 1, it
                r[0] = (h0 * g11 - h1 * g01) / det
                r[1] = (h1 * g00 - h0 * g01) / det
            else:
                r0 = W[0]
                r1 = W[1]
                r2 = W[2]
                g00 = A[r0, 0] * A[r0, 0] + A[r0, 1] * A[r0, 1] + A[r0, 2] * A[r0, 2]
                g01 = A[r0, 0] * A[r1, 0] + A[r0, 1] * A[r1, 1] + A[r0, 2] * A[r1, 2]
                g02 = A[r0, 0] * A[r2, 0] + A[r0, 1] * A[r2, 1] + A[r0, 2] * A[r2, 2]
                g11 = A[r1, 0] * A[r1, 0] + A[r1, 1] * A[r1, 1] + A[r1, 2] * A[r1, 2]
                g12 = A[r1, 0] * A[r2, 0] + A[r1, 1] * A[r2, 1] + A[r1, 2] * A[r2, 2]
                g22 = A[r2, 0] * A[r2, 0] + A[r2, 1] * A[r2, 1] + A[r2, 2] * A[r2, 2]
                h0 = A[r0, 0] * A[p, 0] + A[r0, 1] * A[p, 1] + A[r0, 2] * A[p, 2]
                h1 = A[r1, 0] * A[p, 0] + A[r1, 1] * A[p, 1] + A[r1, 2] * A[p, 2]
                h2 = A[r2, 0] * A[p, 0] + A[r2, 1] * A[p, 1] + A[r2, 2] * A[p, 2]
                c00 = g11 * g22 - g12 * g12
                c01 = g12 * g02 - g01 * g22
                c02 = g01 * g12 - g11 * g02
                det = g00 * c00 + g01 * c01 + g02 * c02
                if abs(det) < 1e-14:
                    return dxd * 0.0, 1, it
                c11 = g00 * g22 - g02 * g02
                c12 = g01 * g02 - g00 * g12
                c22 = g00 * g11 - g01 * g01
                r[0] = (c00 * h0 + c01 * h1 + c02 * h2) / det
                r[1] = (c01 * h0 + c11 * h1 + c12 * h2) / det
                r[2] = (c02 * h0 + c12 * h1 + c22 * h2) / det
            z0 = A[p, 0]
            z1 = A[p, 1]
            z2 = A[p, 2]
            for k in range(nW):
                rk = W[k]
                z0 -= r[k] * A[rk, 0]
                z1 -= r[k] * A[rk, 1]
                z2 -= r[k] * A[rk, 2]
            d = A[p, 0] * z0 + A[p, 1] * z1 + A[p, 2] * z2
            # longest step before some multiplier hits zero (lowest k on ties)
            t1 = np.inf
            kb = -1
            for k in range(nW):
                if r[k] > 1e-12:
                    tk = lam[k] / r[k]
                    if tk < t1:
                        t1 = tk
                        kb = k
            # three independent normals span R^3, so z is pure rounding noise
            # there: only the dual (multiplier-trading) step is meaningful
            if d > 1e-16 and nW < 3:
                vp = b[p] - (A[p, 0] * x[0] + A[p, 1] * x[1] + A[p, 2] * x[2])
                if vp < 0.0:
                    vp = 0.0
                t2 = vp / d
                t = t2 if t2 < t1 else t1
                x[0] += t * z0
                x[1] += t * z1
                x[2] += t * z2
                lam_p += t
                for k in range(nW):
                    lam[k] -= t * r[k]
                if t2 <= t1:
                    # p reaches equality: joins with its accumulated multiplier
                    W[nW] = p
                    lam[nW] = lam_p
                    nW += 1
                    break
            else:
                # a_p lies in the span of the working set: trade multiplier
                # mass toward p until the blocking row leaves
                if kb < 0:
                    return dxd * 0.0, 1, it
                lam_p += t1
                for k in range(nW):
                    lam[k] -= t1 * r[k]
            # partial step: the blocking row leaves, then p is re-resolved
            lam[kb] = 0.0
            for k in range(kb, nW - 1):
                W[k] = W[k + 1]
                lam[k] = lam[k + 1]
            nW -= 1
    return dxd * 0.0, 1, it


@njit(cache=True)
def _qp_core(A, b, dxd, tol, max_iter):
    """Solve, then summarize: active rows (slack < tol), worst violation,
    and the deviation ||x - dxd||. Keeping this in compiled code holds the
    per-cycle cost well under the control period."""
    x, status, it = _qp_project(A, b, dxd, tol, max_iter)
    if status != 0:
        x, status = _qp_enumerate(A, b, dxd, tol)
    m = A.shape[0]
    active = np.empty(m, dtype=np.int64)
    na = 0
    primal = 0.0
    for i in range(m):
        s = A[i, 0] * x[0] + A[i, 1] * x[1] + A[i, 2] * x[2] - b[i]
        if s < tol:
            active[na] = i
            na += 1
        if -s > primal:
            primal = -s
    dev = np.sqrt((x[0] - dxd[0]) ** 2 + (x[1] - dxd[1]) ** 2 + (x[2] - dxd[2]) ** 2)
    return x, status, it, primal, dev, active[:na].copy()


def solve_qp(dx_desired, cs: ConstraintSet, cfg: FilterConfig) -> FilterResult:
    """Exact projection of the desired increment onto the constraint set.

    The converged active-set iterate satisfies stationarity by construction
    (x - dx_d is a nonnegative combination of working-set normals), so the
    reported KKT residual is the worst primal violation.
    """
    dxd = as_vec3(dx_desired)
    if len(cs) == 0:
        return FilterResult(dx=dxd.copy(), active=np.zeros(0, dtype=np.int64),
                            clamped=False, constraints=cs)
    x, status, it, primal, dev, active = _qp_core(
        cs.A, cs.b, dxd, cfg.tol, 50 + 10 * len(cs))
    degenerate = status != 0
    return FilterResult(dx=x, active=active, clamped=bool(dev > cfg.tol),
                        degenerate=degenerate,
                        kkt_residual=float("nan") if degenerate else primal,
                        iterations=it, constraints=cs)


# ---------------------------------------------------------------------------
# Constraint assembly (conditions 1-3)
# ---------------------------------------------------------------------------

def build_constraints(fixture: TriMesh, x, cfg: FilterConfig,
                      radius: float | None = None) -> ConstraintSet:
    """Half-space rows from every culled face, per the closest-point region.

    `radius` overrides the cull sphere (defaults to cfg.cull_radius); callers
    that know their per-cycle step can pass a tighter reachable bound.

    Face-plane rows whose closest point is off the face interior (condition 3)
    carry offsets capped at probe_radius - distance(x, face), so a face that
    is truly satisfied can never assert a violated row. Every row is then
    inactive (b <= 0) at any compliant x and the projection stays feasible.

    Raises PenetrationFaultError when x sits strictly inside the fixture
    (beyond tol); detection uses the pseudonormal sign at the nearest feature.
    """
    x = as_vec3(x)
    r = cfg.cull_radius if radius is None else radius
    if r <= 0:
        raise FilterError("cull radius must be > 0")
    # one exact closest-point pass over the conservative cull (same face set
    # faces_in_sphere would return, without its second exact pass)
    cand = _cull_candidates(fixture, x, r)
    if len(cand):
        cp, kind, feat = closest_points_on_triangles(x, fixture.triangles[cand])
        dist = np.linalg.norm(x - cp, axis=1)
        within = dist <= r
        cand, cp, kind, feat, dist = (cand[within], cp[within], kind[within],
                                      feat[within], dist[within])
    if len(cand) == 0:
        return ConstraintSet.empty()
    diff = x - cp

    _check_penetration(fixture, x, cand, cp, kind, feat, dist, cfg.tol)

    n_face = fixture.face_normals[cand]
    dots = np.einsum("ij,ij->i", n_face, diff)
    pos = dots >= -1e-12

    rows_n, rows_b, rows_f, rows_c, rows_k, rows_id = [], [], [], [], [], []
    # honest per-face offset cap: a face at true distance d grants exactly
    # r - d of violation, never more (a plane through an off-face closest
    # point underestimates clearance when its normal is misaligned, and the
    # extended plane would otherwise assert violations for satisfied faces)
    b_cap = cfg.probe_radius - dist

    def add(mask, normals, cond, kinds, feat_ids, cap=False):
        if not np.any(mask):
            return
        nn = normals[mask]
        cps = cp[mask]
        bs = cfg.probe_radius - np.einsum("ij,ij->i", nn, x - cps)
        if cap:
            bs = np.minimum(bs, b_cap[mask])
        rows_n.append(nn)
        rows_b.append(bs)
        rows_f.append(cand[mask])
        rows_c.append(np.full(mask.sum(), cond, dtype=np.int8))
        rows_k.append(kinds[mask])
        rows_id.append(feat_ids[mask])

    # condition 1: interior closest point on the positive side of the face
    interior = (kind == FeatureKind.INTERIOR) & pos
    add(interior, n_face, 1, kind, np.full(len(cand), -1, dtype=np.int64))

    radial_ok = dist > 1e-12
    radial = diff / np.where(radial_ok, dist, 1.0)[:, None]

    # edges: classify the dihedral across the shared edge
    is_edge = kind == FeatureKind.EDGE
    if np.any(is_edge):
        eidx = fixture.face_edges[cand, np.clip(feat, 0, 2)]
        conv = fixture.edge_convexities[eidx]
        # condition 2: convex edge, constraint along x - cp
        convex = is_edge & (conv == Convexity.CONVEX)
        add(convex & radial_ok, radial, 2, kind, eidx)
        # condition 3: concave (or planar) edge, face-normal plane per incident
        # face, offset capped by the face's true clearance
        concave = is_edge & (conv != Convexity.CONVEX) & pos
        add(concave, n_face, 3, kind, eidx, cap=True)
        # exact touch on a convex edge: radial direction undefined, fall back
        add(convex & ~radial_ok & pos, n_face, 2, kind, eidx)

    # vertices: condition 2 when the fan is convex, face-normal fallback otherwise
    is_vert = kind == FeatureKind.VERTEX
    if np.any(is_vert):
        vid = fixture.faces[cand, np.clip(feat, 0, 2)]
        vconv = fixture.vertex_convex[vid]
        add(is_vert & vconv & radial_ok, radial, 2, kind, vid)
        add(is_vert & (~vconv | ~radial_ok) & pos, n_face, 3, kind, vid, cap=True)

    if not rows_n:
        return ConstraintSet.empty()
    A = np.concatenate(rows_n)
    b = np.concatenate(rows_b)
    faces = np.concatenate(rows_f)
    conds = np.concatenate(rows_c)
    kinds = np.concatenate(rows_k).astype(np.int8)
    fids = np.concatenate(rows_id)

    # deterministic order, then drop duplicate planes
    order = np.lexsort((conds, faces))
    A, b, faces, conds, kinds, fids = (a[order] for a in (A, b, faces, conds, kinds, fids))
    keep = _dedup_rows(A, b)

    A, b, faces, conds, kinds, fids = (a[keep] for a in (A, b, faces, conds, kinds, fids))
    if len(b) > cfg.n_max:
        # keep the most binding rows (largest b first), stable for determinism
        top = np.argsort(-b, kind="stable")[:cfg.n_max]
        top.sort()
        A, b, faces, conds, kinds, fids = (a[top] for a in (A, b, faces, conds, kinds, fids))
    return ConstraintSet(A=A, b=b, faces=faces, conditions=conds, kinds=kinds, features=fids)


def _dedup_rows(A, b):
    k = len(b)
    if k <= 1:
        return np.arange(k)
    dots = A @ A.T
    db = np.abs(b[:, None] - b[None, :])
    dup = (dots > _DEDUP_DOT) & (db < _DEDUP_B)
    keep = np.ones(k, dtype=bool)
    for i in range(k):
        if keep[i]:
            later = np.nonzero(dup[i, i + 1:])[0]
            keep[i + 1 + later] = False
    return np.nonzero(keep)[0]


def _check_penetration(fixture, x, cand, cp, kind, feat, dist, tol):
    """Inside test via the angle-weighted pseudonormal at the nearest feature."""
    k = int(np.argmin(dist))
    d = dist[k]
    if d <= tol:
        return  # on the surface: not strictly inside
    fi = int(cand[k])
    kd = int(kind[k])
    if kd == FeatureKind.INTERIOR:
        pn = fixture.face_normals[fi]
    elif kd == FeatureKind.EDGE:
        eidx = int(fixture.face_edges[fi, int(feat[k])])
        fa, fb = fixture.edge_faces[eidx]
        pn = fixture.face_normals[fa] + (fixture.face_normals[fb] if fb >= 0 else 0.0)
    else:
        vid = int(fixture.faces[fi, int(feat[k])])
        pn = _vertex_pseudonormals(fixture)[vid]
    if float(np.dot(pn, x - cp[k])) < 0.0:
        raise PenetrationFaultError(depth=d, point=x)


_PSEUDO_CACHE = "_vertex_pseudonormal_cache"


def _vertex_pseudonormals(mesh: TriMesh) -> np.ndarray:
    """Angle-weighted vertex normals (sign-correct for inside/outside tests)."""
    cached = getattr(mesh, _PSEUDO_CACHE, None)
    if cached is not None:
        return cached
    t = mesh.triangles
    n = mesh.face_normals
    out = np.zeros((mesh.n_vertices, 3))
    for c in range(3):
        e1 = t[:, (c + 1) % 3] - t[:, c]
        e2 = t[:, (c + 2) % 3] - t[:, c]
        cosang = np.einsum("ij,ij->i", e1, e2) / (
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(out, mesh.faces[:, c], n * ang[:, None])
    setattr(mesh, _PSEUDO_CACHE, out)
    return out


def filter_step(x, x_ref, fixture: TriMesh, cfg: FilterConfig):
    """One control cycle: constraints at x, then project x_ref - x onto them.

    Constraints come from the faces reachable this cycle (probe radius plus
    twice the requested step, plus slack): a face farther away cannot lose
    its probe-radius clearance under any projected move of this size, while
    its plane — extended far beyond the face itself — would over-restrain
    curved fixtures at range. If the solved move ever exceeds the reachable
    bound, the cycle is re-solved against the full cull sphere.
    """
    x = as_vec3(x)
    x_ref = as_vec3(x_ref)
    dxd = x_ref - x
    step = float(np.linalg.norm(dxd))
    if step > cfg.cull_radius - cfg.probe_radius:
        raise FilterError(
            f"reference step {step:.4f} m exceeds cull_radius - probe_radius; clamp upstream")
    radius = min(cfg.cull_radius, cfg.probe_radius + 2.0 * step + 1e-4)
    cs = build_constraints(fixture, x, cfg, radius=radius)
    res = solve_qp(dxd, cs, cfg)
    if radius < cfg.cull_radius and float(np.linalg.norm(res.dx)) > radius - cfg.probe_radius:
        cs = build_constraints(fixture, x, cfg)
        res = solve_qp(dxd, cs, cfg)
    return x + res.dx, res
