"""Projection, inclusion, signed-distance and sampling kernels with gradients.

All proximity energies in the pipeline use *squared* distances, so vertex
gradients are reported for the squared distance: d(d^2)/dv_i = 2 w_i (q - p),
via the envelope theorem applied to the projection least-squares problem.

Closest-point queries run through a flat AABB hierarchy; surfaces below 64
elements get a single-leaf tree, which degenerates to brute force. Structures
are refit in place when vertices move and rebuilt once drift exceeds 10% of
the mean edge length.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .meshes import HexMesh, SurfaceMesh, TetMesh, TET_FACES, det3

BRUTE_FORCE_LIMIT = 64
REBUILD_DRIFT_FRACTION = 0.1

# Projection region codes.
REGION_INTERIOR = 0
REGION_EDGE01 = 1
REGION_EDGE12 = 2
REGION_EDGE20 = 3
REGION_VERTEX0 = 4
REGION_VERTEX1 = 5
REGION_VERTEX2 = 6


class GeometryError(Exception):
    pass


@dataclass
class ProjectionResult:
    """Closest point q on an element, its barycentric weights and squared distance."""

    point: np.ndarray
    element: int
    weights: np.ndarray
    squared_distance: float


@dataclass
class SignedDistanceSample:
    """Signed distance (negative inside) and its spatial gradient where defined."""

    value: float
    gradient: np.ndarray


@njit(cache=True)
def _edge_param(px, py, pz, ax, ay, az, bx, by, bz):
    dx, dy, dz = bx - ax, by - ay, bz - az
    dd = dx * dx + dy * dy + dz * dz
    if dd <= 0.0:
        return 0.0
    t = ((px - ax) * dx + (py - ay) * dy + (pz - az) * dz) / dd
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return t


@njit(cache=True)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on one triangle: (d2, qx, qy, qz, w0, w1, w2, region)."""
    e1x, e1y, e1z = bx - ax, by - ay, bz - az
    e2x, e2y, e2z = cx - ax, cy - ay, cz - az
    a11 = e1x * e1x + e1y * e1y + e1z * e1z
    a22 = e2x * e2x + e2y * e2y + e2z * e2z
    a12 = e1x * e2x + e1y * e2y + e1z * e2z
    det = a11 * a22 - a12 * a12
    if det > 0.0:
        rx, ry, rz = px - ax, py - ay, pz - az
        b1 = rx * e1x + ry * e1y + rz * e1z
        b2 = rx * e2x + ry * e2y + rz * e2z
        w1 = (a22 * b1 - a12 * b2) / det
        w2 = (a11 * b2 - a12 * b1) / det
        w0 = 1.0 - w1 - w2
        if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
            qx = ax + w1 * e1x + w2 * e2x
            qy = ay + w1 * e1y + w2 * e2y
            qz = az + w1 * e1z + w2 * e2z
            dx, dy, dz = px - qx, py - qy, pz - qz
            return dx * dx + dy * dy + dz * dz, qx, qy, qz, w0, w1, w2, REGION_INTERIOR

    best = np.inf
    qx = qy = qz = 0.0
    w0 = w1 = w2 = 0.0
    region = REGION_VERTEX0
    for edge in range(3):
        if edge == 0:
            x0, y0, z0, x1, y1, z1 = ax, ay, az, bx, by, bz
        elif edge == 1:
            x0, y0, z0, x1, y1, z1 = bx, by, bz, cx, cy, cz
        else:
            x0, y0, z0, x1, y1, z1 = cx, cy, cz, ax, ay, az
        t = _edge_param(px, py, pz, x0, y0, z0, x1, y1, z1)
        gx = x0 + t * (x1 - x0)
        gy = y0 + t * (y1 - y0)
        gz = z0 + t * (z1 - z0)
        dx, dy, dz = px - gx, py - gy, pz - gz
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best:
            best = d2
            qx, qy, qz = gx, gy, gz
            if t <= 0.0:
                region = REGION_VERTEX0 + edge
            elif t >= 1.0:
                region = REGION_VERTEX0 + (edge + 1) % 3
            else:
                region = REGION_EDGE01 + edge
            if edge == 0:
                w0, w1, w2 = 1.0 - t, t, 0.0
            elif edge == 1:
                w0, w1, w2 = 0.0, 1.0 - t, t
            else:
                w0, w1, w2 = t, 0.0, 1.0 - t
    return best, qx, qy, qz, w0, w1, w2, region


@njit(cache=True)
def _box_dist2(px, py, pz, lo, hi):
    d = 0.0
    for k in range(3):
        p = px if k == 0 else (py if k == 1 else pz)
        if p < lo[k]:
            d += (lo[k] - p) ** 2
        elif p > hi[k]:
            d += (p - hi[k]) ** 2
    return d


@njit(cache=True)
def _bvh_closest_triangles(
    queries,
    points, tris, perm,
    node_lo, node_hi, node_left, node_right, node_start, node_count,
    out_tri, out_d2, out_q, out_w, out_region,
):
    stack = np.empty(128, dtype=np.int64)
    for qi in range(queries.shape[0]):
        px, py, pz = queries[qi, 0], queries[qi, 1], queries[qi, 2]
        best = np.inf
        best_tri = -1
        bqx = bqy = bqz = 0.0
        bw0 = bw1 = bw2 = 0.0
        bregion = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(px, py, pz, node_lo[node], node_hi[node]) > best:
                continue
            if node_left[node] < 0:
                for i in range(node_start[node], node_start[node] + node_count[node]):
                    t = perm[i]
                    ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
                    d2, gx, gy, gz, w0, w1, w2, region = _closest_on_triangle(
                        px, py, pz,
                        points[ia, 0], points[ia, 1], points[ia, 2],
                        points[ib, 0], points[ib, 1], points[ib, 2],
                        points[ic, 0], points[ic, 1], points[ic, 2],
                    )
                    if d2 < best or (d2 == best and t < best_tri):
                        best = d2
                        best_tri = t
                        bqx, bqy, bqz = gx, gy, gz
                        bw0, bw1, bw2 = w0, w1, w2
                        bregion = region
            else:
                l, r = node_left[node], node_right[node]
                dl = _box_dist2(px, py, pz, node_lo[l], node_hi[l])
                dr = _box_dist2(px, py, pz, node_lo[r], node_hi[r])
                if dl <= dr:
                    if dr <= best:
                        stack[top] = r
                        top += 1
                    if dl <= best:
                        stack[top] = l
                        top += 1
                else:
                    if dl <= best:
                        stack[top] = l
                        top += 1
                    if dr <= best:
                        stack[top] = r
                        top += 1
        out_tri[qi] = best_tri
        out_d2[qi] = best
        out_q[qi, 0], out_q[qi, 1], out_q[qi, 2] = bqx, bqy, bqz
        out_w[qi, 0], out_w[qi, 1], out_w[qi, 2] = bw0, bw1, bw2
        out_region[qi] = bregion


@njit(cache=True)
def _bvh_locate_tets(
    queries,
    v0, minv,
    node_lo, node_hi, node_left, node_right, node_start, node_count,
    perm, tol,
    out_tet, out_w,
):
    stack = np.empty(128, dtype=np.int64)
    for qi in range(queries.shape[0]):
        px, py, pz = queries[qi, 0], queries[qi, 1], queries[qi, 2]
        found = -1
        fw1 = fw2 = fw3 = 0.0
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(px, py, pz, node_lo[node], node_hi[node]) > 0.0:
                continue
            if node_left[node] < 0:
                for i in range(node_start[node], node_start[node] + node_count[node]):
                    t = perm[i]
                    if found >= 0 and t >= found:
                        continue
                    rx = px - v0[t, 0]
                    ry = py - v0[t, 1]
                    rz = pz - v0[t, 2]
                    w1 = minv[t, 0, 0] * rx + minv[t, 0, 1] * ry + minv[t, 0, 2] * rz
                    w2 = minv[t, 1, 0] * rx + minv[t, 1, 1] * ry + minv[t, 1, 2] * rz
                    w3 = minv[t, 2, 0] * rx + minv[t, 2, 1] * ry + minv[t, 2, 2] * rz
                    w0 = 1.0 - w1 - w2 - w3
                    if w0 >= -tol and w1 >= -tol and w2 >= -tol and w3 >= -tol:
                        found = t
                        fw1, fw2, fw3 = w1, w2, w3
            else:
                stack[top] = node_left[node]
                top += 1
                stack[top] = node_right[node]
                top += 1
        out_tet[qi] = found
        out_w[qi, 0] = 1.0 - fw1 - fw2 - fw3
        out_w[qi, 1] = fw1
        out_w[qi, 2] = fw2
        out_w[qi, 3] = fw3


class _AabbTree:
    """Flat AABB hierarchy over element bounding boxes (preorder layout)."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, leaf_size: int = 8):
        n = len(lo)
        if n == 0:
            raise GeometryError("empty element set")
        if n < BRUTE_FORCE_LIMIT:
            leaf_size = n
        self.perm = np.arange(n, dtype=np.int64)
        centers = 0.5 * (lo + hi)
        node_lo, node_hi = [], []
        left, right, start, count = [], [], [], []

        def build(b, e):
            idx = len(node_lo)
            node_lo.append(None)
            node_hi.append(None)
            left.append(-1)
            right.append(-1)
            start.append(b)
            count.append(e - b)
            sel = self.perm[b:e]
            node_lo[idx] = lo[sel].min(axis=0)
            node_hi[idx] = hi[sel].max(axis=0)
            if e - b > leaf_size:
                cen = centers[sel]
                axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
                order = np.argsort(cen[:, axis], kind="stable")
                self.perm[b:e] = sel[order]
                mid = b + (e - b) // 2
                left[idx] = build(b, mid)
                right[idx] = build(mid, e)
                start[idx] = -1
                count[idx] = 0
            return idx

        import sys

        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 10000))
        try:
            build(0, n)
        finally:
            sys.setrecursionlimit(old_limit)
        self.node_lo = np.ascontiguousarray(np.array(node_lo))
        self.node_hi = np.ascontiguousarray(np.array(node_hi))
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)

    def refit(self, lo: np.ndarray, hi: np.ndarray) -> None:
        for idx in range(len(self.left) - 1, -1, -1):
            if self.left[idx] < 0:
                sel = self.perm[self.start[idx]: self.start[idx] + self.count[idx]]
                self.node_lo[idx] = lo[sel].min(axis=0)
                self.node_hi[idx] = hi[sel].max(axis=0)
            else:
                l, r = self.left[idx], self.right[idx]
                self.node_lo[idx] = np.minimum(self.node_lo[l], self.node_lo[r])
                self.node_hi[idx] = np.maximum(self.node_hi[l], self.node_hi[r])


def _tri_boxes(points: np.ndarray, tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    corners = points[tris]
    return corners.min(axis=1), corners.max(axis=1)


class TriangleQuery:
    """Batched closest-point queries against a (possibly moving) triangle set.

    Degenerate (zero-area) triangles are skipped with a warning; an
    all-degenerate set is an error.
    """

    def __init__(self, points: np.ndarray, tris: np.ndarray):
        self.tris = np.ascontiguousarray(tris, dtype=np.int64)
        cr = np.cross(
            points[tris[:, 1]] - points[tris[:, 0]],
            points[tris[:, 2]] - points[tris[:, 0]],
        )
        valid = np.linalg.norm(cr, axis=1) > 1e-14
        if not valid.any():
            raise GeometryError("all triangles are degenerate")
        if not valid.all():
            warnings.warn(f"skipping {int((~valid).sum())} degenerate triangles")
        self.valid_ids = np.flatnonzero(valid).astype(np.int64)
        self._rebuild(points)

    def _rebuild(self, points: np.ndarray) -> None:
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.build_points = self.points.copy()
        sub = self.tris[self.valid_ids]
        lo, hi = _tri_boxes(self.points, sub)
        self.tree = _AabbTree(lo, hi)
        edges = np.concatenate(
            [
                self.points[sub[:, 1]] - self.points[sub[:, 0]],
                self.points[sub[:, 2]] - self.points[sub[:, 1]],
                self.points[sub[:, 0]] - self.points[sub[:, 2]],
            ]
        )
        self.mean_edge = float(np.linalg.norm(edges, axis=1).mean())

    def update(self, points: np.ndarray) -> None:
        """Refit boxes to moved vertices; rebuild after too much drift."""
        drift = float(np.abs(points - self.build_points).max())
        if drift > REBUILD_DRIFT_FRACTION * self.mean_edge:
            self._rebuild(points)
            return
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        sub = self.tris[self.valid_ids]
        lo, hi = _tri_boxes(self.points, sub)
        self.tree.refit(lo, hi)

    def query(self, queries: np.ndarray):
        """Returns (tri_id, d2, q, w, region) arrays over the query batch."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        n = len(q)
        out_tri = np.empty(n, dtype=np.int64)
        out_d2 = np.empty(n)
        out_q = np.empty((n, 3))
        out_w = np.empty((n, 3))
        out_region = np.empty(n, dtype=np.int64)
        _bvh_closest_triangles(
            q, self.points, self.tris, self.valid_ids[self.tree.perm],
            self.tree.node_lo, self.tree.node_hi, self.tree.left, self.tree.right,
            self.tree.start, self.tree.count,
            out_tri, out_d2, out_q, out_w, out_region,
        )
        return out_tri, out_d2, out_q, out_w, out_region


class SurfaceQuery(TriangleQuery):
    """TriangleQuery over a SurfaceMesh; quads are queried via triangulation."""

    def __init__(self, surface: SurfaceMesh, points: np.ndarray | None = None):
        self.surface = surface
        tris, self.tri_to_face = surface.triangulated()
        super().__init__(surface.points if points is None else points, tris)

    def faces_of(self, tri_ids: np.ndarray) -> np.ndarray:
        return self.tri_to_face[tri_ids]


def _boundary_with_owners(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """Boundary triangles (volume-vertex indices) and their owning tets."""
    faces = mesh.tets[:, TET_FACES].reshape(-1, 3)
    owners = np.repeat(np.arange(len(mesh.tets), dtype=np.int64), 4)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    on_boundary = counts[inv] == 1
    return faces[on_boundary], owners[on_boundary]


class TetQuery:
    """Point location, projection and signed distance for a fixed tet mesh."""

    def __init__(self, mesh: TetMesh):
        self.mesh = mesh
        em = mesh.edge_matrices()
        d = det3(em)
        if (np.abs(d) < 1e-300).any():
            raise GeometryError(f"degenerate tet {int(np.argmin(np.abs(d)))}")
        gram = np.swapaxes(em, 1, 2) @ em
        # w = inv(A) E^T (p - v0); A = E^T E is precomputed per tet.
        self.minv = np.ascontiguousarray(np.linalg.inv(gram) @ np.swapaxes(em, 1, 2))
        self.v0 = np.ascontiguousarray(mesh.points[mesh.tets[:, 0]])
        corners = mesh.points[mesh.tets]
        self.tree = _AabbTree(corners.min(axis=1), corners.max(axis=1))
        self.boundary_tris, self.boundary_owner = _boundary_with_owners(mesh)
        self.boundary_query = TriangleQuery(mesh.points, self.boundary_tris)
        scale = float(np.abs(mesh.points).max()) + 1.0
        self.tol = 1e-12 * scale

    def locate(self, queries: np.ndarray):
        """Containing tet per query (-1 outside) plus tet barycentric weights."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        out_tet = np.empty(len(q), dtype=np.int64)
        out_w = np.empty((len(q), 4))
        _bvh_locate_tets(
            q, self.v0, self.minv,
            self.tree.node_lo, self.tree.node_hi, self.tree.left, self.tree.right,
            self.tree.start, self.tree.count, self.tree.perm, self.tol,
            out_tet, out_w,
        )
        return out_tet, out_w

    def contains(self, queries: np.ndarray) -> np.ndarray:
        return self.locate(queries)[0] >= 0

    def project(self, queries: np.ndarray):
        """Global closest point: (tet_id, w4, q, d2) per query."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        tet_id, w4 = self.locate(q)
        qpts = q.copy()
        d2 = np.zeros(len(q))
        outside = tet_id < 0
        if outside.any():
            tri, tri_d2, tri_q, tri_w, _ = self.boundary_query.query(q[outside])
            owners = self.boundary_owner[tri]
            tet_id[outside] = owners
            d2[outside] = tri_d2
            qpts[outside] = tri_q
            w = np.zeros((int(outside.sum()), 4))
            face_corners = self.boundary_tris[tri]
            tet_corners = self.mesh.tets[owners]
            rows = np.arange(len(w))
            for c in range(3):
                pos = np.argmax(tet_corners == face_corners[:, c][:, None], axis=1)
                w[rows, pos] = tri_w[:, c]
            w4[outside] = w
        return tet_id, w4, qpts, d2

    def signed_distance(self, queries: np.ndarray):
        """Signed distances (negative inside) and gradients; batched."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        _, d2, qpts, _, _ = self.boundary_query.query(q)
        dist = np.sqrt(d2)
        inside = self.contains(q)
        sign = np.where(inside, -1.0, 1.0)
        grad = np.zeros_like(q)
        ok = dist > 0
        grad[ok] = sign[ok, None] * (q[ok] - qpts[ok]) / dist[ok, None]
        return sign * dist, grad


def project_to_triangle_mesh(p, surface: SurfaceMesh) -> ProjectionResult:
    """Global minimum-distance projection of one point onto a triangle surface."""
    query = SurfaceQuery(surface)
    tri, d2, q, w, _ = query.query(np.asarray(p, dtype=np.float64))
    return ProjectionResult(
        point=q[0],
        element=int(query.faces_of(tri)[0]),
        weights=w[0],
        squared_distance=float(d2[0]),
    )


def project_to_tet_mesh(p, tet_mesh: TetMesh) -> ProjectionResult:
    tet_id, w4, q, d2 = TetQuery(tet_mesh).project(np.asarray(p, dtype=np.float64))
    return ProjectionResult(
        point=q[0], element=int(tet_id[0]), weights=w4[0],
        squared_distance=float(d2[0]),
    )


def point_in_mesh(p, tet_mesh: TetMesh) -> bool:
    return bool(TetQuery(tet_mesh).contains(np.asarray(p, dtype=np.float64))[0])


def signed_distance_tet_mesh(p, tet_mesh: TetMesh) -> SignedDistanceSample:
    value, grad = TetQuery(tet_mesh).signed_distance(np.asarray(p, dtype=np.float64))
    return SignedDistanceSample(value=float(value[0]), gradient=grad[0])


def _plane_projector(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the triangle's supporting plane."""
    e = np.stack([b - a, c - a], axis=1)  # (3, 2)
    gram = e.T @ e
    return e @ np.linalg.inv(gram) @ e.T


def projection_gradients(p, surface: SurfaceMesh, result: ProjectionResult,
                         plane_extended: bool = False):
    """Gradients of one surface projection.

    Returns (dq_dp, dd2_dv): the 3x3 derivative of the projected point q with
    respect to p, and the squared-distance gradients 2 w_i (q - p) for the
    three triangle vertices. With plane_extended=True the closest triangle is
    treated as extending to a full plane, which keeps dq_dp non-degenerate on
    ridges and at vertex clamps.
    """
    p = np.asarray(p, dtype=np.float64)
    tris, tri_to_face = surface.triangulated()
    face_tris = np.flatnonzero(tri_to_face == result.element)
    # Re-identify the winning triangle of this face from the stored weights.
    best = None
    for t in face_tris:
        a, b, c = surface.points[tris[t]]
        d2, qx, qy, qz, w0, w1, w2, region = _closest_on_triangle(
            p[0], p[1], p[2], a[0], a[1], a[2], b[0], b[1], b[2], c[0], c[1], c[2]
        )
        if best is None or d2 < best[0]:
            best = (d2, np.array([qx, qy, qz]), np.array([w0, w1, w2]), region, t)
    d2, q, w, region, t = best
    a, b, c = surface.points[tris[t]]
    if plane_extended or region == REGION_INTERIOR:
        dq_dp = _plane_projector(a, b, c)
    elif region in (REGION_EDGE01, REGION_EDGE12, REGION_EDGE20):
        ends = {REGION_EDGE01: (a, b), REGION_EDGE12: (b, c), REGION_EDGE20: (c, a)}
        x, y = ends[region]
        u = y - x
        dq_dp = np.outer(u, u) / float(u @ u)
    else:
        dq_dp = np.zeros((3, 3))
    dd2_dv = 2.0 * w[:, None] * (q - p)[None, :]
    return dq_dp, dd2_dv


def plane_projectors(points: np.ndarray, tris: np.ndarray,
                     tri_ids: np.ndarray) -> np.ndarray:
    """Batched supporting-plane projectors for the given triangles."""
    t = tris[tri_ids]
    e1 = points[t[:, 1]] - points[t[:, 0]]
    e2 = points[t[:, 2]] - points[t[:, 0]]
    e = np.stack([e1, e2], axis=2)  # (n, 3, 2)
    gram = np.swapaxes(e, 1, 2) @ e
    return e @ np.linalg.inv(gram) @ np.swapaxes(e, 1, 2)


def sample_surface(surface: SurfaceMesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform samples on a surface: (points (n,3), face ids (n,)).

    Deterministic for a given generator state; rng may be a seed or Generator.
    """
    if n < 1:
        raise GeometryError("need at least one sample")
    if len(surface.faces) == 0:
        raise GeometryError("empty surface")
    rng = np.random.default_rng(rng)
    tris, tri_to_face = surface.triangulated()
    p = surface.points
    cr = np.cross(p[tris[:, 1]] - p[tris[:, 0]], p[tris[:, 2]] - p[tris[:, 0]])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    total = areas.sum()
    if total <= 0:
        raise GeometryError("surface has zero area")
    cdf = np.cumsum(areas) / total
    pick = np.searchsorted(cdf, rng.random(n), side="right").clip(0, len(tris) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    t = tris[pick]
    pts = w0[:, None] * p[t[:, 0]] + w1[:, None] * p[t[:, 1]] + w2[:, None] * p[t[:, 2]]
    return pts, tri_to_face[pick]
