"""Indexed tetrahedral / hexahedral mesh containers and element kernels.

Conventions used project-wide:

* Tet (v0, v1, v2, v3) is positively oriented when det[v1-v0, v2-v0, v3-v0] > 0.
* Hex corners follow VTK ordering: bottom quad (0,1,2,3) counter-clockwise
  seen from above, then the top quad (4,5,6,7) directly above it.
* Jacobians are stored per cell as 3x3 matrices acting on rest-space edge
  vectors; the identity map always yields identity Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class NonManifoldError(MeshError):
    """Boundary is not a closed 2-manifold; carries the offending entity."""

    def __init__(self, kind: str, entity):
        self.kind = kind
        self.entity = entity
        super().__init__(f"non-manifold {kind}: {entity}")


def _as_points(vertices) -> np.ndarray:
    pts = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise MeshError(f"vertices must be (n, 3), got {pts.shape}")
    return pts


def _as_cells(cells, width: int, n_vertices: int, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(cells, dtype=np.int64))
    if arr.size == 0:
        arr = arr.reshape(0, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise MeshError(f"{what} must be (m, {width}), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_vertices):
        raise MeshError(f"{what} index out of range [0, {n_vertices})")
    return arr


def det3(m: np.ndarray) -> np.ndarray:
    """Determinants of a (..., 3, 3) stack, via the explicit cofactor expansion."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def cof3(m: np.ndarray) -> np.ndarray:
    """Cofactor matrices of a (..., 3, 3) stack: cof3(m)[i, j] = d det / d m[i, j]."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    out = np.empty_like(m)
    out[..., 0, 0] = e * i - f * h
    out[..., 0, 1] = f * g - d * i
    out[..., 0, 2] = d * h - e * g
    out[..., 1, 0] = c * h - b * i
    out[..., 1, 1] = a * i - c * g
    out[..., 1, 2] = b * g - a * h
    out[..., 2, 0] = b * f - c * e
    out[..., 2, 1] = c * d - a * f
    out[..., 2, 2] = a * e - b * d
    return out


def scatter_add(acc: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    """acc[index] += values for (n,) index and (n, 3) values, in index order.

    Uses bincount per component; deterministic and much faster than np.add.at.
    """
    n = acc.shape[0]
    for k in range(3):
        acc[:, k] += np.bincount(index, weights=values[:, k], minlength=n)


# Reference unit-cube corner coordinates in VTK order.
HEX_CORNERS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=np.float64,
)

# Outward-oriented quad faces of the reference hex.
HEX_FACES = np.array(
    [
        [0, 3, 2, 1],  # z-
        [4, 5, 6, 7],  # z+
        [0, 1, 5, 4],  # y-
        [2, 3, 7, 6],  # y+
        [1, 2, 6, 5],  # x+
        [3, 0, 4, 7],  # x-
    ],
    dtype=np.int64,
)

# Outward-oriented triangle faces of a positively oriented tet.
TET_FACES = np.array(
    [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    dtype=np.int64,
)


def _corner_frame_table() -> np.ndarray:
    """Per-corner, the 3 edge-neighbor corners ordered to give a det=+1 frame."""
    table = np.empty((8, 3), dtype=np.int64)
    for k in range(8):
        nbrs = sorted(
            j for j in range(8)
            if int(np.sum(HEX_CORNERS[k] != HEX_CORNERS[j])) == 1
        )
        frame = (HEX_CORNERS[nbrs] - HEX_CORNERS[k]).T
        if det3(frame) < 0:
            nbrs[1], nbrs[2] = nbrs[2], nbrs[1]
        table[k] = nbrs
    return table


HEX_CORNER_NEIGHBORS = _corner_frame_table()

# Diagonal split of a hex into 6 positively oriented tets sharing corners 0-6.
_HEX_TO_TETS = np.array(
    [
        [0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6],
        [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6],
    ],
    dtype=np.int64,
)


@dataclass
class SurfaceMesh:
    """Boundary surface with a map from surface vertices back to volume vertices."""

    points: np.ndarray            # (n, 3)
    faces: np.ndarray             # (m, 3) triangles or (m, 4) quads
    vertex_map: np.ndarray        # (n,) surface index -> volume vertex index

    @property
    def is_quad(self) -> bool:
        return self.faces.shape[1] == 4

    def triangulated(self) -> tuple[np.ndarray, np.ndarray]:
        """Triangle faces plus a map from each triangle to its source face."""
        if not self.is_quad:
            return self.faces, np.arange(len(self.faces), dtype=np.int64)
        q = self.faces
        tris = np.empty((2 * len(q), 3), dtype=np.int64)
        tris[0::2] = q[:, [0, 1, 2]]
        tris[1::2] = q[:, [0, 2, 3]]
        src = np.repeat(np.arange(len(q), dtype=np.int64), 2)
        return tris, src

    def face_areas(self) -> np.ndarray:
        tris, src = self.triangulated()
        p = self.points
        cr = np.cross(p[tris[:, 1]] - p[tris[:, 0]], p[tris[:, 2]] - p[tris[:, 0]])
        tri_area = 0.5 * np.linalg.norm(cr, axis=1)
        areas = np.zeros(len(self.faces))
        np.add.at(areas, src, tri_area)
        return areas

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a (k, 2) sorted-index array."""
        f = self.faces
        w = f.shape[1]
        pairs = np.concatenate([f[:, [i, (i + 1) % w]] for i in range(w)], axis=0)
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)


def _check_boundary_edges(faces: np.ndarray) -> None:
    w = faces.shape[1]
    pairs = np.concatenate([faces[:, [i, (i + 1) % w]] for i in range(w)], axis=0)
    pairs.sort(axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    bad = counts != 2
    if bad.any():
        edge = tuple(int(v) for v in uniq[np.argmax(bad)])
        raise NonManifoldError("boundary edge", edge)


def _boundary_faces(cells: np.ndarray, face_table: np.ndarray) -> np.ndarray:
    faces = cells[:, face_table].reshape(-1, face_table.shape[1])
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if (counts > 2).any():
        first = np.flatnonzero(counts[inv] > 2)[0]
        raise NonManifoldError("face", tuple(int(v) for v in np.sort(faces[first])))
    return faces[counts[inv] == 1]


def _build_surface(points: np.ndarray, faces: np.ndarray) -> SurfaceMesh:
    used = np.unique(faces)
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    surf = SurfaceMesh(points=points[used].copy(), faces=remap[faces], vertex_map=used)
    _check_boundary_edges(surf.faces)
    return surf


@dataclass
class TetMesh:
    """Tetrahedral mesh; tets are stored positively oriented."""

    points: np.ndarray   # (n, 3)
    tets: np.ndarray     # (m, 4)

    def __post_init__(self):
        self.points = _as_points(self.points)
        self.tets = _as_cells(self.tets, 4, len(self.points), "tets")

    @classmethod
    def create(cls, vertices, tets, reorient: bool = False) -> "TetMesh":
        """Validate and build a TetMesh; optionally flip negative-volume tets."""
        mesh = cls(vertices, tets)
        vols = mesh.cell_volumes()
        if (vols == 0).any():
            raise MeshError(f"degenerate tet {int(np.flatnonzero(vols == 0)[0])}")
        neg = vols < 0
        if neg.any():
            if not reorient:
                raise MeshError(
                    f"tet {int(np.flatnonzero(neg)[0])} has negative volume"
                )
            flipped = mesh.tets.copy()
            flipped[neg] = flipped[neg][:, [0, 1, 3, 2]]
            mesh = cls(mesh.points, flipped)
        return mesh

    @property
    def n_vertices(self) -> int:
        return len(self.points)

    def edge_matrices(self, points: np.ndarray | None = None) -> np.ndarray:
        """(m, 3, 3) matrices whose columns are the tet edge vectors from v0."""
        p = self.points if points is None else points
        em = np.swapaxes(p[self.tets[:, 1:]] - p[self.tets[:, :1]], 1, 2)
        return np.ascontiguousarray(em)

    def cell_volumes(self, points: np.ndarray | None = None) -> np.ndarray:
        return det3(self.edge_matrices(points)) / 6.0

    def boundary(self) -> SurfaceMesh:
        return _build_surface(self.points, _boundary_faces(self.tets, TET_FACES))


@dataclass
class HexMesh:
    """Hexahedral mesh in VTK corner order."""

    points: np.ndarray   # (n, 3)
    hexes: np.ndarray    # (m, 8)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = _as_points(self.points)
        self.hexes = _as_cells(self.hexes, 8, len(self.points), "hexes")
        if len(self.hexes):
            sorted_corners = np.sort(self.hexes, axis=1)
            if (np.diff(sorted_corners, axis=1) == 0).any():
                raise MeshError("hex with repeated corner vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.points)

    @property
    def n_hexes(self) -> int:
        return len(self.hexes)

    def cell_volumes(self, points: np.ndarray | None = None) -> np.ndarray:
        p = self.points if points is None else points
        tets = self.hexes[:, _HEX_TO_TETS].reshape(-1, 4)
        em = np.swapaxes(p[tets[:, 1:]] - p[tets[:, :1]], 1, 2)
        return (det3(em) / 6.0).reshape(len(self.hexes), 6).sum(axis=1)

    def boundary(self) -> SurfaceMesh:
        return _build_surface(self.points, _boundary_faces(self.hexes, HEX_FACES))


@dataclass
class CornerTetSet:
    """The 8 corner tetrahedra of every hex, in right-handed corner frames."""

    hex_index: np.ndarray   # (8m,)
    corner: np.ndarray      # (8m,)
    tets: np.ndarray        # (8m, 4) vertex indices, corner vertex first

    def __len__(self) -> int:
        return len(self.tets)


def corner_tets(mesh: HexMesh) -> CornerTetSet:
    """Corner tets certifying local injectivity: one per hex corner.

    Each tet is (corner, n1, n2, n3) with the neighbor order chosen so the
    frame [n1-c, n2-c, n3-c] has determinant +1 on an axis-aligned cube.
    """
    h = mesh.hexes
    m = len(h)
    tets = np.empty((8 * m, 4), dtype=np.int64)
    for k in range(8):
        tets[k::8, 0] = h[:, k]
        tets[k::8, 1:] = h[:, HEX_CORNER_NEIGHBORS[k]]
    return CornerTetSet(
        hex_index=np.repeat(np.arange(m, dtype=np.int64), 8),
        corner=np.tile(np.arange(8, dtype=np.int64), m),
        tets=tets,
    )


def corner_frames(points: np.ndarray, tet_set: CornerTetSet) -> np.ndarray:
    """(8m, 3, 3) edge frames of the corner tets at the given positions."""
    t = tet_set.tets
    em = np.swapaxes(points[t[:, 1:]] - points[t[:, :1]], 1, 2)
    return np.ascontiguousarray(em)


@dataclass
class JacobianField:
    """Per-tet Jacobians of a piecewise-linear map, with rest-space inverses."""

    matrices: np.ndarray       # (m, 3, 3)
    rest_inverse: np.ndarray   # (m, 3, 3) inverse rest edge matrices

    def determinants(self) -> np.ndarray:
        return det3(self.matrices)


def rest_inverses(rest_points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Inverse rest edge matrices; raises on degenerate rest tets."""
    er = np.swapaxes(rest_points[tets[:, 1:]] - rest_points[tets[:, :1]], 1, 2)
    d = det3(er)
    if (np.abs(d) < 1e-300).any():
        raise MeshError(f"degenerate rest tet {int(np.argmin(np.abs(d)))}")
    return np.linalg.inv(er)


def jacobians(
    map_values: np.ndarray,
    tets: np.ndarray,
    rest_points: np.ndarray,
    rest_inv: np.ndarray | None = None,
) -> JacobianField:
    """Jacobians of the map sending rest_points to map_values on each tet."""
    if rest_inv is None:
        rest_inv = rest_inverses(rest_points, tets)
    em = np.swapaxes(map_values[tets[:, 1:]] - map_values[tets[:, :1]], 1, 2)
    return JacobianField(matrices=em @ rest_inv, rest_inverse=rest_inv)


def jacobian_grad_to_vertices(
    grad_j: np.ndarray,
    tets: np.ndarray,
    rest_inv: np.ndarray,
    n_vertices: int,
) -> np.ndarray:
    """Chain per-tet dE/dJ back to per-vertex gradients of the mapped positions."""
    g_em = grad_j @ np.swapaxes(rest_inv, 1, 2)
    out = np.zeros((n_vertices, 3))
    for col in range(3):
        scatter_add(out, tets[:, col + 1], g_em[:, :, col])
    scatter_add(out, tets[:, 0], -g_em.sum(axis=2))
    return out


def measures(mesh: TetMesh | HexMesh) -> dict:
    """Per-cell volumes, boundary face areas and their totals."""
    vols = mesh.cell_volumes()
    surf = mesh.boundary()
    areas = surf.face_areas()
    return {
        "cell_volumes": vols,
        "total_volume": float(vols.sum()),
        "face_areas": areas,
        "total_area": float(areas.sum()),
    }


def extract_boundary(mesh: TetMesh | HexMesh) -> SurfaceMesh:
    """Outward-oriented boundary surface (triangles for tets, quads for hexes)."""
    return mesh.boundary()
