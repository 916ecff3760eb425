"""Procedural meshes for tests, demos and acceptance fixtures."""

from __future__ import annotations

import numpy as np

from .meshes import HexMesh, SurfaceMesh, TetMesh

# Freudenthal subdivision of a cube cell: 6 positively oriented tets sharing
# the 0-6 diagonal; conforming across a uniform grid.
_CELL_TETS = np.array(
    [
        [0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6],
        [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6],
    ],
    dtype=np.int64,
)


def _lattice(cells: np.ndarray, cell_size: float, origin) -> tuple[np.ndarray, np.ndarray]:
    """Welded lattice points and per-cell VTK corner indices for voxel cells."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    offsets = np.array(
        [
            [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
        ],
        dtype=np.int64,
    )
    corner_coords = cells[:, None, :] + offsets[None, :, :]
    flat = corner_coords.reshape(-1, 3)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    points = np.asarray(origin, dtype=np.float64) + uniq * cell_size
    return points, inverse.reshape(-1, 8)


def hex_mesh_from_cells(cells, cell_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> HexMesh:
    from .voxelize import lattice_hex_mesh

    return lattice_hex_mesh(np.asarray(cells), cell_size, origin)


def tet_mesh_from_cells(cells, cell_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> TetMesh:
    points, corners = _lattice(cells, cell_size, origin)
    tets = corners[:, _CELL_TETS].reshape(-1, 4)
    return TetMesh(points, tets)


def block_cells(shape) -> np.ndarray:
    nx, ny, nz = shape
    return np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)


def lshape_cells(n: int) -> np.ndarray:
    """n x n x n block with the (x > n/2, y > n/2) quadrant column removed."""
    cells = block_cells((n, n, n))
    keep = ~((cells[:, 0] >= n // 2) & (cells[:, 1] >= n // 2))
    return cells[keep]


def cube_tet_mesh(n: int = 3, size: float = 1.0, center=(0.0, 0.0, 0.0)) -> TetMesh:
    """Unit-style cube spanning size around center, n^3 cells, 6 tets each."""
    cell = size / n
    origin = np.asarray(center, dtype=np.float64) - size / 2.0
    return tet_mesh_from_cells(block_cells((n, n, n)), cell, origin)


def lshape_tet_mesh(n: int = 4, size: float = 1.0, center=(0.0, 0.0, 0.0)) -> TetMesh:
    cell = size / n
    origin = np.asarray(center, dtype=np.float64) - size / 2.0
    return tet_mesh_from_cells(lshape_cells(n), cell, origin)


def ball_tet_mesh(n: int = 5, radius: float = 0.5) -> TetMesh:
    """Cube grid morphed radially onto a ball (max-norm to 2-norm map)."""
    cube = cube_tet_mesh(n, size=2.0 * radius)
    pts = cube.points
    norm2 = np.linalg.norm(pts, axis=1)
    norm_inf = np.abs(pts).max(axis=1)
    scale = np.ones(len(pts))
    nonzero = norm2 > 1e-12
    scale[nonzero] = norm_inf[nonzero] / norm2[nonzero]
    ball = TetMesh(pts * scale[:, None], cube.tets)
    if (ball.cell_volumes() <= 0).any():
        raise ValueError("ball morph inverted a tet; increase n")
    return ball


def single_tet() -> TetMesh:
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    return TetMesh(pts, np.array([[0, 1, 2, 3]]))


def rotate_z(mesh: TetMesh, angle: float) -> TetMesh:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return TetMesh(mesh.points @ rot.T, mesh.tets)


def jittered_tet_mesh(n: int = 2, amount: float = 0.15, seed: int = 0) -> TetMesh:
    """Randomly perturbed cube grid; jitter kept small enough to stay valid."""
    rng = np.random.default_rng(seed)
    mesh = cube_tet_mesh(n)
    cell = 1.0 / n
    pts = mesh.points + rng.uniform(-amount * cell, amount * cell, mesh.points.shape)
    jittered = TetMesh(pts, mesh.tets)
    if (jittered.cell_volumes() <= 0).any():
        raise ValueError("jitter amount too large; produced an inverted tet")
    return jittered


def jittered_hex_mesh(shape=(2, 2, 2), amount: float = 0.1, seed: int = 0) -> HexMesh:
    rng = np.random.default_rng(seed)
    mesh = hex_mesh_from_cells(block_cells(shape))
    pts = mesh.points + rng.uniform(-amount, amount, mesh.points.shape)
    return HexMesh(pts, mesh.hexes)


def sphere_surface(subdivisions: int = 4, radius: float = 1.0) -> SurfaceMesh:
    """Octahedron subdivided toward a sphere; outward-oriented triangles."""
    points = [
        (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    ]
    faces = [
        (0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
        (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5),
    ]
    points = [np.array(p, dtype=np.float64) for p in points]
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = points[i] + points[j]
                points.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(points) - 1
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    pts = np.array(points) * radius
    faces = np.array(faces, dtype=np.int64)
    return SurfaceMesh(points=pts, faces=faces,
                       vertex_map=np.arange(len(pts), dtype=np.int64))
