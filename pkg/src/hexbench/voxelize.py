"""Stage 3: snap cuboids to an integer lattice, voxelize, edit, validate, pad.

The lattice is anchored at the model-space origin with a user-chosen edge
length. Cuboid corners snap per coordinate with round-half-away-from-zero;
a cuboid collapsing to zero width on any axis is dropped with a warning.
A cell is occupied when its center lies inside some snapped cuboid.

Global padding duplicates the boundary skin: each boundary vertex id is
pushed inward by half a cell along its averaged inward normal while a new
vertex keeps its old position, and every boundary quad extrudes one new hex
between the two layers. The surface geometry is unchanged and every
pre-padding boundary vertex id ends up interior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .meshes import HexMesh, det3, corner_tets, corner_frames, scatter_add
from .polycube import PolyCube

PAD_OFFSET_FRACTION = 0.5
PAD_MAX_HALVINGS = 6

_CELL_OFFSETS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=np.int64,
)


class VoxelError(Exception):
    pass


def lattice_hex_mesh(cells: np.ndarray, cell_size: float,
                     origin=(0.0, 0.0, 0.0)) -> HexMesh:
    """Welded hex mesh with one cube per integer cell, VTK corner order."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    corner_coords = cells[:, None, :] + _CELL_OFFSETS[None, :, :]
    flat = corner_coords.reshape(-1, 3)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    points = np.asarray(origin, dtype=np.float64) + uniq * cell_size
    return HexMesh(points, inverse.reshape(-1, 8))


@dataclass
class VoxelGrid:
    cell_size: float
    cells: set[tuple[int, int, int]] = field(default_factory=set)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    edit_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise VoxelError("cell size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    def sorted_cells(self) -> np.ndarray:
        if not self.cells:
            return np.zeros((0, 3), dtype=np.int64)
        arr = np.array(sorted(self.cells), dtype=np.int64)
        return arr

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.cell_size, set(self.cells), self.origin.copy(),
                         list(self.edit_log))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def snap_and_voxelize(polycube: PolyCube, cell_size: float) -> VoxelGrid:
    """Snap cuboid corners to the lattice and collect covered cells."""
    if cell_size <= 0:
        raise VoxelError("cell size must be positive")
    grid = VoxelGrid(cell_size=cell_size)
    dropped = 0
    for cub in polycube.cuboids:
        lo = _round_half_away(cub.lo / cell_size).astype(np.int64)
        hi = _round_half_away(cub.hi / cell_size).astype(np.int64)
        if (hi <= lo).any():
            dropped += 1
            continue
        xs, ys, zs = (np.arange(lo[k], hi[k]) for k in range(3))
        block = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        grid.cells.update(map(tuple, block.tolist()))
    if dropped:
        warnings.warn(f"{dropped} cuboid(s) snapped to zero width and were dropped")
    if not grid.cells:
        raise VoxelError("all cuboids collapsed under snapping")
    return grid


@dataclass
class Layer:
    """A lattice layer target: cells with index[axis] == index.

    region optionally restricts the layer to inclusive (lo, hi) ranges over
    the two remaining axes (in ascending axis order).
    """

    axis: int
    index: int
    region: tuple[tuple[int, int], tuple[int, int]] | None = None


def _layer_cells(grid: VoxelGrid, layer: Layer, op: str) -> list[tuple[int, int, int]]:
    other = [a for a in range(3) if a != layer.axis]
    if layer.region is None:
        if op == "add":
            raise VoxelError("adding a layer requires an explicit region")
        return [c for c in grid.cells if c[layer.axis] == layer.index]
    (u0, u1), (v0, v1) = layer.region
    cells = []
    for u in range(u0, u1 + 1):
        for v in range(v0, v1 + 1):
            c = [0, 0, 0]
            c[layer.axis] = layer.index
            c[other[0]] = u
            c[other[1]] = v
            cells.append(tuple(c))
    return cells


def edit_voxels(grid: VoxelGrid, op: str, target) -> list[tuple[int, int, int]]:
    """Apply one undoable add/remove edit; returns the cells actually changed.

    target is a single (i, j, k) cell or a Layer. Removing an unoccupied cell
    (or adding an occupied one) is a no-op for that cell.
    """
    if op not in ("add", "remove"):
        raise VoxelError(f"unknown edit op: {op}")
    if isinstance(target, Layer):
        wanted = _layer_cells(grid, target, op)
    else:
        wanted = [tuple(int(v) for v in target)]
    changed = []
    for cell in wanted:
        if op == "add" and cell not in grid.cells:
            grid.cells.add(cell)
            changed.append(cell)
        elif op == "remove" and cell in grid.cells:
            grid.cells.remove(cell)
            changed.append(cell)
    grid.edit_log.append((op, tuple(sorted(changed))))
    return changed


def undo_edit(grid: VoxelGrid) -> bool:
    """Reverse the most recent edit; returns False when the log is empty."""
    if not grid.edit_log:
        return False
    op, cells = grid.edit_log.pop()
    if op == "add":
        grid.cells.difference_update(cells)
    else:
        grid.cells.update(cells)
    return True


@dataclass
class TopologyReport:
    components: int
    non_manifold_edges: list
    non_manifold_vertices: list

    @property
    def clean(self) -> bool:
        return (self.components == 1 and not self.non_manifold_edges
                and not self.non_manifold_vertices)


_FACE_STEPS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)


def validate_topology(grid: VoxelGrid) -> TopologyReport:
    """Face-connected components plus edge/vertex pinch detection.

    A lattice edge is non-manifold when exactly its two diagonal cells are
    occupied; a lattice vertex is reported when its incident occupied cells
    split into several face-connected parts and no incident edge already
    accounts for the pinch.
    """
    cells = grid.cells
    if not cells:
        raise VoxelError("empty voxel grid")

    components = 0
    seen: set = set()
    for start in sorted(cells):
        if start in seen:
            continue
        components += 1
        stack = [start]
        seen.add(start)
        while stack:
            c = stack.pop()
            for step in _FACE_STEPS:
                nxt = (c[0] + step[0], c[1] + step[1], c[2] + step[2])
                if nxt in cells and nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)

    edges = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        bases = set()
        for c in cells:
            for du in (0, -1):
                for dv in (0, -1):
                    b = list(c)
                    b[u] += du
                    b[v] += dv
                    bases.add(tuple(b))
        for b in sorted(bases):
            quad = []
            for du, dv in ((0, 0), (1, 0), (0, 1), (1, 1)):
                c = list(b)
                c[u] += du
                c[v] += dv
                quad.append(tuple(c) in cells)
            if quad == [True, False, False, True] or quad == [False, True, True, False]:
                # Shared edge endpoints in lattice-vertex coordinates.
                p0 = list(b)
                p0[u] += 1
                p0[v] += 1
                p1 = list(p0)
                p1[axis] += 1
                edges.append((tuple(p0), tuple(p1)))

    edge_endpoints = {p for e in edges for p in e}
    vertices = []
    corners = set()
    for c in cells:
        for off in _CELL_OFFSETS:
            corners.add((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
    for p in sorted(corners):
        if p in edge_endpoints:
            continue
        block = []
        for off in _CELL_OFFSETS:
            c = (p[0] + off[0] - 1, p[1] + off[1] - 1, p[2] + off[2] - 1)
            if c in cells:
                block.append(c)
        if len(block) < 2:
            continue
        comp = _block_components(block)
        if comp > 1:
            vertices.append(p)
    return TopologyReport(components, edges, vertices)


def _block_components(block: list) -> int:
    remaining = set(block)
    count = 0
    while remaining:
        count += 1
        stack = [remaining.pop()]
        while stack:
            c = stack.pop()
            for step in _FACE_STEPS:
                nxt = (c[0] + step[0], c[1] + step[1], c[2] + step[2])
                if nxt in remaining:
                    remaining.remove(nxt)
                    stack.append(nxt)
    return count


def to_hex_mesh(grid: VoxelGrid, allow_invalid: bool = False) -> HexMesh:
    """One welded hex per occupied cell; rejects unclean topology by default."""
    report = validate_topology(grid)
    if not report.clean and not allow_invalid:
        raise VoxelError(
            f"voxel topology not clean: {report.components} components, "
            f"{len(report.non_manifold_edges)} bad edges, "
            f"{len(report.non_manifold_vertices)} bad vertices"
        )
    mesh = lattice_hex_mesh(grid.sorted_cells(), grid.cell_size, grid.origin)
    mesh.flags["cell_size"] = grid.cell_size
    if not report.clean:
        mesh.flags["topology_override"] = True
    return mesh


def global_pad(mesh: HexMesh, offset_fraction: float = PAD_OFFSET_FRACTION) -> HexMesh:
    """Insert one hex layer under the entire boundary.

    Boundary vertex ids move inward by offset_fraction * cell along their
    averaged inward normals; fresh vertices take over the old skin positions
    and each boundary quad extrudes a hex between the two layers. The offset
    halves up to 6 times if a corner tet would invert.
    """
    surf = mesh.boundary()
    quads = surf.vertex_map[surf.faces]
    cell = float(mesh.flags.get("cell_size", _mean_edge(mesh.points, quads)))

    p = mesh.points
    e1 = p[quads[:, 1]] - p[quads[:, 0]]
    e2 = p[quads[:, 2]] - p[quads[:, 0]]
    qn = np.cross(e1, e2)
    qn /= np.maximum(np.linalg.norm(qn, axis=1), 1e-300)[:, None]

    avg = np.zeros_like(p)
    for k in range(4):
        scatter_add(avg, quads[:, k], qn)
    norms = np.linalg.norm(avg, axis=1)
    boundary_ids = surf.vertex_map
    if (norms[boundary_ids] < 1e-12).any():
        raise VoxelError("degenerate averaged normal on the boundary")
    inward = -avg[boundary_ids] / norms[boundary_ids][:, None]

    n_old = len(p)
    dup_of = np.full(n_old, -1, dtype=np.int64)
    dup_of[boundary_ids] = n_old + np.arange(len(boundary_ids))

    # Pad hex per quad: bottom = original ids (pushed inward), top = new skin.
    pad_hexes = np.concatenate([quads, dup_of[quads]], axis=1)
    new_hexes = np.concatenate([mesh.hexes, pad_hexes], axis=0)

    offset = offset_fraction * cell
    for _ in range(PAD_MAX_HALVINGS + 1):
        new_points = np.concatenate([p.copy(), p[boundary_ids]], axis=0)
        new_points[boundary_ids] += offset * inward
        padded = HexMesh(new_points, new_hexes, flags=dict(mesh.flags))
        dets = det3(corner_frames(new_points, corner_tets(padded)))
        if dets.min() > 0:
            padded.flags["padded"] = True
            return padded
        offset *= 0.5
    raise VoxelError("padding offset keeps inverting corner tets")


def _mean_edge(points: np.ndarray, quads: np.ndarray) -> float:
    e = points[np.roll(quads, -1, axis=1)] - points[quads]
    return float(np.linalg.norm(e.reshape(-1, 3), axis=1).mean())
