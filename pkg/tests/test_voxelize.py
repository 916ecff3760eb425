import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexbench import fixtures
from hexbench.meshes import corner_frames, corner_tets, det3
from hexbench.polycube import Cuboid, PolyCube
from hexbench.voxelize import (
    Layer,
    VoxelError,
    VoxelGrid,
    edit_voxels,
    global_pad,
    snap_and_voxelize,
    to_hex_mesh,
    undo_edit,
    validate_topology,
)


def test_snap_unit_box_to_8_voxels():
    pc = PolyCube([Cuboid.from_bounds([0, 0, 0], [2, 2, 2])])
    grid = snap_and_voxelize(pc, 1.0)
    assert len(grid.cells) == 8


def test_snap_drops_collapsed_cuboid_with_warning():
    pc = PolyCube([Cuboid.from_bounds([0, 0, 0], [0.4, 2, 2]),
                   Cuboid.from_bounds([0, 0, 0], [2, 2, 2])])
    with pytest.warns(UserWarning, match="zero width"):
        grid = snap_and_voxelize(pc, 1.0)
    assert len(grid.cells) == 8
    with pytest.raises(VoxelError):
        snap_and_voxelize(PolyCube([Cuboid.from_bounds([0, 0, 0], [0.4, 2, 2])]), 1.0)


def test_snap_overlapping_cuboids_union():
    pc = PolyCube([Cuboid.from_bounds([0, 0, 0], [2, 1, 1]),
                   Cuboid.from_bounds([1, 0, 0], [3, 1, 1])])
    grid = snap_and_voxelize(pc, 1.0)
    assert len(grid.cells) == 3  # union, no double counting


def test_snap_rounds_half_away_from_zero():
    pc = PolyCube([Cuboid.from_bounds([-0.5, 0, 0], [0.5, 1, 1])])
    grid = snap_and_voxelize(pc, 1.0)
    # -0.5 -> -1, 0.5 -> 1: two cells wide in x.
    assert len(grid.cells) == 2


def test_edit_add_remove_inverse():
    grid = VoxelGrid(1.0, {(0, 0, 0)})
    edit_voxels(grid, "add", (1, 0, 0))
    edit_voxels(grid, "remove", (1, 0, 0))
    assert grid.cells == {(0, 0, 0)}


def test_edit_remove_unoccupied_is_noop():
    grid = VoxelGrid(1.0, {(0, 0, 0)})
    changed = edit_voxels(grid, "remove", (5, 5, 5))
    assert changed == []
    assert grid.cells == {(0, 0, 0)}


def test_edit_remove_layer():
    cells = {tuple(c) for c in fixtures.block_cells((2, 2, 2))}
    grid = VoxelGrid(1.0, cells)
    edit_voxels(grid, "remove", Layer(axis=2, index=1))
    assert len(grid.cells) == 4
    assert all(c[2] == 0 for c in grid.cells)


def test_edit_add_layer_needs_region():
    grid = VoxelGrid(1.0, {(0, 0, 0)})
    with pytest.raises(VoxelError):
        edit_voxels(grid, "add", Layer(axis=0, index=1))
    edit_voxels(grid, "add", Layer(axis=0, index=1, region=((0, 0), (0, 0))))
    assert (1, 0, 0) in grid.cells


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)),
                min_size=1, max_size=10))
def test_edit_undo_round_trip(cells):
    grid = VoxelGrid(1.0, {(0, 0, 0)})
    before = set(grid.cells)
    for c in cells:
        edit_voxels(grid, "add", c)
    for _ in cells:
        assert undo_edit(grid)
    assert grid.cells == before


def test_undo_restores_state_before_n_edits():
    grid = VoxelGrid(1.0, {(0, 0, 0), (1, 0, 0)})
    snapshot = set(grid.cells)
    edit_voxels(grid, "add", (2, 0, 0))
    edit_voxels(grid, "remove", (0, 0, 0))
    edit_voxels(grid, "add", Layer(axis=1, index=1, region=((0, 2), (0, 0))))
    while undo_edit(grid):
        pass
    assert grid.cells == snapshot


def test_topology_single_voxel():
    report = validate_topology(VoxelGrid(1.0, {(0, 0, 0)}))
    assert report.components == 1 and report.clean


def test_topology_edge_pair():
    report = validate_topology(VoxelGrid(1.0, {(0, 0, 0), (1, 1, 0)}))
    assert report.components == 2
    assert len(report.non_manifold_edges) == 1
    (p0, p1) = report.non_manifold_edges[0]
    assert p0 == (1, 1, 0) and p1 == (1, 1, 1)


def test_topology_corner_pair():
    report = validate_topology(VoxelGrid(1.0, {(0, 0, 0), (1, 1, 1)}))
    assert report.components == 2
    assert not report.non_manifold_edges
    assert report.non_manifold_vertices == [(1, 1, 1)]


def test_topology_full_block_clean():
    cells = {tuple(c) for c in fixtures.block_cells((2, 2, 2))}
    assert validate_topology(VoxelGrid(1.0, cells)).clean


def test_to_hex_mesh_counts():
    one = to_hex_mesh(VoxelGrid(1.0, {(0, 0, 0)}))
    assert one.n_vertices == 8 and one.n_hexes == 1
    two = to_hex_mesh(VoxelGrid(1.0, {(0, 0, 0), (1, 0, 0)}))
    assert two.n_vertices == 12 and two.n_hexes == 2
    cells = {tuple(c) for c in fixtures.block_cells((3, 3, 3))}
    block = to_hex_mesh(VoxelGrid(0.5, cells))
    assert block.n_vertices == 64 and block.n_hexes == 27
    assert block.cell_volumes().sum() == pytest.approx(27 * 0.5 ** 3)


def test_to_hex_mesh_rejects_unclean_unless_overridden():
    grid = VoxelGrid(1.0, {(0, 0, 0), (1, 1, 0)})
    with pytest.raises(VoxelError):
        to_hex_mesh(grid)
    mesh = to_hex_mesh(grid, allow_invalid=True)
    assert mesh.flags.get("topology_override") is True


def test_voxelization_monotone_under_added_cuboid():
    base = PolyCube([Cuboid.from_bounds([0, 0, 0], [2, 2, 1])])
    more = PolyCube(base.cuboids + [Cuboid.from_bounds([0, 0, 1], [1, 1, 2])])
    a = snap_and_voxelize(base, 1.0)
    b = snap_and_voxelize(more, 1.0)
    assert a.cells <= b.cells


def test_edit_commutes_for_disjoint_cells():
    cells = {tuple(c) for c in fixtures.block_cells((2, 2, 2))}
    g1 = VoxelGrid(1.0, set(cells))
    g2 = VoxelGrid(1.0, set(cells))
    edit_voxels(g1, "add", (5, 0, 0))
    edit_voxels(g1, "remove", (0, 0, 0))
    edit_voxels(g2, "remove", (0, 0, 0))
    edit_voxels(g2, "add", (5, 0, 0))
    assert g1.cells == g2.cells


def test_global_pad_single_voxel():
    mesh = to_hex_mesh(VoxelGrid(1.0, {(0, 0, 0)}))
    padded = global_pad(mesh)
    assert padded.n_hexes == 7


def test_global_pad_block():
    cells = {tuple(c) for c in fixtures.block_cells((2, 2, 2))}
    mesh = to_hex_mesh(VoxelGrid(1.0, cells))
    quads_before = len(mesh.boundary().faces)
    padded = global_pad(mesh)
    assert padded.n_hexes == mesh.n_hexes + quads_before == 32
    assert len(padded.boundary().faces) == quads_before


def test_global_pad_original_boundary_becomes_interior():
    cells = {tuple(c) for c in fixtures.block_cells((2, 1, 1))}
    mesh = to_hex_mesh(VoxelGrid(1.0, cells))
    padded = global_pad(mesh)
    old_boundary = set(mesh.boundary().vertex_map.tolist())
    new_boundary = set(padded.boundary().vertex_map.tolist())
    assert old_boundary.isdisjoint(new_boundary)


def test_global_pad_no_inverted_corner_tets():
    mesh = to_hex_mesh(VoxelGrid(0.25, {tuple(c) for c in fixtures.lshape_cells(4)}))
    padded = global_pad(mesh)
    dets = det3(corner_frames(padded.points, corner_tets(padded)))
    assert dets.min() > 0


def test_global_pad_k_voxel_combinatorics():
    rng = np.random.default_rng(2)
    cells = {(0, 0, 0)}
    while len(cells) < 9:  # random face-connected polycube blob
        base = list(cells)[rng.integers(len(cells))]
        step = np.zeros(3, dtype=int)
        axis = rng.integers(3)
        step[axis] = rng.choice([-1, 1])
        cells.add(tuple(np.array(base) + step))
    grid = VoxelGrid(1.0, cells)
    if not validate_topology(grid).clean:
        pytest.skip("random blob happened to be unclean")
    mesh = to_hex_mesh(grid)
    padded = global_pad(mesh)
    assert padded.n_hexes == mesh.n_hexes + len(mesh.boundary().faces)
