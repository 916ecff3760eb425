import shutil
import warnings
import zipfile

import numpy as np
import pytest

from hexbench import fixtures, pipeline
from hexbench.config import PipelineConfig
from hexbench.deform import DeformationState
from hexbench.formats import (
    FileFormatError,
    Transform,
    load_hex_mesh,
    load_tet_mesh,
    save_hex_mesh,
    save_surface_obj,
    save_tet_mesh,
)
from hexbench.polycube import Cuboid, PolyCube
from hexbench.quality import LandmarkSet
from hexbench.session import (
    Session,
    SessionError,
    load_session,
    save_session,
)
from hexbench.voxelize import VoxelGrid


def test_hex_mesh_round_trip_medit_vtk(tmp_path):
    mesh = fixtures.jittered_hex_mesh((2, 2, 1), 0.08, seed=1)
    for name in ("m.mesh", "m.vtk"):
        path = tmp_path / name
        save_hex_mesh(path, mesh)
        back = load_hex_mesh(path)
        assert np.abs(back.points - mesh.points).max() <= 1e-12
        assert np.array_equal(back.hexes, mesh.hexes)


def test_tet_mesh_round_trip_and_normalization(tmp_path):
    mesh = fixtures.cube_tet_mesh(2, size=1000.0, center=(5.0, -3.0, 0.0))
    path = tmp_path / "t.mesh"
    save_tet_mesh(path, mesh)
    loaded, transform = load_tet_mesh(path)
    assert loaded.points.min() >= -0.5 - 1e-12
    assert loaded.points.max() <= 0.5 + 1e-12
    restored = transform.invert(loaded.points)
    assert np.abs(restored - mesh.points).max() <= 1e-9 * 1000


def test_denormalized_export(tmp_path):
    mesh = fixtures.cube_tet_mesh(2, size=1000.0)
    path = tmp_path / "t.mesh"
    save_tet_mesh(path, mesh)
    loaded, transform = load_tet_mesh(path)
    hexmesh = fixtures.hex_mesh_from_cells([[0, 0, 0]])
    out = tmp_path / "h.mesh"
    save_hex_mesh(out, hexmesh, transform=transform)
    back = load_hex_mesh(out)
    assert np.abs(back.points - transform.invert(hexmesh.points)).max() <= 1e-9


def test_negative_volume_tet_reoriented_with_notice(tmp_path):
    mesh = fixtures.single_tet()
    flipped = mesh.tets[:, [0, 2, 1, 3]]
    path = tmp_path / "neg.mesh"
    save_tet_mesh(path, fixtures.single_tet())
    # Write the flipped connectivity manually.
    text = path.read_text().replace("1 2 3 4 0", "1 3 2 4 0")
    path.write_text(text)
    with pytest.warns(UserWarning, match="reoriented"):
        loaded, _ = load_tet_mesh(path, normalize=False)
    assert (loaded.cell_volumes() > 0).all()


def test_malformed_file_reports_line(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("MeshVersionFormatted 2\nDimension 3\nVertices\n2\n0 0 oops 0\n")
    with pytest.raises(FileFormatError) as err:
        load_tet_mesh(path)
    assert err.value.line == 5


def test_mixed_element_types_rejected(tmp_path):
    tet = fixtures.cube_tet_mesh(1)
    hexm = fixtures.hex_mesh_from_cells([[0, 0, 0]])
    path = tmp_path / "mix.mesh"
    from hexbench.formats import _write_medit

    _write_medit(path, tet.points, tets=tet.tets, hexes=None)
    load_tet_mesh(path)  # fine
    _write_medit(path, hexm.points, tets=np.array([[0, 1, 2, 3]]), hexes=hexm.hexes)
    with pytest.raises(FileFormatError):
        load_tet_mesh(path)
    with pytest.raises(FileFormatError):
        load_hex_mesh(path)


def test_obj_surface_export(tmp_path):
    mesh = fixtures.hex_mesh_from_cells([[0, 0, 0]])
    path = tmp_path / "s.obj"
    save_hex_mesh(path, mesh)
    text = path.read_text().splitlines()
    assert sum(1 for l in text if l.startswith("v ")) == 8
    assert sum(1 for l in text if l.startswith("f ")) == 6


def make_session():
    session = Session(input_mesh=fixtures.cube_tet_mesh(2), seed=11)
    session.deform_state = DeformationState(
        positions=session.input_mesh.points.copy())
    session.polycube = PolyCube([
        Cuboid([0, 0, 0], [0.5, 0.5, 0.5], locked=True),
        Cuboid([0.1, 0, 0], [0.4, 0.3, 0.2]),
    ])
    session.voxel_grid = VoxelGrid(0.25, {(0, 0, 0), (1, 0, 0)})
    session.landmarks = LandmarkSet()
    session.advance("voxelized")
    return session


def test_session_round_trip(tmp_path):
    session = make_session()
    path = tmp_path / "s.hxs"
    save_session(path, session)
    loaded = load_session(path)
    assert loaded.stage == "voxelized"
    assert loaded.seed == 11
    assert len(loaded.polycube) == 2
    assert loaded.polycube.cuboids[0].locked
    assert not loaded.polycube.cuboids[1].locked
    assert np.array_equal(loaded.polycube.centers(), session.polycube.centers())
    assert loaded.voxel_grid.cells == session.voxel_grid.cells
    # Reload-then-save is idempotent at the byte level apart from zip
    # metadata, so compare the manifests.
    path2 = tmp_path / "s2.hxs"
    save_session(path2, loaded)
    with zipfile.ZipFile(path) as a, zipfile.ZipFile(path2) as b:
        assert a.read("manifest.json") == b.read("manifest.json")


def test_session_truncated_fails_checksum(tmp_path):
    session = make_session()
    path = tmp_path / "s.hxs"
    save_session(path, session)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(SessionError):
        load_session(path)


def test_session_corrupt_array_fails_checksum(tmp_path):
    session = make_session()
    path = tmp_path / "s.hxs"
    save_session(path, session)
    # Rewrite one array with zeros of the same length.
    out = tmp_path / "evil.hxs"
    with zipfile.ZipFile(path) as zin, zipfile.ZipFile(out, "w") as zout:
        for item in zin.infolist():
            data = zin.read(item.filename)
            if item.filename == "arrays/cuboid_centers.bin":
                data = b"\x00" * len(data)
            zout.writestr(item, data)
    with pytest.raises(SessionError, match="checksum"):
        load_session(out)


def test_session_version_mismatch(tmp_path):
    session = make_session()
    path = tmp_path / "s.hxs"
    save_session(path, session)
    out = tmp_path / "future.hxs"
    with zipfile.ZipFile(path) as zin, zipfile.ZipFile(out, "w") as zout:
        for item in zin.infolist():
            data = zin.read(item.filename)
            if item.filename == "manifest.json":
                data = data.replace(b'"version": 1', b'"version": 99')
            zout.writestr(item, data)
    with pytest.raises(SessionError, match="version"):
        load_session(out)


def test_session_stage_requires_artifacts():
    session = Session(input_mesh=fixtures.cube_tet_mesh(2))
    with pytest.raises(SessionError):
        session.advance("polycube")


def test_resume_determinism_phase2(tmp_path):
    """Saving after phase 1 and resuming gives the same mesh as a straight run."""
    config = PipelineConfig()
    config.deform.steps = 40
    config.polycube.steps = 60
    config.polycube.anchor_surface = 300
    config.voxel.cell_size = 1 / 3
    config.pullback.steps = 50
    config.quality.steps = 30

    def fresh():
        mesh = fixtures.cube_tet_mesh(2)
        session = pipeline.start_session(mesh, Transform.identity(), config)
        pipeline.run_deform(session, config)
        pipeline.run_polycube_fit(session, config)
        pipeline.run_voxelize(session, config)
        return session

    straight = fresh()
    pipeline.run_pullback(straight, config)
    pipeline.run_quality(straight, config)

    resumed = fresh()
    path = tmp_path / "mid.hxs"
    save_session(path, resumed)
    resumed = load_session(path)
    pipeline.run_pullback(resumed, config)
    pipeline.run_quality(resumed, config)

    assert np.array_equal(straight.quality_positions, resumed.quality_positions)
