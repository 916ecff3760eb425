import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexbench import fixtures
from hexbench.distortion import lse_distortion, scaled_jacobian
from hexbench.meshes import HexMesh, corner_frames, corner_tets, det3
from hexbench.optim import check_gradient
from hexbench.quality import (
    CONSTRAINED,
    FIXED,
    FREE,
    LandmarkSet,
    QualitySetup,
    QualityWeights,
    energy_custom_scaled_jacobian,
    energy_hex_lse,
    filter_elements,
    hausdorff_sampled,
    optimize_quality,
    report_quality,
    scaled_jacobians,
)


@pytest.fixture(scope="module")
def cube_pair():
    hexmesh = fixtures.hex_mesh_from_cells(
        fixtures.block_cells((3, 3, 3)), cell_size=1 / 3, origin=(-0.5, -0.5, -0.5))
    tetmesh = fixtures.cube_tet_mesh(3)
    return QualitySetup(hexmesh, tetmesh.boundary()), hexmesh, tetmesh


def sheared_hex(angle=np.pi / 4):
    """Single hex sheared so x-edges tilt by the given angle in the xz plane."""
    mesh = fixtures.hex_mesh_from_cells([[0, 0, 0]])
    pts = mesh.points.copy()
    pts[:, 0] += np.tan(angle) * 0.0  # keep x
    pts[:, 2] += np.tan(angle) * pts[:, 0]
    return HexMesh(pts, mesh.hexes)


def test_custom_energy_on_perfect_cubes(cube_pair):
    setup, hexmesh, _ = cube_pair
    lam = 2.5
    value, _ = energy_custom_scaled_jacobian(
        hexmesh.points, setup.corner_tets.tets, setup.rest_inv, lam, False)
    assert value == pytest.approx(-lam * len(setup.corner_tets.tets), rel=1e-12)


def test_scaled_jacobian_sheared_45():
    mesh = sheared_hex(np.pi / 4)
    sj = scaled_jacobians(mesh.points, mesh)
    # Shearing z by x tilts the x-edges 45 degrees: det = cos(45).
    assert sj.min() == pytest.approx(np.cos(np.pi / 4), rel=1e-12)


def test_scaled_jacobian_bounds_rotations_and_random(rng):
    # Rotations give exactly 1; arbitrary frames stay within [-1, 1].
    for _ in range(50):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        d, _ = scaled_jacobian(q[None])
        assert d[0] == pytest.approx(1.0, abs=1e-12)
    frames = rng.standard_normal((500, 3, 3))
    d, _ = scaled_jacobian(frames)
    assert (d >= -1 - 1e-12).all() and (d <= 1 + 1e-12).all()


def test_custom_gradient_fd(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    pos = hexmesh.points + 0.04 * rng.standard_normal(hexmesh.points.shape)
    shape = pos.shape
    for worst in (False, True):
        def energy(flat):
            v, g = energy_custom_scaled_jacobian(
                flat.reshape(shape), setup.corner_tets.tets, setup.rest_inv,
                0.8, worst)
            return {"v": v}, g.ravel()

        assert check_gradient(energy, pos.ravel(), n_probes=30, step=1e-5) <= 1e-4


def test_lse_identities(rng):
    # All summands equal s: lse = s + log n.
    n = 17
    frames = np.tile(np.eye(3), (n, 1, 1))
    value, _ = lse_distortion(frames, 1.0, 1.0, 1e-9)
    s = 5.0
    assert value == pytest.approx(s + np.log(n), rel=1e-6)


def test_lse_bounds_max_summand(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    pos = hexmesh.points + 0.05 * rng.standard_normal(hexmesh.points.shape)
    em = np.swapaxes(pos[setup.corner_tets.tets[:, 1:]]
                     - pos[setup.corner_tets.tets[:, :1]], 1, 2)
    jac = em @ setup.rest_inv
    from hexbench.distortion import distortion_summands
    s, _ = distortion_summands(jac, 1.0, 1.0, 1e-4)
    value, _ = lse_distortion(jac, 1.0, 1.0, 1e-4)
    assert s.max() <= value <= s.max() + np.log(len(s))


def test_lse_rejects_inverted_elements(cube_pair):
    setup, hexmesh, _ = cube_pair
    pos = hexmesh.points.copy()
    pos[0] += 10.0  # grossly invert a corner
    with pytest.raises(ValueError, match="average-mode"):
        energy_hex_lse(pos, setup.corner_tets.tets, setup.rest_inv, 1.0, 1.0, 1e-4)


def test_lse_gradient_concentrates_on_worst_tet():
    # A single bad hex in a block: over 90% of the gradient l1 mass must sit
    # on the 4 vertices of its worst corner tet.
    mesh = fixtures.hex_mesh_from_cells(fixtures.block_cells((2, 2, 2)))
    pos = mesh.points.copy()
    bad_vertex = int(np.flatnonzero(
        (mesh.points == [0.0, 0.0, 0.0]).all(axis=1))[0])
    pos[bad_vertex] += np.array([0.3, 0.279, 0.312])  # nearly collapse a corner
    ctets = corner_tets(mesh)
    from hexbench.meshes import rest_inverses
    rinv = rest_inverses(mesh.points, ctets.tets)
    _, grad = energy_hex_lse(pos, ctets.tets, rinv, 1.0, 1.0, 1e-4)
    em = np.swapaxes(pos[ctets.tets[:, 1:]] - pos[ctets.tets[:, :1]], 1, 2)
    from hexbench.distortion import distortion_summands
    s, _ = distortion_summands(em @ rinv, 1.0, 1.0, 1e-4)
    worst = ctets.tets[int(np.argmax(s))]
    l1 = np.abs(grad).sum(axis=1)
    assert (l1[worst].sum() / l1.sum()) > 0.9


def test_gradient_fd_lse(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    pos = hexmesh.points + 0.03 * rng.standard_normal(hexmesh.points.shape)
    shape = pos.shape

    def energy(flat):
        v, g = energy_hex_lse(flat.reshape(shape), setup.corner_tets.tets,
                              setup.rest_inv, 1.0, 1.0, 1e-4)
        return {"v": v}, g.ravel()

    assert check_gradient(energy, pos.ravel(), n_probes=30, step=1e-5) <= 1e-4


def test_optimize_pure_distortion_descends(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    weights = QualityWeights(lam_lap=0.0, lam_project=0.0, lam_details=0.0,
                             lam_vol=0.0, lam_angle=1.0)
    start = hexmesh.points + 0.04 * rng.standard_normal(hexmesh.points.shape)
    _, history = optimize_quality(start, setup, weights, mode=FREE,
                                  n_steps=200, rng=1)
    totals = [h.total for h in history]
    for k in range(0, 150, 50):
        assert totals[k + 50] <= totals[k]


def test_fixed_mode_keeps_surface_bitwise(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    start = hexmesh.points + 0.02 * rng.standard_normal(hexmesh.points.shape)
    surf_ids = setup.hex_surface.volume_ids
    before = start[surf_ids].copy()
    out, _ = optimize_quality(start, setup, QualityWeights(), mode=FIXED,
                              n_steps=60, rng=2)
    assert np.array_equal(out[surf_ids], before)
    interior = np.setdiff1d(np.arange(len(out)), surf_ids)
    assert np.abs(out[interior] - start[interior]).max() > 0


def test_constrained_mode_stays_on_surface(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    start = hexmesh.points + 0.02 * rng.standard_normal(hexmesh.points.shape)
    surf_ids = setup.hex_surface.volume_ids
    checked = []

    def on_surface(positions):
        _, d2, _, _, _ = setup.input_query.query(positions[surf_ids])
        checked.append(float(np.sqrt(d2.max())))
        return False

    out, _ = optimize_quality(
        start, setup, QualityWeights(), mode=CONSTRAINED, n_steps=40, rng=2,
        callback=lambda it, p, r: on_surface(p[: hexmesh.points.size]
                                             .reshape(hexmesh.points.shape)))
    _, d2, _, _, _ = setup.input_query.query(out[surf_ids])
    assert np.sqrt(d2.max()) <= 1e-9


def test_landmarks_bitwise_pinned_all_modes(cube_pair, rng):
    setup, hexmesh, _ = cube_pair
    surf_ids = setup.hex_surface.volume_ids
    pin_id = int(surf_ids[3])
    pin_pos = hexmesh.points[pin_id] + np.array([0.01, 0.0, 0.0])
    landmarks = LandmarkSet()
    landmarks.set(pin_id, pin_pos)
    for mode in (FREE, CONSTRAINED, FIXED):
        start = hexmesh.points + 0.01 * rng.standard_normal(hexmesh.points.shape)
        out, _ = optimize_quality(start, setup, QualityWeights(), mode=mode,
                                  landmarks=landmarks, n_steps=30, rng=0)
        assert np.array_equal(out[pin_id], pin_pos), mode


def test_landmark_must_be_surface_vertex(cube_pair):
    setup, hexmesh, _ = cube_pair
    interior = np.setdiff1d(np.arange(hexmesh.n_vertices),
                            setup.hex_surface.volume_ids)
    landmarks = LandmarkSet()
    landmarks.set(int(interior[0]), [0, 0, 0])
    with pytest.raises(ValueError):
        optimize_quality(hexmesh.points, setup, QualityWeights(),
                         landmarks=landmarks, n_steps=1)


def test_report_cube_against_itself(cube_pair):
    setup, hexmesh, tetmesh = cube_pair
    report = report_quality(hexmesh, tetmesh.boundary(), n_samples=5000, rng=0)
    assert report.j_min == pytest.approx(1.0)
    assert report.j_avg == pytest.approx(1.0)
    assert report.d_max <= 1e-9
    assert report.inverted == 0


def test_report_concentric_spheres_analytic():
    inner = fixtures.sphere_surface(5, radius=1.0)
    outer = fixtures.sphere_surface(5, radius=1.01)
    d_max, d_avg = hausdorff_sampled(inner, outer, 20000, 3)
    diag = float(np.linalg.norm(outer.points.max(0) - outer.points.min(0)))
    assert d_max / diag == pytest.approx(0.01 / diag, abs=5e-4)
    assert d_avg <= d_max


def test_report_deterministic(cube_pair):
    setup, hexmesh, tetmesh = cube_pair
    a = report_quality(hexmesh, tetmesh.boundary(), n_samples=2000, rng=7)
    b = report_quality(hexmesh, tetmesh.boundary(), n_samples=2000, rng=7)
    assert a == b


def test_filter_elements_threshold_and_plane():
    block = fixtures.hex_mesh_from_cells(fixtures.block_cells((2, 2, 2)))
    assert filter_elements(block, quality_threshold=1.0).size == 0
    assert filter_elements(block, plane=([10, 0, 0], [1, 0, 0])).size == 0
    against = filter_elements(block, plane=([-10, 0, 0], [1, 0, 0]))
    assert against.size == block.n_hexes

    # One sheared hex appended to a clean block.
    sheared = sheared_hex(np.pi / 4)
    pts = np.concatenate([block.points, sheared.points + np.array([5, 0, 0])])
    hexes = np.concatenate([block.hexes, sheared.hexes + block.n_vertices])
    mesh = HexMesh(pts, hexes)
    bad = filter_elements(mesh, quality_threshold=0.8)
    assert bad.tolist() == [block.n_hexes]
