import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexbench import fixtures
from hexbench.deform import (
    DeformSetup,
    DeformWeights,
    DeformationState,
    cubeness,
    deform_energy,
    deform_step_run,
    energy_align,
    energy_cube,
    energy_iso,
    energy_smooth,
    min_jacobian_det,
    regularizer,
)
from hexbench.optim import check_gradient


@pytest.fixture(scope="module")
def setup2():
    return DeformSetup(fixtures.cube_tet_mesh(2))


def test_regularizer_at_zero():
    assert regularizer(0.0, 1e-3) == pytest.approx(0.5e-3)


def test_regularizer_at_one():
    assert regularizer(1.0, 1e-3) == pytest.approx((1 + np.sqrt(1 + 1e-6)) / 2)


@settings(max_examples=200)
@given(st.floats(-50, 50), st.floats(1e-6, 1.0))
def test_regularizer_positive_and_monotone(x, eps):
    r = regularizer(x, eps)
    assert r > 0
    assert regularizer(x + 0.5, eps) > r


def test_regularizer_vanishes_at_minus_infinity():
    vals = regularizer(np.array([-1e3, -1e6, -1e9]), 1e-3)
    assert (vals > 0).all()
    assert (np.diff(vals) < 0).all()
    assert vals[-1] < 1e-9


def test_energy_iso_identity_is_five(setup2):
    w = DeformWeights(epsilon=1e-9)
    value, _ = energy_iso(setup2, setup2.mesh.points, w)
    assert value == pytest.approx(5.0, rel=1e-6)


def test_energy_iso_uniform_scale(setup2):
    w = DeformWeights(lam_vol=0.0, epsilon=1e-9)
    value, _ = energy_iso(setup2, 2.0 * setup2.mesh.points, w)
    assert value == pytest.approx(3.0, rel=1e-6)


def test_energy_cube_zero_on_axis_aligned(setup2):
    value, grad = energy_cube(setup2, setup2.mesh.points)
    assert value == pytest.approx(0.0, abs=1e-15)


def test_cubeness_axis_zeros_and_diagonal_max():
    axes = np.concatenate([np.eye(3), -np.eye(3)])
    assert np.all(np.abs(cubeness(axes)) < 1e-15)
    diag = np.ones(3) / np.sqrt(3)
    assert cubeness(diag) == pytest.approx(1 / 3, abs=1e-12)


def test_cubeness_zero_only_near_axes():
    rng = np.random.default_rng(0)
    n = rng.standard_normal((10000, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    phi = cubeness(n)
    assert (phi >= 0).all()
    near_axis = np.abs(np.abs(n).max(axis=1) - 1.0) < 1e-6
    tiny = phi < 1e-12
    assert (tiny <= near_axis).all()  # zeros only within 1e-12 of the 6 axes


def _smooth_reference(setup, positions):
    """Direct evaluation of the pairwise normal-smoothness sum."""
    p = positions
    faces = setup.faces
    n = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    nhat = n / np.linalg.norm(n, axis=1, keepdims=True)
    rest = setup.mesh.points
    rest_n = np.cross(rest[faces[:, 1]] - rest[faces[:, 0]],
                      rest[faces[:, 2]] - rest[faces[:, 0]])
    areas = 0.5 * np.linalg.norm(rest_n, axis=1)
    total = areas.sum()
    value = 0.0
    for i, j in setup.face_pairs:
        value += (areas[i] + areas[j]) / (3 * total) * np.sum((nhat[i] - nhat[j]) ** 2)
    return value


def test_energy_smooth_matches_reference_weighting(setup2, rng):
    # Exercises the exact (area_i + area_j) / (3 * total area) convention,
    # including zero contributions from coplanar neighbor pairs.
    pos = setup2.mesh.points + 0.05 * rng.standard_normal(setup2.mesh.points.shape)
    value, _ = energy_smooth(setup2, pos)
    assert value == pytest.approx(_smooth_reference(setup2, pos), rel=1e-12)
    # Coplanar pairs (triangles inside one flat cube face) contribute zero.
    p = setup2.mesh.points
    faces = setup2.faces
    n = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    nhat = n / np.linalg.norm(n, axis=1, keepdims=True)
    i, j = setup2.face_pairs.T
    coplanar = np.einsum("pk,pk->p", nhat[i], nhat[j]) > 1 - 1e-12
    assert coplanar.any()
    diffs = np.sum((nhat[i][coplanar] - nhat[j][coplanar]) ** 2, axis=1)
    assert np.abs(diffs).max() < 1e-24


def test_translation_invariance(setup2, rng):
    w = DeformWeights()
    shift = rng.standard_normal(3)
    for fn in (lambda pos: energy_iso(setup2, pos, w)[0],
               lambda pos: energy_align(setup2, pos, w)[0]):
        a = fn(setup2.mesh.points)
        b = fn(setup2.mesh.points + shift)
        assert abs(a - b) <= 1e-10


def test_gradients_finite_difference():
    mesh = fixtures.jittered_tet_mesh(2, 0.15, seed=3)
    setup = DeformSetup(mesh)
    w = DeformWeights()
    rng = np.random.default_rng(7)
    pos = mesh.points + 0.02 * rng.standard_normal(mesh.points.shape)
    shape = pos.shape

    def total(flat):
        terms, grad = deform_energy(setup, flat.reshape(shape), w)
        return terms, grad.ravel()

    assert check_gradient(total, pos.ravel(), n_probes=40, step=1e-5) <= 1e-4


def test_identity_is_critical_with_alignment_off():
    mesh = fixtures.cube_tet_mesh(2)
    state = DeformationState(
        positions=mesh.points.copy(),
        weights=DeformWeights(lam_cube=0.0, lam_smooth=0.0, epsilon=1e-9),
    )
    deform_step_run(state, mesh, 100)
    assert np.abs(state.positions - mesh.points).max() < 1e-6


def test_inversion_free_during_aggressive_run():
    mesh = fixtures.lshape_tet_mesh(4)
    state = DeformationState(positions=mesh.points.copy(),
                             weights=DeformWeights(lam_cube=3.0))
    setup = DeformSetup(mesh)
    trace = []
    deform_step_run(
        state, mesh, 120, setup=setup,
        callback=lambda it, p, r: trace.append(
            min_jacobian_det(setup, p.reshape(mesh.points.shape))) and False)
    assert min(trace) > 0.0


def test_rotated_cube_alignment_recovers():
    from hexbench.formats import Transform
    from hexbench.meshes import TetMesh

    raw = fixtures.rotate_z(fixtures.cube_tet_mesh(3), np.pi / 4)
    tr = Transform.fit(raw.points)  # inputs always enter unit-bbox normalized
    mesh = TetMesh(tr.apply(raw.points), raw.tets)
    setup = DeformSetup(mesh)
    state = DeformationState(positions=mesh.points.copy(),
                             weights=DeformWeights(lam_cube=3.0))
    e0, _ = energy_cube(setup, state.positions)
    deform_step_run(state, mesh, 500, setup=setup)
    e1, _ = energy_cube(setup, state.positions)
    assert e1 <= 0.1 * e0
