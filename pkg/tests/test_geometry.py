import numpy as np
import pytest

from hexbench import fixtures
from hexbench.geometry import (
    GeometryError,
    SurfaceQuery,
    TetQuery,
    point_in_mesh,
    project_to_tet_mesh,
    project_to_triangle_mesh,
    projection_gradients,
    sample_surface,
    signed_distance_tet_mesh,
)
from hexbench.meshes import SurfaceMesh


def tri_surface(points, faces):
    points = np.asarray(points, dtype=float)
    return SurfaceMesh(points=points, faces=np.asarray(faces, dtype=np.int64),
                       vertex_map=np.arange(len(points), dtype=np.int64))


UNIT_TRI = tri_surface([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def dense_tri_samples(surface, per_tri=4000, seed=0):
    pts, _ = sample_surface(surface, per_tri * len(surface.faces), seed)
    return pts


def test_planar_foot_point():
    r = project_to_triangle_mesh([0.25, 0.25, 1.0], UNIT_TRI)
    assert np.allclose(r.point, [0.25, 0.25, 0.0])
    assert r.squared_distance == pytest.approx(1.0)
    assert r.weights.sum() == pytest.approx(1.0)


def test_vertex_clamp_matches_dense_sampling():
    p = np.array([2.0, 0.0, 0.0])
    r = project_to_triangle_mesh(p, UNIT_TRI)
    assert np.allclose(r.point, [1.0, 0.0, 0.0])
    dense = dense_tri_samples(UNIT_TRI, seed=3)
    best = np.min(np.linalg.norm(dense - p, axis=1) ** 2)
    assert r.squared_distance <= best + 1e-9


def test_projection_of_mesh_vertex_is_itself(cube2):
    surf = cube2.boundary()
    p = surf.points[0]
    r = project_to_triangle_mesh(p, surf)
    assert r.squared_distance == pytest.approx(0.0, abs=1e-18)
    assert np.allclose(r.point, p)


def test_projection_optimality_random(cube2, rng):
    surf = cube2.boundary()
    dense = dense_tri_samples(surf, per_tri=300, seed=9)
    query = SurfaceQuery(surf)
    pts = rng.uniform(-1.2, 1.2, (200, 3))
    _, d2, _, _, _ = query.query(pts)
    for p, d in zip(pts, d2):
        bound = np.min(np.sum((dense - p) ** 2, axis=1))
        assert d <= bound + 1e-9


def test_interior_gradient_is_plane_projector():
    r = project_to_triangle_mesh([0.25, 0.25, 1.0], UNIT_TRI)
    dq_dp, dd2_dv = projection_gradients([0.25, 0.25, 1.0], UNIT_TRI, r)
    assert np.allclose(dq_dp, np.diag([1.0, 1.0, 0.0]))
    # d(d^2)/dv_i = 2 w_i (q - p)
    q = r.point
    expected = 2.0 * r.weights[:, None] * (q - np.array([0.25, 0.25, 1.0]))
    assert np.allclose(dd2_dv, expected)


def test_vertex_clamp_gradient_zero_and_plane_extension():
    p = [2.0, -1.0, 0.5]
    r = project_to_triangle_mesh(p, UNIT_TRI)
    dq_dp, _ = projection_gradients(p, UNIT_TRI, r)
    assert np.allclose(dq_dp, 0.0)
    dq_ext, _ = projection_gradients(p, UNIT_TRI, r, plane_extended=True)
    assert np.allclose(dq_ext, np.diag([1.0, 1.0, 0.0]))


def test_envelope_gradient_finite_difference(rng):
    tri = tri_surface(rng.standard_normal((3, 3)), [[0, 1, 2]])
    p = rng.standard_normal(3)
    r = project_to_triangle_mesh(p, tri)
    _, dd2_dv = projection_gradients(p, tri, r)
    step = 1e-6
    for vi in range(3):
        for k in range(3):
            for sign, store in ((1, "plus"), (-1, "minus")):
                moved = tri.points.copy()
                moved[vi, k] += sign * step
                res = project_to_triangle_mesh(p, tri_surface(moved, tri.faces))
                if store == "plus":
                    plus = res.squared_distance
                else:
                    minus = res.squared_distance
            fd = (plus - minus) / (2 * step)
            denom = max(abs(fd), abs(dd2_dv[vi, k]), 1e-8)
            assert abs(fd - dd2_dv[vi, k]) / denom < 1e-4


def test_degenerate_triangles_skipped():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
    faces = [[0, 1, 3], [0, 1, 2]]  # first is collinear
    with pytest.warns(UserWarning):
        r = project_to_triangle_mesh([0.2, 0.2, 1.0], tri_surface(pts, faces))
    assert r.element == 1
    with pytest.raises(GeometryError):
        SurfaceQuery(tri_surface(pts, [[0, 1, 3]]))


def test_tet_projection_centroid(cube2):
    tet0 = cube2.points[cube2.tets[0]]
    centroid = tet0.mean(axis=0)
    r = project_to_tet_mesh(centroid, cube2)
    assert r.squared_distance == pytest.approx(0.0, abs=1e-20)
    got = (r.weights[:, None] * cube2.points[cube2.tets[r.element]]).sum(axis=0)
    assert np.allclose(got, centroid)


def test_tet_projection_outside_equals_face_projection(cube2, rng):
    surf = cube2.boundary()
    squery = SurfaceQuery(surf)
    pts = rng.uniform(0.51, 1.5, (50, 3)) * rng.choice([-1.0, 1.0], (50, 3))
    tq = TetQuery(cube2)
    _, _, q_tet, d2_tet = tq.project(pts)
    _, d2_tri, q_tri, _, _ = squery.query(pts)
    assert np.allclose(d2_tet, d2_tri, atol=1e-12)
    assert np.allclose(q_tet, q_tri, atol=1e-9)


def test_tet_projection_on_shared_face(cube2):
    f = cube2.tets[0, :3]
    p = cube2.points[f].mean(axis=0)
    r = project_to_tet_mesh(p, cube2)
    assert r.squared_distance == pytest.approx(0.0, abs=1e-18)


def test_point_in_mesh_basic(cube2):
    assert point_in_mesh(cube2.points[cube2.tets[0]].mean(axis=0), cube2)
    diag = np.linalg.norm(cube2.points.max(0) - cube2.points.min(0))
    assert not point_in_mesh(cube2.points.max(0) + 2 * diag, cube2)


def _ray_parity_inside(surface, pts):
    """Ray-casting parity oracle along +x using exact triangle intersection."""
    v0 = surface.points[surface.faces[:, 0]]
    v1 = surface.points[surface.faces[:, 1]]
    v2 = surface.points[surface.faces[:, 2]]
    out = np.zeros(len(pts), dtype=bool)
    d = np.array([1.0, 0.0, 0.0])
    for i, p in enumerate(pts):
        e1, e2 = v1 - v0, v2 - v0
        h = np.cross(d, e2)
        a = np.einsum("fk,fk->f", e1, h)
        ok = np.abs(a) > 1e-12
        s = p - v0
        u = np.einsum("fk,fk->f", s, h) / np.where(ok, a, 1.0)
        q = np.cross(s, e1)
        v = (q @ d) / np.where(ok, a, 1.0)
        t = np.einsum("fk,fk->f", e2, q) / np.where(ok, a, 1.0)
        hits = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        out[i] = hits.sum() % 2 == 1
    return out


def test_point_in_mesh_ray_parity_oracle(cube3, rng):
    surf = cube3.boundary()
    pts = rng.uniform(-0.8, 0.8, (2000, 3))
    tq = TetQuery(cube3)
    assert (tq.contains(pts) == _ray_parity_inside(surf, pts)).all()


def test_signed_distance_cube_analytic(cube2):
    assert signed_distance_tet_mesh(cube2.points[0], cube2).value == pytest.approx(0.0)
    assert signed_distance_tet_mesh([0, 0, 0], cube2).value == pytest.approx(-0.5)
    s = signed_distance_tet_mesh([2.0, 0.0, 0.0], cube2)
    assert s.value == pytest.approx(1.5)
    assert np.allclose(s.gradient, [1, 0, 0])


def test_signed_distance_sign_flip_on_probe_line(cube2):
    ts = np.linspace(0.0, 1.0, 101)
    pts = np.stack([ts, np.full_like(ts, 0.1), np.full_like(ts, 0.1)], axis=1)
    tq = TetQuery(cube2)
    vals, _ = tq.signed_distance(pts)
    inside = tq.contains(pts)
    assert ((vals <= 0) == inside).all()
    flips = np.flatnonzero(np.diff(inside.astype(int)))
    assert len(flips) == 1  # crosses the boundary exactly once


def test_sample_surface_inside_triangle():
    pts, fids = sample_surface(UNIT_TRI, 3, 7)
    assert (fids == 0).all()
    for p in pts:
        assert p[2] == pytest.approx(0.0)
        assert p[0] >= -1e-12 and p[1] >= -1e-12 and p[0] + p[1] <= 1 + 1e-12


def test_sample_surface_area_weighting():
    # Two triangles with area ratio exactly 9:1.
    pts = np.array([[0, 0, 0], [9, 0, 0], [0, 2, 0], [11, 0, 0], [11, 1, 0]],
                   dtype=float)
    surf = tri_surface(pts, [[0, 1, 2], [1, 3, 4]])
    n = 10000
    _, fids = sample_surface(surf, n, 123)
    count = int((fids == 0).sum())
    p = 0.9
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(count - n * p) <= 3 * sigma


def test_sample_surface_deterministic():
    a = sample_surface(UNIT_TRI, 64, 42)
    b = sample_surface(UNIT_TRI, 64, 42)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_surface_errors():
    with pytest.raises(GeometryError):
        sample_surface(UNIT_TRI, 0, 1)
