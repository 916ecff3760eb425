"""Stage 2: PolyCube construction as a union of axis-aligned cuboids.

A cuboid stores its center c and half-extents h (the quoted box SDF formula
is exact on faces only when h is the half-extent, so that is what we store;
the surrounding literature sometimes says "side lengths"). The PolyCube
signed distance is approximated by min_i d_Ci, which is exact outside the
union and describes the same interior region.

Fitting compares this min-SDF against the deformed mesh's signed distance on
a fixed anchor set: a discrepancy term over outside anchors plus a
gap-closing term over inside anchors the union fails to cover.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import TetQuery, sample_surface
from .meshes import TetMesh
from .optim import AdamState, EnergyReport, adam_step

GRID_RESOLUTION = 32          # Add/Subtract heuristics grid
MIN_HALF_EXTENT_FRACTION = 1e-3   # of the deformed bbox diagonal
NEW_CUBOID_CELLS = 1.5        # distance-mode initial half-extent, in grid cells
POLYCUBE_LEARNING_RATE = 1e-3
DEFAULT_POLYCUBE_STEPS = 300


class CoverageSignal(Exception):
    """Heuristic found no cell to act on."""


class FullyCovered(CoverageSignal):
    pass


class NothingToSubtract(CoverageSignal):
    pass


@dataclass
class Cuboid:
    center: np.ndarray
    half_extents: np.ndarray
    locked: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if (self.half_extents <= 0).any():
            raise ValueError(f"half extents must be positive, got {self.half_extents}")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents

    @classmethod
    def from_bounds(cls, lo, hi, locked: bool = False) -> "Cuboid":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls(center=(lo + hi) / 2.0, half_extents=(hi - lo) / 2.0, locked=locked)

    def copy(self) -> "Cuboid":
        return Cuboid(self.center.copy(), self.half_extents.copy(), self.locked)


@dataclass
class PolyCube:
    cuboids: list[Cuboid] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cuboids)

    def centers(self) -> np.ndarray:
        return np.array([c.center for c in self.cuboids]).reshape(-1, 3)

    def half_extents(self) -> np.ndarray:
        return np.array([c.half_extents for c in self.cuboids]).reshape(-1, 3)

    def locked_mask(self) -> np.ndarray:
        return np.array([c.locked for c in self.cuboids], dtype=bool)

    def copy(self) -> "PolyCube":
        return PolyCube([c.copy() for c in self.cuboids])


def _box_sdf_parts(points: np.ndarray, centers: np.ndarray, halves: np.ndarray):
    """Batched box SDF values (k, n) and the per-axis weight/sign arrays."""
    delta = points[:, None, :] - centers[None, :, :]
    signs = np.sign(delta)
    d = np.abs(delta) - halves[None, :, :]
    outside_vec = np.maximum(d, 0.0)
    outside = np.sqrt((outside_vec ** 2).sum(axis=2))
    inside = np.minimum(d.max(axis=2), 0.0)
    values = outside + inside

    weights = np.zeros_like(d)
    pos = outside > 0
    weights[pos] = outside_vec[pos] / outside[pos][..., None]
    interior = ~pos & (inside < 0)
    if interior.any():
        pick = d.argmax(axis=2)
        rows = np.broadcast_to(np.arange(points.shape[0])[:, None], pick.shape)
        cols = np.broadcast_to(np.arange(centers.shape[0])[None, :], pick.shape)
        hot = np.zeros_like(d)
        hot[rows[interior], cols[interior], pick[interior]] = 1.0
        weights[interior] = hot[interior]
    return values, weights, signs


def cuboid_sdf(cuboid: Cuboid, p) -> tuple[float, dict]:
    """Exact signed distance of one box (negative inside) plus gradients.

    Returns (value, {"p": dp, "center": dc, "half_extents": dh}).
    """
    pts = np.asarray(p, dtype=np.float64).reshape(1, 3)
    values, weights, signs = _box_sdf_parts(
        pts, cuboid.center[None, :], cuboid.half_extents[None, :]
    )
    w = weights[0, 0]
    s = signs[0, 0]
    return float(values[0, 0]), {
        "p": w * s,
        "center": -w * s,
        "half_extents": -w,
    }


def polycube_sdf_batch(polycube: PolyCube, points: np.ndarray):
    """min-SDF values over the union plus argmin ids and branch data."""
    if len(polycube) == 0:
        raise ValueError("polycube has no cuboids")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values, weights, signs = _box_sdf_parts(
        pts, polycube.centers(), polycube.half_extents()
    )
    nearest = values.argmin(axis=1)
    rows = np.arange(len(pts))
    return values[rows, nearest], nearest, weights[rows, nearest], signs[rows, nearest]


def polycube_min_sdf(polycube: PolyCube, p) -> tuple[float, np.ndarray]:
    """min_i d_Ci at p and its subgradient w.r.t. p (argmin branch only)."""
    values, nearest, weights, signs = polycube_sdf_batch(polycube, p)
    return float(values[0]), weights[0] * signs[0]


@dataclass
class AnchorSet:
    """Fixed comparison points with cached deformed-mesh signed distances."""

    points: np.ndarray
    mesh_distance: np.ndarray
    inside: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def make_anchors(
    deformed: TetMesh,
    grid_res: int = 16,
    n_surface: int = 2000,
    sigma: float | None = None,
    rng=0,
) -> AnchorSet:
    """Uniform grid over 1.1x the bbox plus jittered surface samples."""
    if grid_res < 2:
        raise ValueError("grid_res must be at least 2")
    rng = np.random.default_rng(rng)
    lo, hi = deformed.points.min(axis=0), deformed.points.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    axes = [np.linspace(c - 1.1 * h, c + 1.1 * h, grid_res)
            for c, h in zip(center, half)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = [grid]
    if n_surface > 0:
        samples, _ = sample_surface(deformed.boundary(), n_surface, rng)
        if sigma is None:
            sigma = 0.02 * float(np.linalg.norm(hi - lo))
        pts.append(samples + rng.normal(0.0, sigma, samples.shape) if sigma > 0
                   else samples)
    points = np.concatenate(pts, axis=0)
    query = TetQuery(deformed)
    distance, _ = query.signed_distance(points)
    return AnchorSet(points=points, mesh_distance=distance, inside=distance <= 0)


def energy_polycube(
    polycube: PolyCube, anchors: AnchorSet,
    lam_plus: float = 1.0, lam_minus: float = 1.0,
):
    """Anchor-based fitting energy: (terms, grad_centers, grad_half_extents).

    Locked cuboids still participate in the min but receive zero gradient.
    """
    values, nearest, weights, signs = polycube_sdf_batch(polycube, anchors.points)
    outside = ~anchors.inside

    residual = np.where(outside, anchors.mesh_distance - values, 0.0)
    e_plus = float((residual ** 2).sum())

    gap = anchors.inside & (values >= 0.0)
    e_minus = float((values[gap] ** 2).sum())

    dvalue = np.zeros(len(anchors))
    dvalue[outside] = -2.0 * lam_plus * residual[outside]
    dvalue[gap] += 2.0 * lam_minus * values[gap]

    n = len(polycube)
    grad_c = np.zeros((n, 3))
    grad_h = np.zeros((n, 3))
    gc = -dvalue[:, None] * weights * signs
    gh = -dvalue[:, None] * weights
    for k in range(3):
        grad_c[:, k] += np.bincount(nearest, weights=gc[:, k], minlength=n)
        grad_h[:, k] += np.bincount(nearest, weights=gh[:, k], minlength=n)
    locked = polycube.locked_mask()
    grad_c[locked] = 0.0
    grad_h[locked] = 0.0
    return {"plus": lam_plus * e_plus, "minus": lam_minus * e_minus}, grad_c, grad_h


def reoptimize(
    polycube: PolyCube,
    anchors: AnchorSet,
    lam_plus: float = 1.0,
    lam_minus: float = 1.0,
    n_steps: int = DEFAULT_POLYCUBE_STEPS,
    lr: float = POLYCUBE_LEARNING_RATE,
    min_half_extent: float | None = None,
    callback=None,
    weights_source=None,
) -> tuple[PolyCube, list[EnergyReport]]:
    """Adam over all unlocked cuboid parameters against the anchor energy.

    Half-extents are clamped to a small positive floor after every step so
    cuboids cannot collapse. weights_source, when given, is consulted every
    step for the current (lam_plus, lam_minus) so weights can change mid-run.
    """
    result = polycube.copy()
    if len(result) == 0:
        return result, []
    if min_half_extent is None:
        span = anchors.points.max(axis=0) - anchors.points.min(axis=0)
        min_half_extent = MIN_HALF_EXTENT_FRACTION * float(np.linalg.norm(span))
    state = AdamState(lr=lr)
    history = []
    for it in range(n_steps):
        if weights_source is not None:
            lam_plus, lam_minus = weights_source()
        terms, grad_c, grad_h = energy_polycube(result, anchors, lam_plus, lam_minus)
        params = np.concatenate([result.centers().ravel(), result.half_extents().ravel()])
        grads = np.concatenate([grad_c.ravel(), grad_h.ravel()])
        params = adam_step(state, params, grads)
        n = len(result)
        centers = params[: 3 * n].reshape(n, 3)
        halves = np.maximum(params[3 * n:].reshape(n, 3), min_half_extent)
        for i, cub in enumerate(result.cuboids):
            if not cub.locked:
                cub.center = centers[i]
                cub.half_extents = halves[i]
        report = EnergyReport(iteration=it, terms=dict(terms))
        history.append(report)
        if callback is not None and callback(it, result, report):
            break
    return result, history


# --- Add / Subtract heuristics -------------------------------------------------

@dataclass
class OccupancyGrid:
    origin: np.ndarray
    cell: np.ndarray          # per-axis cell size
    in_mesh: np.ndarray       # (n, n, n) bool
    in_polycube: np.ndarray   # (n, n, n) bool

    def cell_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell

    def box_bounds(self, lo_idx, hi_idx) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin + np.asarray(lo_idx, dtype=np.float64) * self.cell
        hi = self.origin + np.asarray(hi_idx, dtype=np.float64) * self.cell
        return lo, hi


def occupancy_grid(
    deformed: TetMesh, polycube: PolyCube, resolution: int = GRID_RESOLUTION
) -> OccupancyGrid:
    lo = deformed.points.min(axis=0)
    hi = deformed.points.max(axis=0)
    for c in polycube.cuboids:
        lo = np.minimum(lo, c.lo)
        hi = np.maximum(hi, c.hi)
    cell = (hi - lo) / resolution
    idx = np.arange(resolution)
    grid_idx = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1)
    centers = lo + (grid_idx.reshape(-1, 3) + 0.5) * cell
    in_mesh = TetQuery(deformed).contains(centers).reshape((resolution,) * 3)
    if len(polycube):
        values, _, _, _ = polycube_sdf_batch(polycube, centers)
        in_poly = (values <= 0.0).reshape((resolution,) * 3)
    else:
        in_poly = np.zeros((resolution,) * 3, dtype=bool)
    return OccupancyGrid(origin=lo, cell=cell, in_mesh=in_mesh, in_polycube=in_poly)


def _largest_rect_histogram(heights: np.ndarray) -> tuple[int, int, int, int]:
    """(area, col0, col1, height) of the largest rectangle under a histogram."""
    stack: list[tuple[int, int]] = []
    best = (0, 0, 0, 0)
    for i in range(len(heights) + 1):
        h = heights[i] if i < len(heights) else 0
        start = i
        while stack and stack[-1][1] >= h:
            idx, hh = stack.pop()
            area = hh * (i - idx)
            if area > best[0]:
                best = (area, idx, i, hh)
            start = idx
        stack.append((start, h))
    return best


def _largest_rect_2d(mask: np.ndarray):
    """(area, (x0, x1, y0, y1)) of the largest all-True rectangle."""
    nx, ny = mask.shape
    heights = np.zeros(ny, dtype=np.int64)
    best = (0, (0, 0, 0, 0))
    for x in range(nx):
        heights = np.where(mask[x], heights + 1, 0)
        area, y0, y1, h = _largest_rect_histogram(heights)
        if area > best[0]:
            best = (area, (x - h + 1, x + 1, y0, y1))
    return best


def largest_box(mask: np.ndarray):
    """Largest all-True axis-aligned box of grid cells.

    Plane-sweep over z-ranges with an incremental AND plus the histogram
    based 2D search per range: O(n^4) for an n^3 grid. Returns
    (volume, (x0, x1, y0, y1, z0, z1)) with half-open index ranges.
    """
    nx, ny, nz = mask.shape
    best = (0, (0, 0, 0, 0, 0, 0))
    for z0 in range(nz):
        acc = np.ones((nx, ny), dtype=bool)
        for z1 in range(z0, nz):
            acc &= mask[:, :, z1]
            if not acc.any():
                break
            area, (x0, x1, y0, y1) = _largest_rect_2d(acc)
            volume = area * (z1 - z0 + 1)
            if volume > best[0]:
                best = (volume, (x0, x1, y0, y1, z0, z1 + 1))
    return best


def suggest_add(
    polycube: PolyCube,
    deformed: TetMesh,
    mode: str = "volume",
    resolution: int = GRID_RESOLUTION,
    grid: OccupancyGrid | None = None,
) -> Cuboid:
    """Propose a new cuboid over uncovered cells of the deformed shape.

    distance mode: centered on the uncovered in-mesh cell furthest from the
    current union (deepest in-mesh cell when the polycube is empty).
    volume mode: the largest grid box inside the mesh and outside the union.
    """
    if grid is None:
        grid = occupancy_grid(deformed, polycube, resolution)
    candidates = grid.in_mesh & ~grid.in_polycube
    if not candidates.any():
        raise FullyCovered("deformed shape is fully covered by the polycube")
    if mode == "volume":
        volume, bounds = largest_box(candidates)
        if volume == 0:
            raise FullyCovered("no uncovered box found")
        lo, hi = grid.box_bounds(bounds[::2], bounds[1::2])
        return Cuboid.from_bounds(lo, hi)
    if mode != "distance":
        raise ValueError(f"unknown add mode: {mode}")
    centers = grid.origin + (np.argwhere(candidates) + 0.5) * grid.cell
    if len(polycube):
        score, _, _, _ = polycube_sdf_batch(polycube, centers)
    else:
        query = TetQuery(deformed)
        score, _ = query.signed_distance(centers)
        score = -score
    pick = int(np.argmax(score))
    return Cuboid(center=centers[pick], half_extents=NEW_CUBOID_CELLS * grid.cell)


def suggest_subtract(
    polycube: PolyCube,
    deformed: TetMesh,
    resolution: int = GRID_RESOLUTION,
    grid: OccupancyGrid | None = None,
) -> Cuboid:
    """Largest grid box that the union over-covers (outside the mesh)."""
    if grid is None:
        grid = occupancy_grid(deformed, polycube, resolution)
    over = grid.in_polycube & ~grid.in_mesh
    if not over.any():
        raise NothingToSubtract("polycube does not over-cover the shape")
    volume, bounds = largest_box(over)
    if volume == 0:
        raise NothingToSubtract("no over-covered box found")
    lo, hi = grid.box_bounds(bounds[::2], bounds[1::2])
    return Cuboid.from_bounds(lo, hi)


def apply_subtract(polycube: PolyCube, region: Cuboid) -> PolyCube:
    """Carve region out of every intersecting cuboid, splitting into <= 6 pieces.

    Pieces cover the set difference exactly: two full-width slabs along x,
    two y-slabs notched to the region's x-span, and two z-slabs notched in
    both x and y. Cuboids swallowed by the region are removed; locks carry
    over to the pieces.
    """
    out: list[Cuboid] = []
    rlo, rhi = region.lo, region.hi
    for cub in polycube.cuboids:
        lo, hi = cub.lo, cub.hi
        if (rlo >= hi).any() or (rhi <= lo).any():
            out.append(cub.copy())
            continue
        clip_lo = np.maximum(lo, rlo)
        clip_hi = np.minimum(hi, rhi)
        pieces = [
            (lo, [rlo[0], hi[1], hi[2]]),
            ([rhi[0], lo[1], lo[2]], hi),
            ([clip_lo[0], lo[1], lo[2]], [clip_hi[0], rlo[1], hi[2]]),
            ([clip_lo[0], rhi[1], lo[2]], [clip_hi[0], hi[1], hi[2]]),
            ([clip_lo[0], clip_lo[1], lo[2]], [clip_hi[0], clip_hi[1], rlo[2]]),
            ([clip_lo[0], clip_lo[1], rhi[2]], [clip_hi[0], clip_hi[1], hi[2]]),
        ]
        for plo, phi in pieces:
            plo = np.asarray(plo, dtype=np.float64)
            phi = np.asarray(phi, dtype=np.float64)
            if (phi > plo).all():
                out.append(Cuboid.from_bounds(plo, phi, locked=cub.locked))
    return PolyCube(out)


# --- Manual edit operations ----------------------------------------------------

def _check_id(polycube: PolyCube, cuboid_id: int) -> None:
    if not 0 <= cuboid_id < len(polycube):
        raise IndexError(f"no cuboid with id {cuboid_id}")


def add_cuboid(polycube: PolyCube, cuboid: Cuboid) -> int:
    polycube.cuboids.append(cuboid.copy())
    return len(polycube) - 1


def remove_cuboid(polycube: PolyCube, cuboid_id: int) -> None:
    _check_id(polycube, cuboid_id)
    polycube.cuboids.pop(cuboid_id)


def duplicate_cuboid(polycube: PolyCube, cuboid_id: int) -> int:
    """Appends an identical, unlocked copy; returns its id."""
    _check_id(polycube, cuboid_id)
    copy = polycube.cuboids[cuboid_id].copy()
    copy.locked = False
    polycube.cuboids.append(copy)
    return len(polycube) - 1


def move_cuboid(polycube: PolyCube, cuboid_id: int, center) -> None:
    _check_id(polycube, cuboid_id)
    polycube.cuboids[cuboid_id].center = np.asarray(center, dtype=np.float64).reshape(3)


def resize_cuboid(polycube: PolyCube, cuboid_id: int, half_extents) -> None:
    _check_id(polycube, cuboid_id)
    h = np.asarray(half_extents, dtype=np.float64).reshape(3)
    if (h <= 0).any():
        raise ValueError("half extents must stay positive")
    polycube.cuboids[cuboid_id].half_extents = h


def lock_cuboid(polycube: PolyCube, cuboid_id: int, locked: bool = True) -> None:
    _check_id(polycube, cuboid_id)
    polycube.cuboids[cuboid_id].locked = locked


def sticky_snap(polycube: PolyCube, cuboid_id: int, tolerance: float) -> None:
    """Snap each face plane to the nearest parallel face of another cuboid.

    Faces further than tolerance from every candidate plane stay; an axis
    whose two snapped planes would collapse is left untouched.
    """
    _check_id(polycube, cuboid_id)
    target = polycube.cuboids[cuboid_id]
    others = [c for i, c in enumerate(polycube.cuboids) if i != cuboid_id]
    if not others:
        return
    for axis in range(3):
        planes = np.sort(np.concatenate(
            [[c.lo[axis], c.hi[axis]] for c in others]
        ))
        lo, hi = target.lo[axis], target.hi[axis]
        new_lo = _snap_value(lo, planes, tolerance)
        new_hi = _snap_value(hi, planes, tolerance)
        if new_hi - new_lo > 1e-12:
            target.center[axis] = (new_lo + new_hi) / 2.0
            target.half_extents[axis] = (new_hi - new_lo) / 2.0


def _snap_value(value: float, planes: np.ndarray, tolerance: float) -> float:
    gap = np.abs(planes - value)
    best = int(np.argmin(gap))
    return float(planes[best]) if gap[best] <= tolerance else value
