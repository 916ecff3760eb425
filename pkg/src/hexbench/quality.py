"""Stage 4b: constrained mesh-quality optimization and quality reporting.

The final energy combines the barrier distortion (average or worst-element
log-sum-exp), bi-directional proximity against the *input* surface, surface
Laplacian smoothing, and an optional custom term rewarding high scaled
Jacobians. Surface vertices are parameterized in one of three modes:

* free: vertices move freely, proximity keeps them near the surface;
* constrained: each surface vertex is proj(z) of a latent z, differentiated
  as if the closest triangle extends to a plane so ridges don't stall;
* fixed: surface vertices do not move.

Landmark vertices stay bitwise pinned in every mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distortion import lse_distortion, scaled_jacobian, weighted_distortion
from .geometry import SurfaceQuery, plane_projectors, sample_surface
from .meshes import (
    HexMesh,
    SurfaceMesh,
    corner_frames,
    corner_tets,
    det3,
    jacobian_grad_to_vertices,
    rest_inverses,
    scatter_add,
)
from .optim import AdamState, EnergyReport, run_loop
from .pullback import HexSurfaceData, energy_lap, energy_prox

QUALITY_LEARNING_RATE = 1e-4
DEFAULT_QUALITY_STEPS = 1000

FREE = "free"
CONSTRAINED = "constrained"
FIXED = "fixed"


@dataclass
class QualityWeights:
    lam_lap: float = 1.0          # smoothness
    lam_project: float = 1.0      # surface -> input (projection)
    lam_details: float = 1.0      # input -> surface (details)
    lam_angle: float = 1.0        # conformal
    lam_vol: float = 1.0          # authalic
    lam_custom: float = 0.0       # scaled-Jacobian reward
    worst_distortion: bool = False
    worst_custom: bool = False
    epsilon: float = 1e-4


@dataclass
class LandmarkSet:
    """Pinned surface vertices: volume vertex id -> fixed position."""

    pins: dict[int, np.ndarray] = field(default_factory=dict)

    def set(self, vertex_id: int, position) -> None:
        self.pins[int(vertex_id)] = np.asarray(position, dtype=np.float64).reshape(3)

    def remove(self, vertex_id: int) -> None:
        self.pins.pop(int(vertex_id), None)

    def clear(self) -> None:
        self.pins.clear()

    def ids(self) -> np.ndarray:
        return np.array(sorted(self.pins), dtype=np.int64)

    def positions(self) -> np.ndarray:
        return np.array([self.pins[i] for i in sorted(self.pins)]).reshape(-1, 3)


@dataclass
class QualityReport:
    j_min: float
    j_avg: float
    j_std: float
    v_min: float
    v_avg: float
    v_std: float
    d_max: float
    d_avg: float
    inverted: int

    def to_dict(self) -> dict:
        return {
            "scaled_jacobian": {"min": self.j_min, "avg": self.j_avg, "std": self.j_std},
            "jacobian": {"min": self.v_min, "avg": self.v_avg, "std": self.v_std},
            "hausdorff": {"max": self.d_max, "avg": self.d_avg},
            "inverted": self.inverted,
        }

    def format_text(self) -> str:
        return (
            f"J_min/J_avg  {self.j_min:.4f}/{self.j_avg:.4f} +- {self.j_std:.4f}\n"
            f"V_min/V_avg  {self.v_min:.4e}/{self.v_avg:.4e} +- {self.v_std:.4e}\n"
            f"d_max/d_avg  {self.d_max:.6f}/{self.d_avg:.6f}\n"
            f"inverted     {self.inverted}"
        )


class QualitySetup:
    """Constants for quality optimization of a fixed-connectivity hex mesh."""

    def __init__(self, polycube_hex: HexMesh, input_surface: SurfaceMesh):
        self.mesh = polycube_hex
        self.corner_tets = corner_tets(polycube_hex)
        self.rest_inv = rest_inverses(polycube_hex.points, self.corner_tets.tets)
        self.hex_surface = HexSurfaceData(polycube_hex)
        self.input_surface = input_surface
        self.input_query = SurfaceQuery(input_surface)
        self.moving_query = SurfaceQuery(self.hex_surface.surface)
        self.input_tris, _ = input_surface.triangulated()


def _corner_jacobians(positions, tets, rest_inv):
    em = np.swapaxes(positions[tets[:, 1:]] - positions[tets[:, :1]], 1, 2)
    return em @ rest_inv


def energy_custom_scaled_jacobian(
    positions: np.ndarray,
    tets: np.ndarray,
    rest_inv: np.ndarray,
    lam_custom: float,
    worst_mode: bool = False,
) -> tuple[float, np.ndarray]:
    """Reward high scaled Jacobians: -lam * sum(det J-hat), or the smooth
    worst-element surrogate log sum exp(-lam * det J-hat)."""
    jac = _corner_jacobians(positions, tets, rest_inv)
    dethat, ddet = scaled_jacobian(jac)
    if worst_mode:
        s = -lam_custom * dethat
        shift = s.max()
        expo = np.exp(s - shift)
        total = expo.sum()
        value = float(shift + np.log(total))
        grad_j = (-lam_custom * expo / total)[:, None, None] * ddet
    else:
        value = -lam_custom * float(dethat.sum())
        grad_j = -lam_custom * ddet
    grad = jacobian_grad_to_vertices(grad_j, tets, rest_inv, len(positions))
    return value, grad


def energy_hex_lse(
    positions: np.ndarray,
    tets: np.ndarray,
    rest_inv: np.ndarray,
    lam_angle: float, lam_vol: float, eps: float,
) -> tuple[float, np.ndarray]:
    """Worst-element distortion: log-sum-exp over the barrier summands."""
    jac = _corner_jacobians(positions, tets, rest_inv)
    value, grad_j = lse_distortion(jac, lam_angle, lam_vol, eps)
    return value, jacobian_grad_to_vertices(grad_j, tets, rest_inv, len(positions))


def _quality_energy(
    positions: np.ndarray,
    setup: QualitySetup,
    weights: QualityWeights,
    samples: np.ndarray,
    skip_project_term: bool = False,
) -> tuple[dict, np.ndarray]:
    """All energy terms at the given composed positions (volume indexing)."""
    w = weights
    if w.worst_distortion:
        iso_v, iso_g = energy_hex_lse(
            positions, setup.corner_tets.tets, setup.rest_inv,
            w.lam_angle, w.lam_vol, w.epsilon)
    else:
        jac = _corner_jacobians(positions, setup.corner_tets.tets, setup.rest_inv)
        iso_v, grad_j = weighted_distortion(jac, 1.0, w.lam_angle, w.lam_vol, w.epsilon)
        iso_g = jacobian_grad_to_vertices(
            grad_j, setup.corner_tets.tets, setup.rest_inv, len(positions))

    prox_t, prox_g = energy_prox(
        positions, setup.input_query, setup.moving_query, setup.hex_surface,
        samples,
        0.0 if skip_project_term else w.lam_project,
        w.lam_details,
    )
    lap_v, lap_g = energy_lap(positions, setup.hex_surface, w.lam_lap)

    terms = {
        "distortion": iso_v,
        "project": prox_t["forward"],
        "details": prox_t["backward"],
        "lap": lap_v,
    }
    grad = iso_g + prox_g + lap_g
    if w.lam_custom != 0.0 or w.worst_custom:
        cus_v, cus_g = energy_custom_scaled_jacobian(
            positions, setup.corner_tets.tets, setup.rest_inv,
            w.lam_custom, w.worst_custom)
        terms["custom"] = cus_v
        grad = grad + cus_g
    return terms, grad


def min_corner_det(positions: np.ndarray, setup: QualitySetup) -> float:
    return float(det3(_corner_jacobians(
        positions, setup.corner_tets.tets, setup.rest_inv)).min())


def optimize_quality(
    positions: np.ndarray,
    setup: QualitySetup,
    weights: QualityWeights,
    mode: str = FREE,
    landmarks: LandmarkSet | None = None,
    n_steps: int = DEFAULT_QUALITY_STEPS,
    rng=0,
    callback=None,
    lr: float = QUALITY_LEARNING_RATE,
) -> tuple[np.ndarray, list[EnergyReport]]:
    """Minimize the combined quality energy; returns positions and history.

    Landmarks are clamped to their pinned values up front and never move.
    In constrained mode the non-landmark surface vertices follow latent
    variables projected onto the input surface every step.
    """
    if mode not in (FREE, CONSTRAINED, FIXED):
        raise ValueError(f"unknown surface mode: {mode}")
    if landmarks is None:
        landmarks = LandmarkSet()
    positions = np.asarray(positions, dtype=np.float64).copy()
    surf_ids = setup.hex_surface.volume_ids
    pin_ids = landmarks.ids()
    if pin_ids.size:
        if not np.isin(pin_ids, surf_ids).all():
            raise ValueError("landmark ids must be surface vertices")
        positions[pin_ids] = landmarks.positions()
    rng = np.random.default_rng(rng)
    n_samples = len(surf_ids)

    frozen = set(pin_ids.tolist())
    if mode == FIXED:
        frozen.update(surf_ids.tolist())
    frozen_ids = np.array(sorted(frozen), dtype=np.int64)

    if mode == CONSTRAINED:
        latent_ids = np.array(
            [v for v in surf_ids.tolist() if v not in frozen], dtype=np.int64)
        return _optimize_constrained(
            positions, setup, weights, landmarks, latent_ids, frozen_ids,
            n_steps, rng, callback, lr)

    shape = positions.shape

    def energy(flat):
        pos = flat.reshape(shape)
        samples, _ = sample_surface(setup.input_surface, n_samples, rng)
        terms, grad = _quality_energy(pos, setup, weights, samples)
        if frozen_ids.size:
            grad[frozen_ids] = 0.0
        return terms, grad.ravel()

    def accept(flat):
        pos = flat.reshape(shape)
        return np.isfinite(pos).all() and min_corner_det(pos, setup) > 0.0

    final, history = run_loop(
        energy, positions.ravel(), n_steps,
        state=AdamState(lr=lr), callback=callback, accept=accept)
    return final.reshape(shape), history


def _optimize_constrained(
    positions, setup, weights, landmarks, latent_ids, frozen_ids,
    n_steps, rng, callback, lr,
):
    shape = positions.shape
    n_latent = len(latent_ids)
    base = positions.copy()
    n_samples = len(setup.hex_surface.volume_ids)

    def compose(flat):
        pos = base.copy()
        pos_part = flat[: positions.size].reshape(shape)
        z = flat[positions.size:].reshape(n_latent, 3)
        pos[:] = pos_part
        if frozen_ids.size:
            pos[frozen_ids] = base[frozen_ids]
        tri_ids, _, q, _, _ = setup.input_query.query(z)
        pos[latent_ids] = q
        return pos, z, tri_ids, q

    def energy(flat):
        pos, z, tri_ids, q = compose(flat)
        samples, _ = sample_surface(setup.input_surface, n_samples, rng)
        terms, grad = _quality_energy(pos, setup, weights, samples,
                                      skip_project_term=True)
        # Latent anchoring replaces the usual projection term.
        anchor = z - q
        terms["project"] = weights.lam_project * float((anchor * anchor).sum())

        grad_flat = np.zeros_like(flat)
        gpos = grad.copy()
        if frozen_ids.size:
            gpos[frozen_ids] = 0.0
        # Ridge rule: treat the winning triangle as an infinite plane.
        projectors = plane_projectors(
            setup.input_query.points, setup.input_query.tris, tri_ids)
        gz = np.einsum("nij,nj->ni", projectors, gpos[latent_ids])
        gz += weights.lam_project * 2.0 * anchor
        gpos[latent_ids] = 0.0
        grad_flat[: positions.size] = gpos.ravel()
        grad_flat[positions.size:] = gz.ravel()
        return terms, grad_flat

    def accept(flat):
        if not np.isfinite(flat).all():
            return False
        pos, _, _, _ = compose(flat)
        return min_corner_det(pos, setup) > 0.0

    z0 = positions[latent_ids]
    params = np.concatenate([positions.ravel(), z0.ravel()])
    final, history = run_loop(
        energy, params, n_steps,
        state=AdamState(lr=lr), callback=callback, accept=accept)
    final_pos, _, _, _ = compose(final)
    return final_pos, history


def scaled_jacobians(positions: np.ndarray, mesh: HexMesh) -> np.ndarray:
    """Per-corner-tet scaled Jacobians from the actual corner edge frames."""
    frames = corner_frames(positions, corner_tets(mesh))
    dethat, _ = scaled_jacobian(frames)
    return dethat


def hausdorff_sampled(
    surf_a: SurfaceMesh, surf_b: SurfaceMesh, n_samples: int, rng
) -> tuple[float, float]:
    """Symmetric sampled Hausdorff distances (max, avg), unnormalized."""
    rng = np.random.default_rng(rng)
    qa = SurfaceQuery(surf_a)
    qb = SurfaceQuery(surf_b)
    pa, _ = sample_surface(surf_a, n_samples, rng)
    pb, _ = sample_surface(surf_b, n_samples, rng)
    _, d2_ab, _, _, _ = qb.query(pa)
    _, d2_ba, _, _, _ = qa.query(pb)
    d = np.sqrt(np.concatenate([d2_ab, d2_ba]))
    return float(d.max()), float(d.mean())


def report_quality(
    hex_mesh: HexMesh,
    input_surface: SurfaceMesh,
    positions: np.ndarray | None = None,
    n_samples: int = 50000,
    rng=0,
) -> QualityReport:
    """Table-style quality metrics: scaled/unscaled Jacobian stats over corner
    tets and sampled symmetric Hausdorff distances normalized by the input
    bounding-box diagonal."""
    pos = hex_mesh.points if positions is None else positions
    tet_set = corner_tets(hex_mesh)
    frames = corner_frames(pos, tet_set)
    dethat, _ = scaled_jacobian(frames)
    raw = det3(frames)

    surf = hex_mesh.boundary()
    moved = SurfaceMesh(points=pos[surf.vertex_map], faces=surf.faces,
                        vertex_map=surf.vertex_map)
    d_max, d_avg = hausdorff_sampled(moved, input_surface, n_samples, rng)
    diag = float(np.linalg.norm(
        input_surface.points.max(axis=0) - input_surface.points.min(axis=0)))
    return QualityReport(
        j_min=float(dethat.min()),
        j_avg=float(dethat.mean()),
        j_std=float(dethat.std()),
        v_min=float(raw.min()),
        v_avg=float(raw.mean()),
        v_std=float(raw.std()),
        d_max=d_max / diag,
        d_avg=d_avg / diag,
        inverted=int((raw <= 0.0).sum()),
    )


def filter_elements(
    hex_mesh: HexMesh,
    positions: np.ndarray | None = None,
    plane: tuple | None = None,
    quality_threshold: float | None = None,
) -> np.ndarray:
    """Hex ids matched by the filters: centroid strictly on the positive side
    of the slicing plane, or per-hex min scaled Jacobian below the threshold."""
    pos = hex_mesh.points if positions is None else positions
    matched = np.zeros(hex_mesh.n_hexes, dtype=bool)
    if plane is not None:
        origin, normal = (np.asarray(v, dtype=np.float64) for v in plane)
        centroids = pos[hex_mesh.hexes].mean(axis=1)
        matched |= (centroids - origin) @ normal > 0.0
    if quality_threshold is not None:
        per_corner = scaled_jacobians(pos, hex_mesh).reshape(-1, 8)
        matched |= per_corner.min(axis=1) < quality_threshold
    return np.flatnonzero(matched)
