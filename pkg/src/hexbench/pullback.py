"""Stage 4a: two-phase inversion-free pullback of the voxelized PolyCube.

Phase 1 deforms the PolyCube hex mesh onto the deformed (near-PolyCube)
surface; phase 2 continues toward the input domain guided by fixed pull
targets obtained by projecting onto the deformed tet mesh and mapping the
barycentric coordinates back through the deformation map. Connectivity never
changes, and every accepted iterate keeps all corner-tet Jacobian
determinants positive via the halved-step retry rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distortion import weighted_distortion
from .geometry import SurfaceQuery, TetQuery, sample_surface
from .meshes import (
    HexMesh,
    SurfaceMesh,
    TetMesh,
    corner_tets,
    det3,
    jacobian_grad_to_vertices,
    rest_inverses,
    scatter_add,
)
from .optim import AdamState, EnergyReport, run_loop

HEX_STAGE_LEARNING_RATE = 1e-4
DEFAULT_PHASE_STEPS = 800


@dataclass
class PullbackWeights:
    lam_angle: float = 1.0
    lam_vol: float = 1.0
    lam_forward: float = 1.0    # surface -> target term
    lam_backward: float = 1.0   # target -> surface term
    lam_lap: float = 1.0
    lam_pullback: float = 1.0
    epsilon: float = 1e-4


@dataclass
class PullbackState:
    positions_dprime: np.ndarray
    positions_m: np.ndarray | None = None
    pull_targets: np.ndarray | None = None
    weights: PullbackWeights = field(default_factory=PullbackWeights)
    adam_phase1: AdamState = field(
        default_factory=lambda: AdamState(lr=HEX_STAGE_LEARNING_RATE))
    adam_phase2: AdamState = field(
        default_factory=lambda: AdamState(lr=HEX_STAGE_LEARNING_RATE))


class HexSurfaceData:
    """Boundary bookkeeping of a hex mesh: quad surface, 1-rings, triangles."""

    def __init__(self, mesh: HexMesh):
        self.surface = mesh.boundary()
        self.volume_ids = self.surface.vertex_map
        edges = self.surface.edges()
        n = len(self.surface.points)
        degree = np.zeros(n, dtype=np.int64)
        np.add.at(degree, edges[:, 0], 1)
        np.add.at(degree, edges[:, 1], 1)
        if (degree == 0).any():
            raise ValueError("isolated surface vertex")
        both = np.concatenate([edges, edges[:, ::-1]], axis=0)
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        self.nbr_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(both[:, 0], minlength=n), out=self.nbr_ptr[1:])
        self.nbr_idx = both[:, 1].copy()
        self.degree = degree
        self.edge_src = both[:, 0]


class PullbackSetup:
    """Constants for both pullback phases on a fixed PolyCube hex mesh."""

    def __init__(self, polycube_hex: HexMesh, deformed_surface: SurfaceMesh):
        self.mesh = polycube_hex
        self.corner_tets = corner_tets(polycube_hex)
        self.rest_inv = rest_inverses(polycube_hex.points, self.corner_tets.tets)
        self.hex_surface = HexSurfaceData(polycube_hex)
        self.deformed_surface = deformed_surface
        self.target_query = SurfaceQuery(deformed_surface)
        self.moving_query = SurfaceQuery(self.hex_surface.surface)


def energy_hex_iso(
    positions: np.ndarray,
    tets: np.ndarray,
    rest_inv: np.ndarray,
    lam_angle: float, lam_vol: float, eps: float,
) -> tuple[float, np.ndarray]:
    """Uniform-weight barrier distortion over corner tets."""
    em = np.swapaxes(positions[tets[:, 1:]] - positions[tets[:, :1]], 1, 2)
    value, grad_j = weighted_distortion(em @ rest_inv, 1.0, lam_angle, lam_vol, eps)
    return value, jacobian_grad_to_vertices(grad_j, tets, rest_inv, len(positions))


def energy_lap(
    positions: np.ndarray, surf: HexSurfaceData, lam: float
) -> tuple[float, np.ndarray]:
    """Uniform 1-ring Laplacian energy on the quad surface (volume indexing)."""
    x = positions[surf.volume_ids]
    sums = np.zeros_like(x)
    scatter_add(sums, surf.edge_src, x[surf.nbr_idx])
    residual = x - sums / surf.degree[:, None]
    value = lam * float((residual * residual).sum())
    grad = np.zeros_like(positions)
    scatter_add(grad, surf.volume_ids, 2.0 * lam * residual)
    spread = (2.0 * lam * residual / surf.degree[:, None])[surf.edge_src]
    scatter_add(grad, surf.volume_ids[surf.nbr_idx], -spread)
    return value, grad


def energy_prox(
    positions: np.ndarray,
    setup_query: SurfaceQuery,
    moving_query: SurfaceQuery,
    surf: HexSurfaceData,
    samples: np.ndarray,
    lam_forward: float,
    lam_backward: float,
) -> tuple[dict, np.ndarray]:
    """Bi-directional squared-distance proximity between the hex surface and
    a fixed target surface.

    Forward: exact sum over hex surface vertices projected to the target.
    Backward: the fixed sample batch (drawn on the target each step)
    projected onto the current hex surface; gradients reach the hex vertices
    through the envelope rule 2 w_i (q - p).
    """
    grad = np.zeros_like(positions)
    x = positions[surf.volume_ids]

    _, d2, q, _, _ = setup_query.query(x)
    forward = float(d2.sum())
    scatter_add(grad, surf.volume_ids, lam_forward * 2.0 * (x - q))

    moving_query.update(x)
    tri_ids, d2b, qb, wb, _ = moving_query.query(samples)
    backward = float(d2b.sum())
    tris = moving_query.tris[tri_ids]
    coef = lam_backward * 2.0 * (qb - samples)
    for c in range(3):
        scatter_add(grad, surf.volume_ids[tris[:, c]], wb[:, c][:, None] * coef)

    terms = {"forward": lam_forward * forward, "backward": lam_backward * backward}
    return terms, grad


def min_corner_det(positions: np.ndarray, setup: PullbackSetup) -> float:
    tets = setup.corner_tets.tets
    em = np.swapaxes(positions[tets[:, 1:]] - positions[tets[:, :1]], 1, 2)
    return float(det3(em @ setup.rest_inv).min())


def _inversion_guard(setup: PullbackSetup, shape):
    def accept(flat):
        pos = flat.reshape(shape)
        return np.isfinite(pos).all() and min_corner_det(pos, setup) > 0.0
    return accept


def phase1_deform_to_md(
    state: PullbackState,
    setup: PullbackSetup,
    n_steps: int = DEFAULT_PHASE_STEPS,
    rng=0,
    callback=None,
) -> tuple[PullbackState, list[EnergyReport]]:
    """Deform the PolyCube hex mesh so its boundary hugs the deformed surface."""
    rng = np.random.default_rng(rng)
    shape = state.positions_dprime.shape
    w = state.weights
    n_samples = len(setup.hex_surface.volume_ids)

    def energy(flat):
        pos = flat.reshape(shape)
        samples, _ = sample_surface(setup.deformed_surface, n_samples, rng)
        iso_v, iso_g = energy_hex_iso(
            pos, setup.corner_tets.tets, setup.rest_inv,
            w.lam_angle, w.lam_vol, w.epsilon)
        prox_t, prox_g = energy_prox(
            pos, setup.target_query, setup.moving_query, setup.hex_surface,
            samples, w.lam_forward, w.lam_backward)
        lap_v, lap_g = energy_lap(pos, setup.hex_surface, w.lam_lap)
        terms = {"hex_iso": iso_v, "lap": lap_v, **prox_t}
        return terms, (iso_g + prox_g + lap_g).ravel()

    final, history = run_loop(
        energy, state.positions_dprime.ravel(), n_steps,
        state=state.adam_phase1, callback=callback,
        accept=_inversion_guard(setup, shape),
    )
    state.positions_dprime = final.reshape(shape)
    return state, history


def compute_pull_targets(
    positions_dprime: np.ndarray,
    deformed_mesh: TetMesh,
    input_points: np.ndarray,
    deformed_query: TetQuery | None = None,
) -> np.ndarray:
    """pull(v): project v onto the deformed tet mesh, then evaluate the same
    barycentric coordinates on the input mesh's corresponding tet."""
    if deformed_query is None:
        deformed_query = TetQuery(deformed_mesh)
    tet_id, w4, _, _ = deformed_query.project(positions_dprime)
    corners = input_points[deformed_mesh.tets[tet_id]]
    return np.einsum("vk,vkd->vd", w4, corners)


def phase2_deform_to_m0(
    state: PullbackState,
    setup: PullbackSetup,
    n_steps: int = DEFAULT_PHASE_STEPS,
    callback=None,
) -> tuple[PullbackState, list[EnergyReport]]:
    """Pull the mesh toward the fixed targets while keeping it inversion-free."""
    if state.pull_targets is None:
        raise ValueError("pull targets not computed; run compute_pull_targets first")
    if state.positions_m is None:
        state.positions_m = state.positions_dprime.copy()
    shape = state.positions_m.shape
    w = state.weights
    targets = state.pull_targets

    def energy(flat):
        pos = flat.reshape(shape)
        iso_v, iso_g = energy_hex_iso(
            pos, setup.corner_tets.tets, setup.rest_inv,
            w.lam_angle, w.lam_vol, w.epsilon)
        diff = pos - targets
        pull_v = w.lam_pullback * float((diff * diff).sum())
        pull_g = w.lam_pullback * 2.0 * diff
        lap_v, lap_g = energy_lap(pos, setup.hex_surface, w.lam_lap)
        terms = {"hex_iso": iso_v, "pullback": pull_v, "lap": lap_v}
        return terms, (iso_g + pull_g + lap_g).ravel()

    final, history = run_loop(
        energy, state.positions_m.ravel(), n_steps,
        state=state.adam_phase2, callback=callback,
        accept=_inversion_guard(setup, shape),
    )
    state.positions_m = final.reshape(shape)
    return state, history
