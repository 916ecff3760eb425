"""Stage 1: deform the input tet mesh toward a near-PolyCube shape.

Minimizes a volume-weighted barrier distortion energy plus a surface
alignment energy. The alignment part combines a cubeness term, penalizing
normal deviation from the six major axis directions via

    Phi(n) = nx^2 ny^2 + ny^2 nz^2 + nz^2 nx^2,

and a normal-smoothness term over adjacent boundary faces. Area weights
always come from the original (undeformed) vertex positions, which prevents
the surface from collapsing to cheat the alignment terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distortion import regularizer, regularizer_grad, weighted_distortion  # noqa: F401
from .meshes import (
    TetMesh,
    det3,
    jacobian_grad_to_vertices,
    rest_inverses,
    scatter_add,
)
from .optim import AdamState, EnergyReport, run_loop

NORMAL_GUARD = 1e-12
DEFORM_LEARNING_RATE = 1e-3
DEFAULT_DEFORM_STEPS = 500


@dataclass
class DeformWeights:
    lam_angle: float = 1.0
    lam_vol: float = 1.0
    lam_cube: float = 1.0
    lam_smooth: float = 1.0
    epsilon: float = 1e-3


@dataclass
class DeformationState:
    positions: np.ndarray
    weights: DeformWeights = field(default_factory=DeformWeights)
    adam: AdamState = field(default_factory=lambda: AdamState(lr=DEFORM_LEARNING_RATE))


class DeformSetup:
    """Per-mesh constants for the deformation energies."""

    def __init__(self, mesh: TetMesh):
        self.mesh = mesh
        self.rest_inv = rest_inverses(mesh.points, mesh.tets)
        vols = mesh.cell_volumes()
        self.tet_weights = vols / vols.sum()

        surf = mesh.boundary()
        # Faces in volume-vertex indexing, keeping the stored outward orientation.
        self.faces = surf.vertex_map[surf.faces]
        areas = surf.face_areas()
        self.area_weights = areas / areas.sum()

        edges = np.concatenate(
            [self.faces[:, [i, (i + 1) % 3]] for i in range(3)], axis=0
        )
        edges.sort(axis=1)
        face_of_edge = np.tile(np.arange(len(self.faces)), 3)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        se, sf = edges[order], face_of_edge[order]
        same = (se[:-1] == se[1:]).all(axis=1)
        self.face_pairs = np.stack([sf[:-1][same], sf[1:][same]], axis=1)
        pair_areas = areas[self.face_pairs]
        self.pair_weights = pair_areas.sum(axis=1) / (3.0 * areas.sum())


def _face_normals(points: np.ndarray, faces: np.ndarray):
    e1 = points[faces[:, 1]] - points[faces[:, 0]]
    e2 = points[faces[:, 2]] - points[faces[:, 0]]
    n = np.cross(e1, e2)
    length = np.linalg.norm(n, axis=1)
    safe = np.maximum(length, NORMAL_GUARD)
    return e1, e2, n / safe[:, None], length, safe


def _normal_grad_to_vertices(
    grad_nhat: np.ndarray, e1, e2, nhat, length, safe, faces, n_vertices
) -> np.ndarray:
    """Chain dE/d(unit normal) through normalization and the cross product."""
    gn = (grad_nhat - nhat * np.einsum("fk,fk->f", nhat, grad_nhat)[:, None])
    gn = gn / safe[:, None]
    gn[length < NORMAL_GUARD] = 0.0
    ge1 = np.cross(e2, gn)
    ge2 = np.cross(gn, e1)
    out = np.zeros((n_vertices, 3))
    scatter_add(out, faces[:, 1], ge1)
    scatter_add(out, faces[:, 2], ge2)
    scatter_add(out, faces[:, 0], -(ge1 + ge2))
    return out


def cubeness(normals: np.ndarray) -> np.ndarray:
    """Phi on (possibly batched) unit normals; zero exactly on the 6 axes."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x2, y2, z2 = n[:, 0] ** 2, n[:, 1] ** 2, n[:, 2] ** 2
    out = x2 * y2 + y2 * z2 + z2 * x2
    return out if np.asarray(normals).ndim > 1 else out[0]


def _cubeness_grad(nhat: np.ndarray) -> np.ndarray:
    x, y, z = nhat[:, 0], nhat[:, 1], nhat[:, 2]
    return 2.0 * np.stack(
        [x * (y * y + z * z), y * (x * x + z * z), z * (x * x + y * y)], axis=1
    )


def energy_iso(setup: DeformSetup, positions: np.ndarray,
               weights: DeformWeights) -> tuple[float, np.ndarray]:
    """Volume-weighted barrier distortion of the map rest -> positions."""
    tets = setup.mesh.tets
    em = np.swapaxes(positions[tets[:, 1:]] - positions[tets[:, :1]], 1, 2)
    jac = em @ setup.rest_inv
    value, grad_j = weighted_distortion(
        jac, setup.tet_weights, weights.lam_angle, weights.lam_vol, weights.epsilon
    )
    grad = jacobian_grad_to_vertices(grad_j, tets, setup.rest_inv, len(positions))
    return value, grad


def energy_cube(setup: DeformSetup, positions: np.ndarray) -> tuple[float, np.ndarray]:
    e1, e2, nhat, length, safe = _face_normals(positions, setup.faces)
    value = float((setup.area_weights * cubeness(nhat)).sum())
    grad_nhat = setup.area_weights[:, None] * _cubeness_grad(nhat)
    grad = _normal_grad_to_vertices(
        grad_nhat, e1, e2, nhat, length, safe, setup.faces, len(positions)
    )
    return value, grad


def energy_smooth(setup: DeformSetup, positions: np.ndarray) -> tuple[float, np.ndarray]:
    e1, e2, nhat, length, safe = _face_normals(positions, setup.faces)
    i, j = setup.face_pairs[:, 0], setup.face_pairs[:, 1]
    diff = nhat[i] - nhat[j]
    value = float((setup.pair_weights * np.einsum("pk,pk->p", diff, diff)).sum())
    grad_nhat = np.zeros_like(nhat)
    contrib = 2.0 * setup.pair_weights[:, None] * diff
    scatter_add(grad_nhat, i, contrib)
    scatter_add(grad_nhat, j, -contrib)
    grad = _normal_grad_to_vertices(
        grad_nhat, e1, e2, nhat, length, safe, setup.faces, len(positions)
    )
    return value, grad


def energy_align(setup: DeformSetup, positions: np.ndarray,
                 weights: DeformWeights) -> tuple[float, np.ndarray]:
    cube_v, cube_g = energy_cube(setup, positions)
    smooth_v, smooth_g = energy_smooth(setup, positions)
    value = weights.lam_cube * cube_v + weights.lam_smooth * smooth_v
    return value, weights.lam_cube * cube_g + weights.lam_smooth * smooth_g


def deform_energy(setup: DeformSetup, positions: np.ndarray,
                  weights: DeformWeights):
    """Full deformation energy: (terms dict, per-vertex gradient)."""
    iso_v, iso_g = energy_iso(setup, positions, weights)
    cube_v, cube_g = energy_cube(setup, positions)
    smooth_v, smooth_g = energy_smooth(setup, positions)
    terms = {
        "iso": iso_v,
        "cube": weights.lam_cube * cube_v,
        "smooth": weights.lam_smooth * smooth_v,
    }
    grad = iso_g + weights.lam_cube * cube_g + weights.lam_smooth * smooth_g
    return terms, grad


def min_jacobian_det(setup: DeformSetup, positions: np.ndarray) -> float:
    tets = setup.mesh.tets
    em = np.swapaxes(positions[tets[:, 1:]] - positions[tets[:, :1]], 1, 2)
    return float(det3(em @ setup.rest_inv).min())


def deform_step_run(
    state: DeformationState,
    mesh: TetMesh,
    n_steps: int = DEFAULT_DEFORM_STEPS,
    setup: DeformSetup | None = None,
    callback=None,
) -> tuple[DeformationState, list[EnergyReport]]:
    """Run n_steps of deformation; weights may be edited between calls.

    Every accepted iterate is inversion-free: trial steps that would invert a
    tet (or blow past the barrier to a non-finite state) retry with a halved
    learning rate.
    """
    if setup is None:
        setup = DeformSetup(mesh)
    shape = state.positions.shape

    def energy(flat):
        terms, grad = deform_energy(setup, flat.reshape(shape), state.weights)
        return terms, grad.ravel()

    def accept(flat):
        pos = flat.reshape(shape)
        return np.isfinite(pos).all() and min_jacobian_det(setup, pos) > 0.0

    final, history = run_loop(
        energy, state.positions.ravel(), n_steps,
        state=state.adam, callback=callback, accept=accept,
    )
    state.positions = final.reshape(shape)
    return state, history
