"""Stage orchestration: drives the four pipeline stages on a Session.

Each run_* function consumes the session artifacts of the previous stage,
derives its RNG stream from (session seed, stage, run counter), and advances
the stage cursor. The CLI and the studio service both go through here.
"""

from __future__ import annotations

import numpy as np

from . import deform, polycube, pullback, quality, voxelize
from .config import PipelineConfig
from .meshes import SurfaceMesh, TetMesh
from .geometry import TetQuery
from .optim import EnergyReport
from .session import Session, SessionError


def start_session(mesh: TetMesh, transform, config: PipelineConfig) -> Session:
    session = Session(input_mesh=mesh, transform=transform, seed=config.seed)
    session.advance("input")
    return session


def run_deform(session: Session, config: PipelineConfig,
               n_steps: int | None = None, callback=None) -> list[EnergyReport]:
    if session.input_mesh is None:
        raise SessionError("no input mesh loaded")
    cfg = config.deform
    if session.deform_state is None:
        session.deform_state = deform.DeformationState(
            positions=session.input_mesh.points.copy(),
            weights=cfg.weights(),
        )
        session.deform_state.adam.lr = cfg.lr
    state = session.deform_state
    setup = deform.DeformSetup(session.input_mesh)
    _, history = deform.deform_step_run(
        state, session.input_mesh, n_steps or cfg.steps, setup=setup,
        callback=callback)
    session.advance("deformed")
    return history


def run_polycube_fit(session: Session, config: PipelineConfig,
                     callback=None) -> list[EnergyReport]:
    """Automatic decomposition: repeat Add + Reoptimize rounds."""
    cfg = config.polycube
    deformed = session.deformed_mesh()
    if session.polycube is None:
        session.polycube = polycube.PolyCube()
    history: list[EnergyReport] = []
    for _ in range(max(cfg.n_add, 0)):
        try:
            cuboid = polycube.suggest_add(
                session.polycube, deformed, mode=cfg.add_mode,
                resolution=cfg.heuristic_grid)
        except polycube.FullyCovered:
            break
        polycube.add_cuboid(session.polycube, cuboid)
        history += reoptimize_polycube(session, config, callback=callback)
    if cfg.gap_close and len(session.polycube):
        saved = cfg.lambda_plus, cfg.lambda_minus
        cfg.lambda_plus, cfg.lambda_minus = cfg.final_lambda_plus, cfg.final_lambda_minus
        try:
            history += reoptimize_polycube(session, config, callback=callback)
        finally:
            cfg.lambda_plus, cfg.lambda_minus = saved
    session.advance("polycube")
    return history


def reoptimize_polycube(session: Session, config: PipelineConfig,
                        callback=None, n_steps: int | None = None) -> list[EnergyReport]:
    cfg = config.polycube
    deformed = session.deformed_mesh()
    rng = np.random.default_rng(session.next_run_seed("polycube"))
    anchors = polycube.make_anchors(
        deformed,
        grid_res=cfg.anchor_grid,
        n_surface=cfg.anchor_surface,
        sigma=None if cfg.anchor_sigma < 0 else cfg.anchor_sigma,
        rng=rng,
    )
    session.polycube, history = polycube.reoptimize(
        session.polycube, anchors,
        n_steps=n_steps or cfg.steps, lr=cfg.lr, callback=callback,
        weights_source=lambda: (cfg.lambda_plus, cfg.lambda_minus))
    return history


def default_cell_size(session: Session) -> float:
    mesh = session.input_mesh
    diag = float(np.linalg.norm(mesh.points.max(axis=0) - mesh.points.min(axis=0)))
    return diag / 40.0


def run_voxelize(session: Session, config: PipelineConfig) -> voxelize.VoxelGrid:
    if session.polycube is None or len(session.polycube) == 0:
        raise SessionError("no polycube to voxelize")
    cell = config.voxel.cell_size
    if cell <= 0:
        cell = default_cell_size(session)
    session.voxel_grid = voxelize.snap_and_voxelize(session.polycube, cell)
    session.polycube_hex = None
    session.advance("voxelized")
    return session.voxel_grid


def build_polycube_hex(session: Session, config: PipelineConfig):
    if session.voxel_grid is None:
        raise SessionError("voxelize stage has not run")
    mesh = voxelize.to_hex_mesh(session.voxel_grid)
    if config.voxel.pad:
        mesh = voxelize.global_pad(mesh)
    session.polycube_hex = mesh
    return mesh


def run_pullback(session: Session, config: PipelineConfig,
                 callback=None) -> list[EnergyReport]:
    cfg = config.pullback
    if session.polycube_hex is None:
        build_polycube_hex(session, config)
    hexmesh = session.polycube_hex
    deformed = session.deformed_mesh()
    setup = pullback.PullbackSetup(hexmesh, deformed.boundary())

    state = pullback.PullbackState(
        positions_dprime=hexmesh.points.copy(), weights=cfg.weights())
    state.adam_phase1.lr = cfg.lr
    state.adam_phase2.lr = cfg.lr
    session.pullback_state = state

    rng = np.random.default_rng(session.next_run_seed("pulled_back"))
    _, hist1 = pullback.phase1_deform_to_md(
        state, setup, n_steps=cfg.steps, rng=rng, callback=callback)

    state.pull_targets = pullback.compute_pull_targets(
        state.positions_dprime, deformed, session.input_mesh.points,
        deformed_query=TetQuery(deformed))
    _, hist2 = pullback.phase2_deform_to_m0(
        state, setup, n_steps=cfg.steps, callback=callback)
    session.advance("pulled_back")
    return hist1 + hist2


def run_quality(session: Session, config: PipelineConfig,
                callback=None, n_steps: int | None = None) -> list[EnergyReport]:
    cfg = config.quality
    if session.pullback_state is None or session.pullback_state.positions_m is None:
        raise SessionError("pullback stage has not run")
    setup = quality.QualitySetup(session.polycube_hex,
                                 session.input_mesh.boundary())
    session.quality_weights = cfg.weights()
    start = (session.quality_positions if session.quality_positions is not None
             else session.pullback_state.positions_m)
    rng = np.random.default_rng(session.next_run_seed("optimized"))
    positions, history = quality.optimize_quality(
        start, setup, session.quality_weights,
        mode=cfg.mode, landmarks=session.landmarks,
        n_steps=n_steps or cfg.steps, rng=rng, callback=callback, lr=cfg.lr)
    session.quality_positions = positions
    session.advance("optimized")
    return history


def final_positions(session: Session) -> np.ndarray:
    if session.quality_positions is not None:
        return session.quality_positions
    if session.pullback_state is not None and session.pullback_state.positions_m is not None:
        return session.pullback_state.positions_m
    raise SessionError("no hexahedralized positions available")


def input_surface(session: Session) -> SurfaceMesh:
    return session.input_mesh.boundary()


def run_report(session: Session, config: PipelineConfig) -> quality.QualityReport:
    positions = final_positions(session)
    # Reports use a fixed (seed, tag) stream so identical sessions give
    # byte-identical reports regardless of how many runs happened before.
    rng = np.random.default_rng(np.random.SeedSequence([session.seed, 999]))
    return quality.report_quality(
        session.polycube_hex, input_surface(session), positions=positions,
        n_samples=config.report.samples, rng=rng)


def run_all(session: Session, config: PipelineConfig, callback=None) -> dict:
    run_deform(session, config, callback=callback)
    run_polycube_fit(session, config, callback=callback)
    run_voxelize(session, config)
    run_pullback(session, config, callback=callback)
    run_quality(session, config, callback=callback)
    report = run_report(session, config)
    return report.to_dict()
