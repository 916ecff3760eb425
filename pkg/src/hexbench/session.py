"""Full pipeline state and its single-file archive persistence.

A session archive is a zip with a JSON manifest plus raw little-endian
arrays; every entry carries a sha256 so truncation or corruption fails
cleanly, and unknown future versions are rejected instead of guessed at.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig, apply_setting
from .deform import DeformationState, DeformWeights
from .formats import Transform
from .meshes import HexMesh, TetMesh
from .polycube import Cuboid, PolyCube
from .pullback import PullbackState, PullbackWeights
from .quality import LandmarkSet, QualityWeights
from .voxelize import VoxelGrid

FORMAT_NAME = "hexbench-session"
FORMAT_VERSION = 1

STAGES = ("input", "deformed", "polycube", "voxelized", "pulled_back", "optimized")

# Artifacts each stage requires, checked on load and on cursor moves.
_STAGE_REQUIREMENTS = {
    "input": ("input_mesh",),
    "deformed": ("input_mesh", "deform_state"),
    "polycube": ("input_mesh", "deform_state", "polycube"),
    "voxelized": ("input_mesh", "deform_state", "polycube", "voxel_grid"),
    "pulled_back": ("input_mesh", "deform_state", "polycube", "voxel_grid",
                    "pullback_state"),
    "optimized": ("input_mesh", "deform_state", "polycube", "voxel_grid",
                  "pullback_state", "quality_positions"),
}


class SessionError(Exception):
    pass


@dataclass
class Session:
    input_mesh: TetMesh | None = None
    transform: Transform = field(default_factory=Transform.identity)
    deform_state: DeformationState | None = None
    polycube: PolyCube | None = None
    voxel_grid: VoxelGrid | None = None
    polycube_hex: HexMesh | None = None
    pullback_state: PullbackState | None = None
    quality_weights: QualityWeights = field(default_factory=QualityWeights)
    quality_positions: np.ndarray | None = None
    surface_mode: str = "free"
    landmarks: LandmarkSet = field(default_factory=LandmarkSet)
    stage: str = "input"
    seed: int = 0
    run_counters: dict = field(default_factory=dict)

    def advance(self, stage: str) -> None:
        if stage not in STAGES:
            raise SessionError(f"unknown stage: {stage}")
        self._check_stage(stage)
        self.stage = stage

    def _check_stage(self, stage: str) -> None:
        for attr in _STAGE_REQUIREMENTS[stage]:
            if getattr(self, attr) is None:
                raise SessionError(f"stage '{stage}' requires {attr}")

    def next_run_seed(self, stage: str) -> np.random.SeedSequence:
        count = self.run_counters.get(stage, 0)
        self.run_counters[stage] = count + 1
        return np.random.SeedSequence([self.seed, STAGES.index(stage), count])

    def deformed_mesh(self) -> TetMesh:
        if self.input_mesh is None or self.deform_state is None:
            raise SessionError("deformation stage has not run")
        return TetMesh(self.deform_state.positions, self.input_mesh.tets)


def _array_bytes(arr: np.ndarray) -> tuple[bytes, str, list]:
    arr = np.ascontiguousarray(arr)
    kind = "<f8" if arr.dtype.kind == "f" else "<i8"
    converted = arr.astype(kind)
    return converted.tobytes(), kind, list(arr.shape)


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class _Writer:
    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.meta: dict = {}

    def array(self, name: str, arr) -> None:
        if arr is not None:
            self.arrays[name] = np.asarray(arr)

    def scalars(self, **kwargs) -> None:
        self.meta.update(kwargs)


def save_session(path, session: Session) -> None:
    w = _Writer()
    w.scalars(
        stage=session.stage,
        seed=session.seed,
        run_counters=session.run_counters,
        surface_mode=session.surface_mode,
        transform={"center": session.transform.center.tolist(),
                   "scale": session.transform.scale},
        quality_weights=dataclasses.asdict(session.quality_weights),
    )
    if session.input_mesh is not None:
        w.array("input_points", session.input_mesh.points)
        w.array("input_tets", session.input_mesh.tets)
    if session.deform_state is not None:
        w.array("deform_positions", session.deform_state.positions)
        w.scalars(deform_weights=dataclasses.asdict(session.deform_state.weights))
    if session.polycube is not None:
        w.array("cuboid_centers", session.polycube.centers())
        w.array("cuboid_half_extents", session.polycube.half_extents())
        w.array("cuboid_locked", session.polycube.locked_mask().astype(np.int64))
    if session.voxel_grid is not None:
        w.array("voxel_cells", session.voxel_grid.sorted_cells())
        w.array("voxel_origin", session.voxel_grid.origin)
        w.scalars(voxel_cell_size=session.voxel_grid.cell_size,
                  voxel_edit_log=[[op, [list(c) for c in cells]]
                                  for op, cells in session.voxel_grid.edit_log])
    if session.polycube_hex is not None:
        w.array("hex_points", session.polycube_hex.points)
        w.array("hex_cells", session.polycube_hex.hexes)
        w.scalars(hex_flags={k: v for k, v in session.polycube_hex.flags.items()
                             if isinstance(v, (bool, int, float, str))})
    if session.pullback_state is not None:
        st = session.pullback_state
        w.array("pullback_dprime", st.positions_dprime)
        w.array("pullback_m", st.positions_m)
        w.array("pullback_targets", st.pull_targets)
        w.scalars(pullback_weights=dataclasses.asdict(st.weights))
    if session.quality_positions is not None:
        w.array("quality_positions", session.quality_positions)
    if session.landmarks.pins:
        w.array("landmark_ids", session.landmarks.ids())
        w.array("landmark_positions", session.landmarks.positions())

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": w.meta,
        "arrays": {},
    }
    blobs = {}
    for name, arr in w.arrays.items():
        data, dtype, shape = _array_bytes(arr)
        manifest["arrays"][name] = {
            "dtype": dtype, "shape": shape, "sha256": _sha(data),
        }
        blobs[name] = data
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, data in blobs.items():
            zf.writestr(f"arrays/{name}.bin", data)


def _load_arrays(zf: zipfile.ZipFile, manifest: dict) -> dict[str, np.ndarray]:
    arrays = {}
    for name, info in manifest["arrays"].items():
        try:
            data = zf.read(f"arrays/{name}.bin")
        except KeyError as exc:
            raise SessionError(f"missing array '{name}'") from exc
        if _sha(data) != info["sha256"]:
            raise SessionError(f"checksum failure for array '{name}'")
        arr = np.frombuffer(data, dtype=info["dtype"]).reshape(info["shape"])
        if info["dtype"].endswith("i8"):
            arrays[name] = arr.astype(np.int64)
        else:
            arrays[name] = arr.astype(np.float64)
    return arrays


def load_session(path) -> Session:
    try:
        zf = zipfile.ZipFile(path, "r")
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, OSError) as exc:
        raise SessionError(f"cannot open session file {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise SessionError("missing manifest") from exc
        if manifest.get("format") != FORMAT_NAME:
            raise SessionError("not a hexbench session file")
        if manifest.get("version") != FORMAT_VERSION:
            raise SessionError(
                f"unsupported session version {manifest.get('version')} "
                f"(this build reads version {FORMAT_VERSION})")
        arrays = _load_arrays(zf, manifest)
    meta = manifest["meta"]

    session = Session(seed=int(meta["seed"]))
    session.run_counters = dict(meta.get("run_counters", {}))
    session.surface_mode = meta.get("surface_mode", "free")
    tr = meta["transform"]
    session.transform = Transform(center=np.array(tr["center"]), scale=tr["scale"])
    session.quality_weights = QualityWeights(**meta["quality_weights"])

    if "input_points" in arrays:
        session.input_mesh = TetMesh(arrays["input_points"], arrays["input_tets"])
    if "deform_positions" in arrays:
        session.deform_state = DeformationState(
            positions=arrays["deform_positions"],
            weights=DeformWeights(**meta["deform_weights"]),
        )
    if "cuboid_centers" in arrays:
        cuboids = [
            Cuboid(c, h, bool(lk))
            for c, h, lk in zip(arrays["cuboid_centers"],
                                arrays["cuboid_half_extents"],
                                arrays["cuboid_locked"])
        ]
        session.polycube = PolyCube(cuboids)
    if "voxel_cells" in arrays:
        grid = VoxelGrid(
            cell_size=float(meta["voxel_cell_size"]),
            cells={tuple(int(v) for v in c) for c in arrays["voxel_cells"]},
            origin=arrays["voxel_origin"],
        )
        grid.edit_log = [(op, tuple(tuple(int(v) for v in c) for c in cells))
                         for op, cells in meta.get("voxel_edit_log", [])]
        session.voxel_grid = grid
    if "hex_points" in arrays:
        session.polycube_hex = HexMesh(arrays["hex_points"], arrays["hex_cells"],
                                       flags=dict(meta.get("hex_flags", {})))
    if "pullback_dprime" in arrays:
        session.pullback_state = PullbackState(
            positions_dprime=arrays["pullback_dprime"],
            positions_m=arrays.get("pullback_m"),
            pull_targets=arrays.get("pullback_targets"),
            weights=PullbackWeights(**meta["pullback_weights"]),
        )
    if "quality_positions" in arrays:
        session.quality_positions = arrays["quality_positions"]
    if "landmark_ids" in arrays:
        for vid, pos in zip(arrays["landmark_ids"], arrays["landmark_positions"]):
            session.landmarks.set(int(vid), pos)

    session.advance(meta["stage"])
    return session


def config_from_strings(pairs) -> PipelineConfig:
    """Build a PipelineConfig from an iterable of 'key=value' strings."""
    config = PipelineConfig()
    for item in pairs:
        key, _, value = item.partition("=")
        apply_setting(config, key.strip(), value)
    return config
