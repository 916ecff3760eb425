"""Pipeline configuration: one dataclass per stage, plus a strict key/value
config-file format (``section.field = value``) where unknown keys are
rejected outright so typos cannot silently drop a weight."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .deform import DeformWeights
from .pullback import PullbackWeights
from .quality import QualityWeights, FREE


class ConfigError(Exception):
    pass


@dataclass
class DeformConfig:
    steps: int = 500
    lr: float = 1e-3
    lambda_angle: float = 1.0
    lambda_vol: float = 1.0
    lambda_cube: float = 1.0
    lambda_smooth: float = 1.0
    epsilon: float = 1e-3

    def weights(self) -> DeformWeights:
        return DeformWeights(self.lambda_angle, self.lambda_vol,
                             self.lambda_cube, self.lambda_smooth, self.epsilon)


@dataclass
class PolycubeConfig:
    steps: int = 300
    lr: float = 1e-3
    lambda_plus: float = 1.0
    lambda_minus: float = 1.0
    add_mode: str = "volume"
    n_add: int = 1
    heuristic_grid: int = 32
    anchor_grid: int = 16
    anchor_surface: int = 2000
    anchor_sigma: float = -1.0   # negative -> default (2% of bbox diagonal)
    # Final gap-closing pass: drop the discrepancy weight, keep gap closing
    # high, so the union covers the deformed shape before voxelization.
    gap_close: bool = True
    final_lambda_plus: float = 0.1
    final_lambda_minus: float = 1.0


@dataclass
class VoxelConfig:
    cell_size: float = -1.0      # negative -> bbox diagonal / 40
    pad: bool = False


@dataclass
class PullbackConfig:
    steps: int = 800             # per phase
    lr: float = 1e-4
    lambda_angle: float = 1.0
    lambda_vol: float = 1.0
    lambda_forward: float = 1.0
    lambda_backward: float = 1.0
    lambda_lap: float = 1.0
    lambda_pullback: float = 1.0
    epsilon: float = 1e-4

    def weights(self) -> PullbackWeights:
        return PullbackWeights(
            self.lambda_angle, self.lambda_vol, self.lambda_forward,
            self.lambda_backward, self.lambda_lap, self.lambda_pullback,
            self.epsilon)


@dataclass
class QualityConfig:
    steps: int = 1000
    lr: float = 1e-4
    lambda_lap: float = 1.0
    lambda_project: float = 1.0
    lambda_details: float = 1.0
    lambda_angle: float = 1.0
    lambda_vol: float = 1.0
    lambda_custom: float = 0.0
    worst_distortion: bool = False
    worst_custom: bool = False
    epsilon: float = 1e-4
    mode: str = FREE

    def weights(self) -> QualityWeights:
        return QualityWeights(
            self.lambda_lap, self.lambda_project, self.lambda_details,
            self.lambda_angle, self.lambda_vol, self.lambda_custom,
            self.worst_distortion, self.worst_custom, self.epsilon)


@dataclass
class ReportConfig:
    samples: int = 50000


@dataclass
class PipelineConfig:
    seed: int = 0
    deform: DeformConfig = field(default_factory=DeformConfig)
    polycube: PolycubeConfig = field(default_factory=PolycubeConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    pullback: PullbackConfig = field(default_factory=PullbackConfig)
    quality: QualityConfig = field(default_factory=QualityConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def apply_setting(config: PipelineConfig, key: str, raw_value: str) -> None:
    """Set one dotted key; rejects unknown sections and fields."""
    parts = key.split(".")
    if len(parts) == 1:
        section_obj, name = config, parts[0]
    elif len(parts) == 2:
        if not hasattr(config, parts[0]) or parts[0] == "seed":
            raise ConfigError(f"unknown config section: {parts[0]}")
        section_obj, name = getattr(config, parts[0]), parts[1]
        if not dataclasses.is_dataclass(section_obj):
            raise ConfigError(f"unknown config section: {parts[0]}")
    else:
        raise ConfigError(f"malformed key: {key}")
    fields = {f.name: f for f in dataclasses.fields(section_obj)}
    if name not in fields or dataclasses.is_dataclass(getattr(section_obj, name)):
        raise ConfigError(f"unknown config key: {key}")
    current = getattr(section_obj, name)
    setattr(section_obj, name, _coerce(raw_value, type(current), key))


def parse_config_file(path) -> PipelineConfig:
    config = PipelineConfig()
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            try:
                apply_setting(config, key.strip(), value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{ln}: {exc}") from exc
    return config
