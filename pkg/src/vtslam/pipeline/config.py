"""Experiment configuration: a YAML tree mapped onto nested dataclasses."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from dataclasses import field as dfield
from pathlib import Path

import numpy as np
import yaml

from ..evaluation.metrics import MetricsConfig
from ..field.bake import BakeConfig
from ..field.model import FieldConfig
from ..geometry.shapes import shape_from_dict
from ..mapping.mapper import LossWeights
from ..mapping.sampling import SamplingConfig
from ..sensors.models import NoiseConfig

MODES = ("slam", "track-known", "ablate-occlusion", "ablate-noise", "fit-static")


class ConfigError(ValueError):
    pass


@dataclass
class TrajectorySpec:
    kind: str = "wobble-rotation"
    angular_speed_deg: float = 10.0
    axis: list = dfield(default_factory=lambda: [0.0, 0.0, 1.0])
    translation_amplitude: float = 0.003
    tilt_deg: float = 6.0
    wobble_frequency: float = 0.1


@dataclass
class CameraSpec:
    width: int = 160
    height: int = 120
    fov_deg: float = 45.0
    position: list = dfield(default_factory=lambda: [-0.17, -0.2, 0.14])
    target: list = dfield(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class RigSpec:
    vision: bool = True
    tactile: bool = True
    fingers: bool = True
    camera: CameraSpec = dfield(default_factory=CameraSpec)
    tactile_width: int = 48
    tactile_height: int = 64
    tactile_sigma: float = 0.0
    static_views: int = 6       # fit-static: cameras on a sphere around the object
    static_radius: float = 0.3


@dataclass
class MapperSpec:
    init_iterations: int = 500
    rounds_per_frame: int = 8   # (shape iteration + 2 pose solves) per frame
    static_iterations: int = 1000
    sampling: SamplingConfig = dfield(default_factory=SamplingConfig)
    replay_batch_per_sensor: int = 10
    replay_size: int = 5
    d_thresh: float = 0.01
    t_max: float = 0.2


@dataclass
class TrackerSpec:
    window: int = 3
    rays: int = 64
    lm_iters: int = 20
    lm_step: float = 1.0
    lm_damping_init: float = 1e-4
    icp_points: int = 256
    huber_delta: float | None = None


@dataclass
class AblationSpec:
    viewpoints: int = 12
    radius: float = 0.5
    duration: float = 10.0
    noise_levels: list = dfield(default_factory=lambda: [0, 10, 20, 30, 40, 50])


@dataclass
class ReportSpec:
    mesh_every: float = 5.0
    mesh_resolution: int = 100        # final mesh, scored
    checkpoint_resolution: int = 64   # periodic meshes
    figures: bool = True


@dataclass
class ExperimentConfig:
    mode: str = "slam"
    object: dict = dfield(default_factory=lambda: {"kind": "box", "size": [0.06, 0.06, 0.06]})
    trajectory: TrajectorySpec = dfield(default_factory=TrajectorySpec)
    rig: RigSpec = dfield(default_factory=RigSpec)
    noise: NoiseConfig = dfield(default_factory=NoiseConfig)
    weights: LossWeights = dfield(default_factory=LossWeights)
    field: FieldConfig = dfield(default_factory=FieldConfig)
    metrics: MetricsConfig = dfield(default_factory=MetricsConfig)
    bake: BakeConfig = dfield(default_factory=BakeConfig)
    mapper: MapperSpec = dfield(default_factory=MapperSpec)
    tracker: TrackerSpec = dfield(default_factory=TrackerSpec)
    ablation: AblationSpec = dfield(default_factory=AblationSpec)
    report: ReportSpec = dfield(default_factory=ReportSpec)
    seeds: list = dfield(default_factory=lambda: [0])
    duration: float = 30.0
    playback_rate: float = 1.0

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.duration <= 0 or self.playback_rate <= 0:
            raise ConfigError("duration and playback_rate must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not (self.rig.vision or self.rig.tactile):
            raise ConfigError("enable at least one sensor kind")
        if self.mapper.rounds_per_frame < 1:
            raise ConfigError("rounds_per_frame must be at least 1")
        try:
            shape_from_dict(self.object)
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"bad object spec: {e}") from e
        return self

    def shape(self):
        return shape_from_dict(self.object)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _build(cls, data, path="config"):
    """Instantiate dataclass ``cls`` from a (partial) mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    default = cls()
    for k, v in data.items():
        ftype = _nested_type(cls, k)
        if ftype is not None:
            kwargs[k] = _build(ftype, v, f"{path}.{k}")
        else:
            kwargs[k] = _check_scalar(getattr(default, k), v, f"{path}.{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _check_scalar(default, value, path):
    """Reject values whose type cannot stand in for the default's."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not float(value).is_integer():
            ok = False
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple, dict)):
        ok = isinstance(value, type(default)) or isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return tuple(value) if isinstance(default, tuple) else value


def _nested_type(cls, name):
    default = cls()
    val = getattr(default, name)
    return type(val) if dataclasses.is_dataclass(val) else None


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}).validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(data)


def set_path(data: dict, dotted: str, value):
    """Set ``a.b.c`` in a nested dict, creating levels as needed."""
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value
