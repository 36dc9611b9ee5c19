"""Sensor descriptions and the segmented-depth frames they produce."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry.se3 import Pose
from ..geometry.shapes import Capsule

VISION = "vision"
TACTILE = "tactile"


@dataclass(frozen=True)
class SensorModel:
    """Pinhole depth sensor. Tactile sensors use the same model at centimeter range."""

    id: str
    kind: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.kind not in (VISION, TACTILE):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if self.width <= 0 or self.height <= 0 or self.fx <= 0 or self.fy <= 0:
            raise ValueError("invalid intrinsics")
        if not 0 <= self.near < self.far:
            raise ValueError("depth range must satisfy 0 <= near < far")

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def ray_for_pixels(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return np.stack([(cols + 0.5 - self.cx) / self.fx, (rows + 0.5 - self.cy) / self.fy,
                         np.ones(len(rows))], axis=-1)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def vision_sensor(id: str = "camera", width: int = 320, height: int = 240, fov_deg: float = 45.0,
                  near: float = 0.05, far: float = 1.0) -> SensorModel:
    f = (width / 2) / np.tan(np.radians(fov_deg) / 2)
    return SensorModel(id, VISION, f, f, width / 2, height / 2, width, height, near, far)


TACTILE_CAMERA_DEPTH = 0.02


def tactile_sensor(id: str, width: int = 240, height: int = 320, footprint: float = 0.016,
                   camera_depth: float = TACTILE_CAMERA_DEPTH, gel_range: float = 0.005) -> SensorModel:
    """Gel camera: a narrow pinhole ``camera_depth`` behind the gel plane.

    The focal length makes the gel plane exactly ``footprint`` wide in the
    image; only surfaces within ``gel_range`` past the gel are reported.
    """
    f = camera_depth * width / footprint
    return SensorModel(id, TACTILE, f, f, width / 2, height / 2, width, height, 0.0,
                       camera_depth + gel_range)


@dataclass(eq=False)
class SensorFrame:
    """Segmented depth from one sensor at one instant.

    ``depth`` is z-depth in meters with NaN marking invalid pixels; it is valid
    only where ``mask`` is true. ``background`` optionally holds the depth of
    non-object surfaces (vision only), used to bound free-space samples.
    """

    sensor: SensorModel
    stamp: float
    pose_world: Pose
    depth: np.ndarray
    mask: np.ndarray
    background: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        shape = (self.sensor.height, self.sensor.width)
        if self.depth.shape != shape or self.mask.shape != shape:
            raise ValueError(f"frame arrays must be {shape}")

    def valid(self) -> np.ndarray:
        return self.mask & np.isfinite(self.depth)

    def copy(self, **changes) -> "SensorFrame":
        base = dict(depth=self.depth.copy(), mask=self.mask.copy(),
                    background=None if self.background is None else self.background.copy())
        base.update(changes)
        return replace(self, **base)

    def backproject(self, rows=None, cols=None) -> np.ndarray:
        """World-frame points for the given (or all valid) pixels."""
        if rows is None:
            rows, cols = np.nonzero(self.valid())
        z = self.depth[rows, cols]
        rays = self.sensor.ray_for_pixels(rows, cols)
        return self.pose_world.apply(rays * z[:, None])

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha1()
        h.update(repr((self.sensor.id, self.stamp, self.pose_world.as_tuple())).encode())
        h.update(np.ascontiguousarray(self.depth).tobytes())
        h.update(np.packbits(self.mask).tobytes())
        if self.background is not None:
            h.update(np.ascontiguousarray(self.background).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class NoiseConfig:
    """Depth corruption magnitudes; constants are the values at factor_D = 5."""

    factor_D: float = 0.0
    seed: int = 0
    quantization_step: float = 0.001
    shuffle_radius: float = 1.0
    hf_sigma: float = 0.0015

    def __post_init__(self):
        if self.factor_D < 0:
            raise ValueError("factor_D must be nonnegative")


@dataclass
class OccluderSet:
    capsules: list = field(default_factory=list)

    def __post_init__(self):
        for c in self.capsules:
            if not isinstance(c, Capsule):
                raise TypeError("occluders are capsules")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        if not self.capsules:
            return np.full(len(pts), np.inf)
        return np.min([c.sdf(pts) for c in self.capsules], axis=0)

    def __len__(self):
        return len(self.capsules)
