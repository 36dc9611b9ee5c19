"""Camera placement, scripted in-hand trajectories and the finger/tactile rig."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry.se3 import Pose, look_at
from ..geometry.shapes import Capsule, GroundTruthShape, sphere_trace
from .models import TACTILE_CAMERA_DEPTH, OccluderSet

AXIS_ROTATION = "axis-rotation"
WOBBLE_ROTATION = "wobble-rotation"


class InvalidParams(ValueError):
    pass


def camera_sphere(n: int, radius: float, center=(0.0, 0.0, 0.0)) -> list[Pose]:
    """Fibonacci-lattice cameras on a sphere, all facing ``center`` with world +z up.

    Point i sits at height z = 1 - 2i/(n-1) (top to bottom); n=1 is the top pole.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    center = np.asarray(center, dtype=float)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for i in range(n):
        z = 1.0 - 2.0 * i / (n - 1) if n > 1 else 1.0
        rho = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * i
        p = center + radius * np.array([rho * np.cos(phi), rho * np.sin(phi), z])
        poses.append(look_at(p, center))
    return poses


@dataclass(frozen=True)
class TrajectoryParams:
    angular_speed: float = np.radians(10.0)  # rad/s
    axis: tuple = (0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)
    translation_amplitude: float = 0.0  # meters, <= 5 mm
    tilt: float = 0.0  # radians, <= 10 deg
    wobble_frequency: float = 0.1  # Hz
    seed: int = 0


@dataclass
class HandRig:
    """Four fingertip anchors fixed in the world, plus finger and palm capsules.

    Each fingertip sensor is placed where a ray from its anchor toward the
    object center meets the surface, backed off by ``standoff`` along the
    surface normal and facing the surface. The pose is that of the gel
    camera, ``camera_depth`` further back.
    """

    anchors: np.ndarray = field(default_factory=lambda: np.array([
        [-0.12, 0.0, 0.0],     # thumb
        [0.12, 0.03, 0.012],   # index
        [0.12, -0.03, 0.012],  # middle
        [0.03, 0.0, -0.12],    # ring, from below
    ]))
    names: tuple = ("thumb", "index", "middle", "ring")
    standoff: float = 0.0005
    camera_depth: float = TACTILE_CAMERA_DEPTH
    finger_radius: float = 0.012
    finger_length: float = 0.06
    palm: list = field(default_factory=lambda: [
        Capsule([-0.06, -0.04, -0.062], [0.06, -0.04, -0.062], 0.014),
        Capsule([-0.06, 0.0, -0.062], [0.06, 0.0, -0.062], 0.014),
        Capsule([-0.06, 0.04, -0.062], [0.06, 0.04, -0.062], 0.014),
    ])
    fingers_enabled: bool = True

    def place(self, shape: GroundTruthShape, object_pose: Pose, max_dist: float = 0.5):
        """Sensor poses (or None for anchors that miss) and the occluders at this pose."""
        inv = object_pose.inverse()
        poses = []
        caps = list(self.palm) if self.fingers_enabled else []
        for a in np.asarray(self.anchors, dtype=float):
            d = object_pose.t - a
            d = d / np.linalg.norm(d)
            o_obj = inv.apply(a[None])
            d_obj = inv.rotate(d[None])
            t = sphere_trace(shape.sdf, o_obj, d_obj, max_dist)[0]
            if not np.isfinite(t):
                poses.append(None)
                continue
            hit_obj = o_obj[0] + t * d_obj[0]
            n = object_pose.rotate(shape.normal(hit_obj[None])[0])
            hit = object_pose.apply(hit_obj[None])[0]
            pos = hit + self.standoff * n
            cam = pos + self.camera_depth * n
            poses.append(look_at(cam, pos))
            if self.fingers_enabled:
                base = pos + (self.finger_radius + 0.002) * n
                caps.append(Capsule(base, base + self.finger_length * n, self.finger_radius))
        return poses, OccluderSet(caps)


@dataclass
class TrajectoryStep:
    stamp: float
    object_pose: Pose
    tactile_poses: list
    occluders: OccluderSet


def scripted_trajectory(kind: str, duration: float, rate: float, params: TrajectoryParams = None,
                        shape: GroundTruthShape | None = None, rig: HandRig | None = None
                        ) -> list[TrajectoryStep]:
    """Object poses at ``rate`` Hz for ``duration`` seconds (stamps 0, 1/rate, ...).

    The object spins about ``params.axis`` through ``params.center``. The wobble
    kind adds sinusoidal translation and axis tilt with a seed-dependent phase.
    When ``shape`` is given, tactile poses and occluders come from ``rig``.
    """
    params = params or TrajectoryParams()
    if duration <= 0 or rate <= 0:
        raise InvalidParams("duration and rate must be positive")
    if kind not in (AXIS_ROTATION, WOBBLE_ROTATION):
        raise InvalidParams(f"unknown trajectory kind {kind!r}")
    if params.translation_amplitude > 0.005 + 1e-12 or abs(params.tilt) > np.radians(10) + 1e-12:
        raise InvalidParams("perturbation exceeds 5 mm / 10 deg")
    axis = np.asarray(params.axis, dtype=float)
    if np.linalg.norm(axis) == 0:
        raise InvalidParams("rotation axis must be nonzero")
    axis = axis / np.linalg.norm(axis)
    center = np.asarray(params.center, dtype=float)
    rng = np.random.default_rng(params.seed)
    phase = rng.uniform(0, 2 * np.pi)
    tilt_dir = np.cross(axis, _any_perpendicular(axis))
    tilt_dir = Pose.from_axis_angle(axis, rng.uniform(0, 2 * np.pi)).rotate(tilt_dir)
    trans_dir = rng.normal(size=3)
    trans_dir /= np.linalg.norm(trans_dir)
    rig = rig if rig is not None else HandRig()

    n = int(np.floor(duration * rate + 1e-9)) + 1
    steps = []
    for i in range(n):
        s = i / rate
        pose = Pose.from_axis_angle(axis, params.angular_speed * s, center)
        if kind == WOBBLE_ROTATION:
            w = np.sin(2 * np.pi * params.wobble_frequency * s + phase)
            tilt = Pose.from_axis_angle(tilt_dir, params.tilt * w) if params.tilt else Pose.identity()
            shift = params.translation_amplitude * w * trans_dir
            pose = Pose.from_translation(center + shift) @ tilt @ Pose(pose.q, np.zeros(3))
        if shape is not None:
            tac, occ = rig.place(shape, pose)
        else:
            tac, occ = [], OccluderSet()
        steps.append(TrajectoryStep(s, pose, tac, occ))
    return steps


def _any_perpendicular(v):
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return np.cross(v, a) / np.linalg.norm(np.cross(v, a))
