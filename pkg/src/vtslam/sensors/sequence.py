"""Simulated multi-sensor sequences and their on-disk form.

A sequence directory holds ``manifest.json`` plus one 16-bit depth PNG and one
1-bit mask PNG per frame (and a background PNG for vision frames). Depth is
stored in integer units of the sensor's ``depth_scale`` with 0 meaning invalid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry.se3 import Pose
from ..geometry.shapes import GroundTruthShape, shape_from_dict
from .models import TACTILE, VISION, NoiseConfig, SensorFrame, SensorModel
from .render import corrupt_depth, render_frame, tactile_noise
from .rig import TrajectoryStep

FORMAT_VERSION = 1
DEPTH_SCALE = {VISION: 1e-4, TACTILE: 1e-6}


class PlaybackError(IOError):
    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message if frame_index is None else f"frame {frame_index}: {message}")
        self.frame_index = frame_index


@dataclass
class SequenceStep:
    stamp: float
    object_pose: Pose  # ground truth, used only for initialization and evaluation
    frames: list = field(default_factory=list)

    def vision(self):
        return [f for f in self.frames if f.sensor.kind == VISION]

    def tactile(self):
        return [f for f in self.frames if f.sensor.kind == TACTILE]


@dataclass
class Sequence:
    steps: list
    shape: GroundTruthShape | None = None
    meta: dict = field(default_factory=dict)

    @property
    def stamps(self) -> np.ndarray:
        return np.array([s.stamp for s in self.steps])

    def gt_poses(self) -> list[Pose]:
        return [s.object_pose for s in self.steps]

    def __len__(self):
        return len(self.steps)


def quantize_frame(frame: SensorFrame) -> SensorFrame:
    """Round depths onto the storage grid so recording is lossless."""
    scale = DEPTH_SCALE[frame.sensor.kind]

    def q(d):
        if d is None:
            return None
        out = np.round(d / scale)
        bad = ~np.isfinite(out) | (out <= 0) | (out > 65535)
        return np.where(bad, np.nan, out * scale)

    depth = q(frame.depth)
    mask = frame.mask & np.isfinite(depth)
    return frame.copy(depth=depth, mask=mask, background=q(frame.background))


def simulate_sequence(shape: GroundTruthShape, trajectory: list[TrajectoryStep],
                      cameras: list[tuple[SensorModel, Pose]], tactile: SensorModel | None,
                      noise: NoiseConfig = NoiseConfig(), tactile_sigma: float = 0.0,
                      tactile_names=("thumb", "index", "middle", "ring")) -> Sequence:
    """Render every camera and every placed tactile sensor at each trajectory step.

    Vision depth is corrupted with ``noise``; tactile depth only gets the optional
    ``tactile_sigma`` Gaussian.
    """
    steps = []
    for i, st in enumerate(trajectory):
        frames = []
        for model, pose in cameras:
            f = render_frame(shape, st.object_pose, st.occluders, model, pose, st.stamp)
            frames.append(quantize_frame(corrupt_depth(f, noise, frame_index=i)))
        if tactile is not None:
            for k, pose in enumerate(st.tactile_poses):
                if pose is None:
                    continue
                model = SensorModel(**{**tactile.to_dict(), "id": tactile_names[k]})
                f = render_frame(shape, st.object_pose, None, model, pose, st.stamp)
                f = tactile_noise(f, tactile_sigma, noise.seed, frame_index=i * 8 + k)
                frames.append(quantize_frame(f))
        steps.append(SequenceStep(st.stamp, st.object_pose, frames))
    return Sequence(steps, shape)


def _write_depth(path: Path, depth: np.ndarray, scale: float):
    units = np.where(np.isfinite(depth), np.round(depth / scale), 0).astype(np.uint16)
    Image.fromarray(units).save(path)


def _read_depth(path: Path, scale: float, frame_index: int) -> np.ndarray:
    try:
        units = np.asarray(Image.open(path)).astype(np.int64)
    except (OSError, ValueError) as e:
        raise PlaybackError(f"cannot read {path.name}: {e}", frame_index) from e
    return np.where(units > 0, units * scale, np.nan)


def record_sequence(seq: Sequence, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sensors, frames, steps = {}, [], []
    k = 0
    for si, step in enumerate(seq.steps):
        steps.append({"stamp": step.stamp, "object_pose": list(step.object_pose.as_tuple())})
        for f in step.frames:
            sensors[f.sensor.id] = {**f.sensor.to_dict(), "depth_scale": DEPTH_SCALE[f.sensor.kind]}
            scale = DEPTH_SCALE[f.sensor.kind]
            entry = {"index": k, "step": si, "sensor": f.sensor.id, "stamp": f.stamp,
                     "pose": list(f.pose_world.as_tuple()), "depth": f"depth_{k:05d}.png",
                     "mask": f"mask_{k:05d}.png"}
            _write_depth(out / entry["depth"], f.depth, scale)
            Image.fromarray(f.mask).save(out / entry["mask"])
            if f.background is not None:
                entry["background"] = f"background_{k:05d}.png"
                _write_depth(out / entry["background"], f.background, scale)
            frames.append(entry)
            k += 1
    manifest = {"version": FORMAT_VERSION, "sensors": sensors, "steps": steps, "frames": frames,
                "shape": seq.shape.to_dict() if seq.shape is not None else None, "meta": seq.meta}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_sequence(seq_dir) -> Sequence:
    """Read a recorded sequence. Raises PlaybackError naming the offending frame."""
    d = Path(seq_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as e:
        raise PlaybackError(f"unreadable manifest in {d}: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise PlaybackError(f"unsupported sequence version {manifest.get('version')}")
    sensors = {}
    scales = {}
    for sid, s in manifest["sensors"].items():
        s = dict(s)
        scales[sid] = s.pop("depth_scale")
        sensors[sid] = SensorModel(**s)
    steps = [SequenceStep(s["stamp"], Pose.from_tuple(s["object_pose"])) for s in manifest["steps"]]
    last_stamp = -np.inf
    for e in manifest["frames"]:
        i = e["index"]
        if e["sensor"] not in sensors:
            raise PlaybackError(f"unknown sensor {e['sensor']!r}", i)
        if e["stamp"] < last_stamp:
            raise PlaybackError("stamps are not monotonic", i)
        last_stamp = e["stamp"]
        sensor = sensors[e["sensor"]]
        scale = scales[e["sensor"]]
        depth = _read_depth(d / e["depth"], scale, i)
        try:
            mask = np.asarray(Image.open(d / e["mask"])).astype(bool)
        except (OSError, ValueError) as err:
            raise PlaybackError(f"cannot read {e['mask']}: {err}", i) from err
        bg = _read_depth(d / e["background"], scale, i) if "background" in e else None
        if depth.shape != (sensor.height, sensor.width) or mask.shape != depth.shape:
            raise PlaybackError("image size does not match sensor intrinsics", i)
        depth = np.where(mask, depth, np.nan)
        frame = SensorFrame(sensor, e["stamp"], Pose.from_tuple(e["pose"]), depth, mask, bg)
        steps[e["step"]].frames.append(frame)
    shape = shape_from_dict(manifest["shape"]) if manifest.get("shape") else None
    return Sequence(steps, shape, manifest.get("meta", {}))
