"""Depth rendering by sphere tracing, depth corruption and occlusion scores."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..geometry.se3 import Pose
from ..geometry.shapes import GroundTruthShape, sphere_trace
from .models import TACTILE, NoiseConfig, OccluderSet, SensorFrame, SensorModel


class EmptySet(ValueError):
    pass


def render_frame(shape: GroundTruthShape, object_pose: Pose, occluders: OccluderSet | None,
                 sensor: SensorModel, sensor_pose: Pose, stamp: float = 0.0) -> SensorFrame:
    """Segmented depth of ``shape`` (placed at ``object_pose``) seen from ``sensor_pose``.

    Rays are traced against the union of the object and the occluders; a pixel is
    in the mask iff its first hit is on the object within the depth range. For
    vision sensors, depths of occluder hits are kept in ``frame.background``.
    """
    occluders = occluders if occluders is not None else OccluderSet()
    rays = sensor.pixel_rays().reshape(-1, 3)
    scale = np.linalg.norm(rays, axis=1)
    dirs = sensor_pose.rotate(rays / scale[:, None])
    origin = sensor_pose.t
    inv = object_pose.inverse()
    use_occ = len(occluders) > 0 and sensor.kind != TACTILE

    def obj_sdf(p):
        return shape.sdf(inv.apply(p))

    def scene_sdf(p):
        d = obj_sdf(p)
        return np.minimum(d, occluders.sdf(p)) if use_occ else d

    # z-depth far maps to ray length far * |ray|; small margin so hits at exactly far count
    t = sphere_trace(scene_sdf, origin, dirs, sensor.far * scale * (1 + 1e-6) + 1e-6)
    hit = np.isfinite(t)
    z = np.where(hit, t / scale, np.nan)
    on_obj = np.zeros(len(t), dtype=bool)
    if hit.any():
        p = origin + t[hit, None] * dirs[hit]
        d_obj = obj_sdf(p)
        on_obj[hit] = d_obj <= (occluders.sdf(p) if use_occ else np.inf)
    in_range = hit & (z >= sensor.near) & (z <= sensor.far)
    mask = on_obj & in_range
    shape_hw = (sensor.height, sensor.width)
    depth = np.where(mask, z, np.nan).reshape(shape_hw)
    background = None
    if sensor.kind != TACTILE:
        background = np.where(in_range & ~on_obj, z, np.nan).reshape(shape_hw)
    return SensorFrame(sensor, float(stamp), sensor_pose, depth, mask.reshape(shape_hw), background)


def corrupt_depth(frame: SensorFrame, cfg: NoiseConfig, frame_index: int = 0) -> SensorFrame:
    """Shuffle, quantize, then add Gaussian noise to valid depths, scaled by D/5.

    The RNG is seeded from (cfg.seed, frame_index) so frames can be processed in
    any order. Invalid pixels stay invalid and the mask is unchanged.
    """
    if cfg.factor_D == 0:
        return frame.copy()
    k = cfg.factor_D / 5.0
    rng = np.random.default_rng([cfg.seed, frame_index])
    depth = frame.depth.copy()
    valid = frame.valid()
    rows, cols = np.nonzero(valid)
    r = int(round(cfg.shuffle_radius * k))
    if r > 0 and len(rows):
        h, w = depth.shape
        sr = np.clip(rows + rng.integers(-r, r + 1, size=len(rows)), 0, h - 1)
        sc = np.clip(cols + rng.integers(-r, r + 1, size=len(rows)), 0, w - 1)
        src = frame.depth[sr, sc]
        ok = valid[sr, sc]
        depth[rows[ok], cols[ok]] = src[ok]
    vals = depth[rows, cols]
    step = cfg.quantization_step * k
    if step > 0:
        vals = np.round(vals / step) * step
    vals = vals + rng.normal(scale=cfg.hf_sigma * k, size=len(vals))
    depth[rows, cols] = np.clip(vals, frame.sensor.near, frame.sensor.far)
    return frame.copy(depth=depth)


def tactile_noise(frame: SensorFrame, sigma: float, seed: int, frame_index: int = 0) -> SensorFrame:
    """Optional Gaussian error on tactile depth, standing in for a learned depth model."""
    if sigma <= 0:
        return frame.copy()
    rng = np.random.default_rng([seed, frame_index, 1])
    depth = frame.depth.copy()
    v = frame.valid()
    depth[v] = np.clip(depth[v] + rng.normal(scale=sigma, size=int(v.sum())), frame.sensor.near,
                       frame.sensor.far)
    return frame.copy(depth=depth)


def occlusion_score(frames) -> dict[str, float]:
    """Per-viewpoint occlusion score from vision frames grouped by sensor id.

    The mean mask area of each viewpoint is min-max normalized over the set, so
    0 is the most occluded viewpoint and 1 the least. A degenerate set (one
    viewpoint, or all areas equal) scores 1.0.
    """
    frames = list(frames)
    if not frames:
        raise EmptySet("occlusion_score needs at least one frame")
    areas = defaultdict(list)
    for f in frames:
        areas[f.sensor.id].append(int(f.mask.sum()))
    return normalize_areas({k: float(np.mean(v)) for k, v in areas.items()})


def normalize_areas(mean_areas: dict) -> dict[str, float]:
    if not mean_areas:
        raise EmptySet("no viewpoints")
    vals = np.array(list(mean_areas.values()))
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        return {k: 1.0 for k in mean_areas}
    return {k: float((a - lo) / (hi - lo)) for k, a in mean_areas.items()}
