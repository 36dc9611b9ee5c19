"""Pixel and ray sampling for shape updates, with per-sample distance bounds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..field.model import FieldConfig, normalize_points
from ..sensors.models import TACTILE, VISION
from .keyframes import Keyframe, ray_bound_interval


class NoValidPixels(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    n_strat: int = 8
    n_surf: int = 4
    free_space_fraction: float = 0.5
    truncation: float = 0.005


@dataclass
class RaySampleBatch:
    """Flat per-sample arrays indexed back to their rays.

    Depths are z-depths in the sensor frame; ``dhat`` is measured minus sample
    depth (positive in front of the surface, +inf for free rays with no
    background behind them).
    """

    pts_obj: np.ndarray        # (S, 3) object-frame sample points
    ray: np.ndarray            # (S,) ray index
    z: np.ndarray              # (S,) sample depth
    dhat: np.ndarray           # (S,) distance bound
    free: np.ndarray           # (S,) bool, True for the free-space set
    ray_kind: np.ndarray       # (R,) sensor kind per ray
    ray_keyframe: np.ndarray   # (R,) index into the replay list
    ray_sensor: np.ndarray     # (R,) sensor id
    ray_is_free_pixel: np.ndarray  # (R,) pixel drawn from outside the mask
    truncation: float = 0.005
    discarded: int = 0

    @property
    def n_rays(self) -> int:
        return len(self.ray_kind)

    @property
    def trunc(self) -> np.ndarray:
        return ~self.free

    def __len__(self):
        return len(self.z)


def distance_bound(measured_depth, sample_depth):
    """Batch distance bound: measured minus sample depth along the same pixel ray."""
    return np.asarray(measured_depth, dtype=float) - np.asarray(sample_depth, dtype=float)


def _free_pixels(kf: Keyframe, fi: int, cfg: FieldConfig):
    # mask-false pixels whose rays cross the bound (cached per keyframe and frame)
    key = ("free", fi)
    if key not in kf._cache:
        f = kf.frames[fi]
        r, c = np.nonzero(~f.mask)
        rays = f.sensor.ray_for_pixels(r, c)
        dirs = f.pose_world.rotate(rays / np.linalg.norm(rays, axis=1, keepdims=True))
        t0, t1 = ray_bound_interval(cfg, kf.pose, f.pose_world.t, dirs)
        ok = t0 < t1
        kf._cache[key] = (r[ok], c[ok])
    return kf._cache[key]


def _surface_pixels(kf: Keyframe, fi: int):
    key = ("surf", fi)
    if key not in kf._cache:
        kf._cache[key] = np.nonzero(kf.frames[fi].valid())
    return kf._cache[key]


def _stratified(lo, hi, n, rng):
    edges = np.linspace(0.0, 1.0, n + 1)
    u = edges[:-1] + rng.random((len(lo), n)) / n
    return lo[:, None] + u * (hi - lo)[:, None]


def sample_rays(replay: list[Keyframe], field_cfg: FieldConfig, rng, per_sensor: int = 10,
                cfg: SamplingConfig = SamplingConfig()) -> RaySampleBatch:
    """Draw pixels from every frame of every replayed keyframe and sample along them.

    Vision frames contribute surface and free-space pixels in equal shares;
    tactile frames only surface pixels, sampled within the truncation band so
    they never produce free-space samples. Samples outside the field bound are
    dropped afterwards.
    """
    if not replay:
        raise ValueError("empty replay set")
    d_tr = cfg.truncation
    parts = []
    meta = []
    n_ray = 0
    for ki, kf in enumerate(replay):
        for fi, f in enumerate(kf.frames):
            s = f.sensor
            sr, sc = _surface_pixels(kf, fi)
            if s.kind == VISION:
                n_free = int(round(per_sensor * cfg.free_space_fraction))
                fr, fc = _free_pixels(kf, fi, field_cfg)
            else:
                n_free = 0
                fr = fc = np.zeros(0, dtype=int)
            n_surf = per_sensor - n_free
            pick_s = rng.choice(len(sr), size=min(n_surf, len(sr)), replace=False) if len(sr) else []
            pick_f = rng.choice(len(fr), size=min(n_free, len(fr)), replace=False) if len(fr) else []
            rows = np.concatenate([sr[pick_s], fr[pick_f]]).astype(int)
            cols = np.concatenate([sc[pick_s], fc[pick_f]]).astype(int)
            if len(rows) == 0:
                continue
            is_free = np.arange(len(rows)) >= len(pick_s)
            rays = s.ray_for_pixels(rows, cols)
            scale = np.linalg.norm(rays, axis=1)
            dirs_w = f.pose_world.rotate(rays / scale[:, None])
            t0, t1 = ray_bound_interval(field_cfg, kf.pose, f.pose_world.t, dirs_w)
            z_in = np.maximum(t0 / scale, s.near)
            z_out = np.minimum(t1 / scale, s.far)
            depth = f.depth[rows, cols]
            if f.background is not None:
                bg = f.background[rows, cols]
            else:
                bg = np.full(len(rows), np.nan)
            meas = np.where(is_free, np.where(np.isfinite(bg), bg, np.inf), depth)

            if s.kind == TACTILE:
                lo = np.maximum(depth - d_tr, s.near)
                hi = depth + d_tr
            else:
                lo = z_in
                hi = np.where(is_free, np.minimum(z_out, meas - d_tr), np.minimum(z_out, depth + d_tr))
            zs = _stratified(lo, np.maximum(hi, lo), cfg.n_strat, rng)
            valid = np.broadcast_to((hi > lo)[:, None], zs.shape).copy()
            if cfg.n_surf:
                g = depth[:, None] + rng.normal(scale=d_tr / 3, size=(len(rows), cfg.n_surf))
                gv = (~is_free)[:, None] & (np.abs(g - depth[:, None]) <= d_tr) & (g >= s.near)
                zs = np.concatenate([zs, np.where(gv, g, 0.0)], axis=1)
                valid = np.concatenate([valid, gv], axis=1)
            rid = np.broadcast_to(np.arange(len(rows))[:, None] + n_ray, zs.shape)
            m = np.broadcast_to(meas[:, None], zs.shape)
            r_sel, k_sel = np.nonzero(valid)
            z = zs[r_sel, k_sel]
            p_cam = rays[r_sel] * z[:, None]
            p_obj = kf.pose.inverse().apply(f.pose_world.apply(p_cam))
            parts.append((p_obj, rid[r_sel, k_sel], z, m[r_sel, k_sel] - z))
            meta.append((np.full(len(rows), s.kind), np.full(len(rows), ki),
                         np.full(len(rows), s.id, dtype=object), is_free))
            n_ray += len(rows)
    if not parts:
        raise NoValidPixels("no frame in the replay set has a usable pixel")
    pts = np.concatenate([p[0] for p in parts])
    ray = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    dhat = np.concatenate([p[3] for p in parts])
    _, inside = normalize_points(field_cfg, pts)
    discarded = int((~inside).sum())
    pts, ray, z, dhat = pts[inside], ray[inside], z[inside], dhat[inside]
    kinds = np.concatenate([m[0] for m in meta])
    # touch is surface-only; guard against rounding at the band edge
    free = (dhat > d_tr) & (kinds[ray] != TACTILE)
    dhat = np.where(kinds[ray] == TACTILE, np.clip(dhat, -d_tr, d_tr), dhat)
    return RaySampleBatch(pts, ray, z, dhat, free, kinds, np.concatenate([m[1] for m in meta]),
                          np.concatenate([m[2] for m in meta]), np.concatenate([m[3] for m in meta]),
                          d_tr, discarded)
