"""Keyframe bank: information-gain acceptance and loss-weighted replay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..field.model import NeuralField
from ..geometry.se3 import Pose
from ..sensors.models import SensorFrame

FIRST, INFO_GAIN, FORCED = "first", "info-gain", "forced"
EMA_ALPHA = 0.3


@dataclass(eq=False)
class Keyframe:
    frames: list
    pose: Pose  # object pose estimate at this keyframe
    avg_render_loss: float = 0.0
    accept_reason: str = FIRST
    step: int = -1
    uses: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a keyframe needs at least one frame")
        if self.avg_render_loss < 0:
            raise ValueError("avg_render_loss must be nonnegative")

    @property
    def stamp(self) -> float:
        return max(f.stamp for f in self.frames)

    def update_loss(self, loss: float, alpha: float = EMA_ALPHA):
        self.avg_render_loss = (1 - alpha) * self.avg_render_loss + alpha * max(float(loss), 0.0)
        self.uses += 1


@dataclass
class KeyframeBank:
    keyframes: list = field(default_factory=list)
    d_thresh: float = 0.01
    t_max: float = 0.2
    replay_batch_per_sensor: int = 10
    replay_size: int = 5
    decision_pixels: int = 200

    def __len__(self):
        return len(self.keyframes)

    def __getitem__(self, i):
        return self.keyframes[i]

    def add(self, kf: Keyframe):
        if self.keyframes and kf.stamp <= self.keyframes[-1].stamp:
            raise ValueError("keyframe stamps must be strictly increasing")
        self.keyframes.append(kf)

    @property
    def last_stamp(self) -> float:
        return self.keyframes[-1].stamp if self.keyframes else -np.inf


@dataclass
class Decision:
    accept: bool
    reason: str | None
    loss: float


def render_depth(field: NeuralField, object_pose: Pose, frame: SensorFrame, rows, cols,
                 max_steps: int = 64, eps: float = 1e-4) -> np.ndarray:
    """Sphere-trace the posed field along pixel rays; returns z-depth per pixel.

    Tracing starts where the ray enters the field bound (or at the near plane).
    Rays that never reach the zero level stop at the bound exit / far plane.
    """
    s = frame.sensor
    rays = s.ray_for_pixels(np.asarray(rows), np.asarray(cols))
    scale = np.linalg.norm(rays, axis=1)
    dirs = frame.pose_world.rotate(rays / scale[:, None])
    o = frame.pose_world.t
    t0, t1 = ray_bound_interval(field.cfg, object_pose, o, dirs)
    t0 = np.maximum(t0, s.near * scale)
    t1 = np.minimum(t1, s.far * scale)
    t = t0.copy()
    active = np.flatnonzero(t0 < t1)
    done = np.zeros(len(t), dtype=bool)
    inv = object_pose.inverse()
    for _ in range(max_steps):
        if len(active) == 0:
            break
        p = inv.apply(o + t[active, None] * dirs[active])
        d, _ = field.eval_object(p)
        hit = np.abs(d) < eps
        done[active[hit]] = True
        t[active] += d
        keep = ~hit & (t[active] < t1[active]) & (t[active] > t0[active] - 0.01)
        active = active[keep]
    t = np.clip(t, t0, t1)
    t[t0 >= t1] = (s.far * scale)[t0 >= t1]
    return t / scale


def ray_bound_interval(cfg, object_pose: Pose, origin, dirs):
    """Slab test of world rays against the object-frame bound box: (t_in, t_out).

    Rays missing the box get t_in >= t_out.
    """
    inv = object_pose.inverse()
    o = inv.apply(np.asarray(origin, dtype=float).reshape(1, 3))[0]
    d = inv.rotate(dirs)
    lo = np.asarray(cfg.bound_center) - cfg.bound_side / 2
    hi = lo + cfg.bound_side
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / d
        ta = (lo - o) * inv_d
        tb = (hi - o) * inv_d
    ta = np.where(np.isnan(ta), -np.inf, ta)
    tb = np.where(np.isnan(tb), np.inf, tb)
    t_in = np.max(np.minimum(ta, tb), axis=1)
    t_out = np.min(np.maximum(ta, tb), axis=1)
    return np.maximum(t_in, 0.0), t_out


def render_loss(field: NeuralField, object_pose: Pose, frames, n_pixels: int, rng) -> float:
    """Mean |rendered - measured| depth over up to ``n_pixels`` mask pixels of ``frames``."""
    pix = []
    for fi, f in enumerate(frames):
        r, c = np.nonzero(f.valid())
        pix.append(np.stack([np.full(len(r), fi), r, c], axis=1))
    pix = np.concatenate(pix) if pix else np.zeros((0, 3), dtype=int)
    if len(pix) == 0:
        return 0.0
    sel = pix[rng.choice(len(pix), size=min(n_pixels, len(pix)), replace=False)]
    err = []
    for fi in np.unique(sel[:, 0]):
        f = frames[fi]
        rc = sel[sel[:, 0] == fi]
        z = render_depth(field, object_pose, f, rc[:, 1], rc[:, 2])
        err.append(np.abs(z - f.depth[rc[:, 1], rc[:, 2]]))
    return float(np.concatenate(err).mean())


def keyframe_decision(bank: KeyframeBank, frames, field: NeuralField, pose: Pose,
                      rng=None) -> Decision:
    """Accept the candidate on an empty bank, a stale bank, or a poor render.

    The render loss is computed with the current (frozen) field either way, so
    it can seed the new keyframe's replay weight.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    stamp = max(f.stamp for f in frames)
    loss = render_loss(field, pose, frames, bank.decision_pixels, rng)
    if not bank.keyframes:
        return Decision(True, FIRST, loss)
    if stamp <= bank.last_stamp:
        raise ValueError("candidate must be newer than the last keyframe")
    if loss > bank.d_thresh:
        return Decision(True, INFO_GAIN, loss)
    if stamp - bank.last_stamp >= bank.t_max:
        return Decision(True, FORCED, loss)
    return Decision(False, None, loss)


def select_replay(bank: KeyframeBank, rng) -> list[Keyframe]:
    """The two newest keyframes plus loss-weighted draws without replacement."""
    kfs = bank.keyframes
    if not kfs:
        raise ValueError("empty keyframe bank")
    if len(kfs) <= 2:
        return list(kfs)
    chosen = [kfs[-2], kfs[-1]]
    rest = kfs[:-2]
    k = min(bank.replay_size - 2, len(rest))
    if k > 0:
        w = np.array([kf.avg_render_loss for kf in rest]) + 1e-6
        idx = rng.choice(len(rest), size=k, replace=False, p=w / w.sum())
        chosen = [rest[i] for i in sorted(idx)] + chosen
    return chosen
