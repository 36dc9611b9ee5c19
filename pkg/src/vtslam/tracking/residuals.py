"""Pose-graph factors over a window of object poses.

Every Jacobian is taken w.r.t. right increments: pose_i <- pose_i @ exp(xi_i),
with xi = (omega, v). Columns 6i:6i+6 belong to window pose i.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..field.model import NeuralField
from ..geometry.se3 import Pose, hat_batch, se3_left_jacobian, se3_log
from ..sensors.models import VISION, SensorFrame

SDF, ICP, REG = "sdf", "icp", "reg"
MIN_VALID_PIXELS = 8
MIN_CORRESPONDENCES = 16


class DegenerateFrame(ValueError):
    pass


class InsufficientOverlap(ValueError):
    pass


@dataclass
class Residual:
    kind: str
    values: np.ndarray
    jacobian: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.jacobian.shape[0] != len(self.values):
            raise ValueError("jacobian rows must match residual count")

    def __len__(self):
        return len(self.values)

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.values**2))) if len(self.values) else float("nan")


@dataclass
class Cloud:
    """World-frame points of one window entry; normals are NaN where unknown."""

    points: np.ndarray
    normals: np.ndarray
    counts: dict = field(default_factory=dict)  # sensor kind -> points
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree


@dataclass
class WindowEntry:
    stamp: float
    pose: Pose
    frames: list
    keyframe: object = None
    cloud: Cloud | None = field(default=None, repr=False)


@dataclass
class PoseWindow:
    """The last ``n`` object poses and the frames observed at each."""

    n: int = 3
    M: int = 64
    lm_iters: int = 20
    lm_step: float = 1.0
    lm_damping_init: float = 1e-4
    icp_points: int = 256
    huber_delta: float | None = None
    seed: int = 0
    entries: list = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if self.n < 1 or self.M < 1:
            raise ValueError("window size and ray count must be positive")

    def __len__(self):
        return len(self.entries)

    @property
    def poses(self) -> list:
        return [e.pose for e in self.entries]

    def set_poses(self, poses):
        if len(poses) != len(self.entries):
            raise ValueError("pose count must match the window")
        for e, p in zip(self.entries, poses):
            e.pose = p
            if e.keyframe is not None:
                e.keyframe.pose = p

    def push(self, stamp: float, pose: Pose, frames, keyframe=None) -> WindowEntry:
        if self.entries and stamp <= self.entries[-1].stamp:
            raise ValueError("window stamps must be strictly increasing")
        e = WindowEntry(stamp, pose, list(frames), keyframe)
        self.entries.append(e)
        if len(self.entries) > self.n:
            self.entries.pop(0)
        self.steps += 1
        return e

    def predict(self) -> Pose:
        """Constant relative motion from the last two poses."""
        if not self.entries:
            raise ValueError("window is empty")
        last = self.entries[-1].pose
        if len(self.entries) < 2:
            return last
        prev = self.entries[-2].pose
        return last @ (prev.inverse() @ last)


# -- SDF factor -------------------------------------------------------------------

def frame_rng(frame: SensorFrame, seed: int = 0) -> np.random.Generator:
    """Generator keyed on the frame's measurements, not its stamp.

    Identical observations thus give identical samples, which keeps a static
    scene at a fixed point instead of jittering with the draw.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(frame.sensor.id.encode())
    h.update(np.ascontiguousarray(frame.depth).tobytes())
    h.update(np.packbits(frame.mask).tobytes())
    return np.random.default_rng([seed, int.from_bytes(h.digest(), "little")])


def surface_points(frame: SensorFrame, M: int, rng=None) -> np.ndarray:
    """World points of up to M randomly drawn mask pixels."""
    r, c = np.nonzero(frame.valid())
    if len(r) < MIN_VALID_PIXELS:
        raise DegenerateFrame(f"{frame.sensor.id}: {len(r)} valid pixels")
    rng = rng if rng is not None else frame_rng(frame)
    sel = rng.choice(len(r), size=min(M, len(r)), replace=False)
    sel.sort()
    return frame.backproject(r[sel], c[sel])


def sample_sdf_points(window: PoseWindow, counts: dict | None = None) -> list:
    """Per entry, the stacked surface points of its usable frames (maybe empty).

    ``counts``, when given, is incremented per sensor kind.
    """
    out = []
    for e in window.entries:
        pts = []
        for f in e.frames:
            try:
                p = surface_points(f, window.M, frame_rng(f, window.seed))
            except DegenerateFrame:
                continue
            pts.append(p)
            if counts is not None:
                counts[f.sensor.kind] = counts.get(f.sensor.kind, 0) + len(p)
        out.append(np.concatenate(pts) if pts else np.zeros((0, 3)))
    return out


def sdf_residual(poses, points, field: NeuralField, weight: float = 1.0) -> Residual:
    """r = F(pose_i^-1 p) for every sampled world point p of entry i."""
    n = len(poses)
    vals, rows = [], []
    for i, (pose, p) in enumerate(zip(poses, points)):
        if len(p) == 0:
            continue
        q = pose.inverse().apply(p)
        v, g, _ = field.gradient_object(q)
        # dq/domega = [q]x, dq/dv = -I
        J = np.zeros((len(p), 6 * n))
        J[:, 6 * i:6 * i + 3] = np.einsum("nj,njk->nk", g, hat_batch(q))
        J[:, 6 * i + 3:6 * i + 6] = -g
        vals.append(v)
        rows.append(J)
    if not vals:
        return Residual(SDF, np.zeros(0), np.zeros((0, 6 * n)), weight)
    return Residual(SDF, np.concatenate(vals), np.concatenate(rows), weight)


# -- ICP factor -------------------------------------------------------------------

def _vision_normals(frame: SensorFrame, rows, cols) -> np.ndarray:
    """Depth-map normals from central differences; NaN where a neighbor is invalid."""
    H, W = frame.depth.shape
    valid = frame.valid()
    out = np.full((len(rows), 3), np.nan)
    ok = (rows > 0) & (rows < H - 1) & (cols > 0) & (cols < W - 1)
    idx = np.flatnonzero(ok)
    r, c = rows[idx], cols[idx]
    ok2 = valid[r, c - 1] & valid[r, c + 1] & valid[r - 1, c] & valid[r + 1, c]
    idx, r, c = idx[ok2], r[ok2], c[ok2]
    if len(idx) == 0:
        return out
    s = frame.sensor

    def pt(rr, cc):
        return s.ray_for_pixels(rr, cc) * frame.depth[rr, cc][:, None]

    n = np.cross(pt(r, c + 1) - pt(r, c - 1), pt(r + 1, c) - pt(r - 1, c))
    norm = np.linalg.norm(n, axis=1)
    good = norm > 0
    n = n[good] / norm[good, None]
    # face the camera
    p = pt(r[good], c[good])
    n *= -np.sign(np.einsum("ij,ij->i", n, p))[:, None]
    out[idx[good]] = frame.pose_world.rotate(n)
    return out


def build_cloud(entry: WindowEntry, n_points: int, seed: int = 0,
                field: NeuralField | None = None) -> Cloud:
    """Subsampled visuo-tactile cloud of an entry, with per-point world normals.

    Vision normals come from the depth map, and pixels without one are
    dropped. Tactile normals come from the field gradient at the entry's
    current pose when a field is given.
    """
    pts, nrm, counts = [], [], {}
    for f in entry.frames:
        r, c = np.nonzero(f.valid())
        if len(r) == 0:
            continue
        sel = np.sort(frame_rng(f, seed).choice(len(r), size=min(n_points, len(r)), replace=False))
        r, c = r[sel], c[sel]
        p = f.backproject(r, c)
        if f.sensor.kind == VISION:
            # silhouette and crease pixels have no stable normal; drop them
            n = _vision_normals(f, r, c)
            ok = np.isfinite(n[:, 0])
            p, n = p[ok], n[ok]
        elif field is not None:
            _, g, _ = field.gradient_object(entry.pose.inverse().apply(p))
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            n = np.where(gn > 1e-9, entry.pose.rotate(g / np.maximum(gn, 1e-12)), np.nan)
        else:
            n = np.full((len(p), 3), np.nan)
        pts.append(p)
        nrm.append(n)
        counts[f.sensor.kind] = counts.get(f.sensor.kind, 0) + len(p)
    if not pts:
        return Cloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return Cloud(np.concatenate(pts), np.concatenate(nrm), counts)


def icp_pair(pose_a: Pose, cloud_a: Cloud, pose_b: Pose, cloud_b: Cloud,
             max_dist: float = 0.01, max_normal_angle: float = np.radians(45)):
    """Correspondences from b to a in the object frame and their residual blocks.

    Returns (values, J_a, J_b) with 6 columns each. Pairs whose target has a
    normal give a point-to-plane row; the rest give three point-to-point rows.
    Pairs farther than ``max_dist`` apart, or whose normals (when both are
    known) disagree by more than ``max_normal_angle``, are rejected.
    """
    if len(cloud_a.points) == 0 or len(cloud_b.points) == 0:
        raise InsufficientOverlap("empty cloud")
    qb = pose_b.inverse().apply(cloud_b.points)
    # search in a's world frame so the tree over cloud a is built once
    d, j = cloud_a.tree.query(pose_a.apply(qb), distance_upper_bound=max_dist)
    keep = np.isfinite(d)
    jj = np.minimum(j, len(cloud_a.points) - 1)
    na = cloud_a.normals[jj] @ pose_a.R
    nb = cloud_b.normals @ pose_b.R
    cos = np.einsum("ij,ij->i", na, nb)
    keep &= ~(np.isfinite(cos) & (cos < np.cos(max_normal_angle)))
    if keep.sum() < MIN_CORRESPONDENCES:
        raise InsufficientOverlap(f"{int(keep.sum())} correspondences")
    qb = qb[keep]
    qa = pose_a.inverse().apply(cloud_a.points[j[keep]])
    n_w = cloud_a.normals[j[keep]]
    plane = np.isfinite(n_w).all(axis=1)
    vals, Ja, Jb = [], [], []
    if plane.any():
        n = n_w[plane] @ pose_a.R
        a, b = qa[plane], qb[plane]
        diff = b - a
        vals.append(np.einsum("ij,ij->i", n, diff))
        # object-frame normal rotates with pose a: dn/domega_a = [n]x; x^T [y]x = (x cross y)^T
        ja = np.concatenate([np.cross(diff, n) - np.cross(n, a), n], axis=1)
        jb = np.concatenate([np.cross(n, b), -n], axis=1)
        Ja.append(ja)
        Jb.append(jb)
    if (~plane).any():
        a, b = qa[~plane], qb[~plane]
        k = len(a)
        vals.append((b - a).reshape(-1))
        ja = np.concatenate([-hat_batch(a), np.broadcast_to(np.eye(3), (k, 3, 3))], axis=2)
        jb = np.concatenate([hat_batch(b), -np.broadcast_to(np.eye(3), (k, 3, 3))], axis=2)
        Ja.append(ja.reshape(-1, 6))
        Jb.append(jb.reshape(-1, 6))
    return np.concatenate(vals), np.concatenate(Ja), np.concatenate(Jb)


def icp_residual(poses, clouds, weight: float = 1.0, max_dist: float = 0.01) -> Residual:
    """Frame-to-frame ICP between consecutive entries; pairs without overlap are skipped."""
    n = len(poses)
    vals, rows = [], []
    for i in range(n - 1):
        try:
            v, ja, jb = icp_pair(poses[i], clouds[i], poses[i + 1], clouds[i + 1], max_dist)
        except InsufficientOverlap:
            continue
        J = np.zeros((len(v), 6 * n))
        J[:, 6 * i:6 * i + 6] = ja
        J[:, 6 * i + 6:6 * i + 12] = jb
        vals.append(v)
        rows.append(J)
    if not vals:
        return Residual(ICP, np.zeros(0), np.zeros((0, 6 * n)), weight)
    return Residual(ICP, np.concatenate(vals), np.concatenate(rows), weight)


# -- regularizer ------------------------------------------------------------------

def reg_residual(poses, weight: float = 1.0) -> Residual:
    """r = log(x_i^-1 x_{i+1}) per consecutive pair."""
    n = len(poses)
    vals, rows = [], []
    for i in range(n - 1):
        r = se3_log(poses[i].inverse() @ poses[i + 1])
        Jl_inv = np.linalg.inv(se3_left_jacobian(r))
        Jr_inv = np.linalg.inv(se3_left_jacobian(-r))
        J = np.zeros((6, 6 * n))
        J[:, 6 * i:6 * i + 6] = -Jl_inv
        J[:, 6 * i + 6:6 * i + 12] = Jr_inv
        vals.append(r)
        rows.append(J)
    if not vals:
        return Residual(REG, np.zeros(0), np.zeros((0, 6 * n)), weight)
    return Residual(REG, np.concatenate(vals), np.concatenate(rows), weight)

