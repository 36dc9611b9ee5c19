"""Sliding-window pose tracking and its per-step log."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..field.model import NeuralField
from ..geometry.se3 import Pose
from ..mapping.mapper import LossWeights
from ..sensors.models import TACTILE, VISION
from .residuals import ICP, REG, SDF, PoseWindow
from .solver import LMResult, lm_solve

SLAM, KNOWN_SHAPE = "slam", "known-shape"
LOST_THRESHOLD = 0.02
TRAJECTORY_HEADER = ["stamp", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "rms_sdf", "rms_icp",
                     "rms_reg", "lm_iters", "lost", "n_sdf_vision", "n_sdf_tactile", "n_icp_vision",
                     "n_icp_tactile"]


class TrackingLost(RuntimeError):
    pass


@dataclass
class TrackResult:
    stamp: float
    pose: Pose
    lm: LMResult
    lost: bool
    sdf_mean: float

    def row(self) -> list:
        c = self.lm.counts
        return [self.stamp, *self.pose.as_tuple(), self.lm.rms(SDF), self.lm.rms(ICP),
                self.lm.rms(REG), self.lm.iterations, int(self.lost),
                *(c.get(f"{f}_{k}", 0) for f in (SDF, ICP) for k in (VISION, TACTILE))]


def tracking_step(window: PoseWindow, frames, field: NeuralField | None, mode: str = SLAM,
                  weights: LossWeights = LossWeights(), stamp: float | None = None,
                  init_pose: Pose | None = None, keyframe=None,
                  **factor_flags) -> TrackResult:
    """Slide the window onto ``frames`` and solve; ``frames=None`` re-solves in place.

    The new pose starts from ``init_pose`` when given, else from the constant
    motion model. After the solve, a mean |SDF residual| above 2 cm (or no SDF
    residual at all) marks the step lost and the newest pose falls back to
    its prediction.
    """
    if mode not in (SLAM, KNOWN_SHAPE):
        raise ValueError(f"unknown tracking mode {mode!r}")
    if frames is not None:
        if stamp is None:
            stamp = max(f.stamp for f in frames)
        if init_pose is None:
            init_pose = window.predict()
        window.push(stamp, init_pose, frames, keyframe)
    elif not window.entries:
        raise ValueError("nothing to refine: window is empty")
    predicted = window.entries[-1].pose
    res = lm_solve(window, field, weights, **factor_flags)
    sdf = [r for r in res.residuals if r.kind == SDF and len(r)]
    sdf_mean = float(np.abs(sdf[0].values).mean()) if sdf else float("nan")
    lost = not sdf or sdf_mean > LOST_THRESHOLD or res.singular
    if lost:
        poses = window.poses
        poses[-1] = predicted
        window.set_poses(poses)
    return TrackResult(window.entries[-1].stamp, window.entries[-1].pose, res, lost, sdf_mean)


def trajectory_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for r in results:
        row = r.row() if isinstance(r, TrackResult) else list(r)
        w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()
