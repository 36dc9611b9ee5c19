"""Pose and reconstruction metrics: ADD-S, F-score, drift, coverage labels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geometry.mesh import EmptyMesh, TriangleMesh
from ..geometry.se3 import Pose

VISION_LABEL, TOUCH_LABEL, HALLUCINATED_LABEL = "vision", "touch", "hallucinated"


class StampMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.005
    samples: int = 10_000
    failure_thresh: float = 0.010
    grace_period: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _check(mesh: TriangleMesh):
    if mesh is None or len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")


def add_s(gt_mesh: TriangleMesh, est_pose: Pose, gt_pose: Pose,
          cfg: MetricsConfig = MetricsConfig()) -> float:
    """Mean closest-point distance between model samples under the two poses."""
    _check(gt_mesh)
    pts = gt_mesh.sample(cfg.samples, seed=cfg.seed)
    d, _ = cKDTree(gt_pose.apply(pts)).query(est_pose.apply(pts))
    return float(d.mean())


def add(gt_mesh: TriangleMesh, est_pose: Pose, gt_pose: Pose,
        cfg: MetricsConfig = MetricsConfig()) -> float:
    """Symmetry-unaware counterpart: mean distance between corresponding samples."""
    _check(gt_mesh)
    pts = gt_mesh.sample(cfg.samples, seed=cfg.seed)
    return float(np.linalg.norm(est_pose.apply(pts) - gt_pose.apply(pts), axis=1).mean())


def precision_recall(gt_mesh: TriangleMesh, recon_mesh: TriangleMesh, taus, samples: int = 10_000,
                     seed: int = 0):
    """Precision/recall arrays over thresholds ``taus`` using point-to-triangle distances."""
    _check(gt_mesh)
    _check(recon_mesh)
    d_recon = gt_mesh.distance(recon_mesh.sample(samples, seed=seed))
    d_gt = recon_mesh.distance(gt_mesh.sample(samples, seed=seed + 1))
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    p = (d_recon[None] < taus[:, None]).mean(axis=1)
    r = (d_gt[None] < taus[:, None]).mean(axis=1)
    return p, r


def harmonic(p, r):
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def fscore(gt_mesh: TriangleMesh, recon_mesh: TriangleMesh, tau: float = 0.005,
           samples: int = 10_000, seed: int = 0) -> tuple[float, float, float]:
    p, r = precision_recall(gt_mesh, recon_mesh, [tau], samples, seed)
    return float(p[0]), float(r[0]), float(harmonic(p, r)[0])


def fscore_curve(gt_mesh, recon_mesh, taus, samples: int = 10_000, seed: int = 0) -> np.ndarray:
    p, r = precision_recall(gt_mesh, recon_mesh, taus, samples, seed)
    return harmonic(p, r)


def coverage_labels(vertices: np.ndarray, vision_cloud, touch_cloud, radius: float = 0.005):
    """Label each vertex by its nearest measurement kind; ties go to vision."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)

    def nearest(cloud):
        cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
        if len(cloud) == 0:
            return np.full(len(v), np.inf)
        return cKDTree(cloud).query(v)[0]

    dv = nearest(vision_cloud)
    dt = nearest(touch_cloud)
    labels = np.where(dv <= dt, VISION_LABEL, TOUCH_LABEL).astype(object)
    labels[np.minimum(dv, dt) > radius] = HALLUCINATED_LABEL
    return labels


@dataclass
class DriftReport:
    stamps: np.ndarray
    adds: np.ndarray  # NaN inside the grace period
    mean: float
    failed: bool


def drift_report(est_stamps, est_poses, gt_stamps, gt_poses, gt_mesh: TriangleMesh,
                 cfg: MetricsConfig = MetricsConfig()) -> DriftReport:
    """ADD-S per step after the grace period; failed iff its mean exceeds the threshold."""
    est_stamps = np.asarray(est_stamps, dtype=float)
    gt_stamps = np.asarray(gt_stamps, dtype=float)
    if len(est_stamps) != len(gt_stamps) or len(est_poses) != len(est_stamps) \
            or len(gt_poses) != len(gt_stamps) or np.any(np.abs(est_stamps - gt_stamps) > 1e-9):
        raise StampMismatch("estimated and ground-truth stamps are not aligned")
    t0 = est_stamps[0] if len(est_stamps) else 0.0
    adds = np.full(len(est_stamps), np.nan)
    for i, (s, e, g) in enumerate(zip(est_stamps, est_poses, gt_poses)):
        if s - t0 >= cfg.grace_period:
            adds[i] = add_s(gt_mesh, e, g, cfg)
    scored = adds[np.isfinite(adds)]
    mean = float(scored.mean()) if len(scored) else 0.0
    return DriftReport(est_stamps, adds, mean, mean > cfg.failure_thresh)


@dataclass
class ReconReport:
    adds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    precision: float = float("nan")
    recall: float = float("nan")
    fscore: float = float("nan")
    fscore_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))
    taus: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failed: bool = False
    coverage: np.ndarray | None = None
