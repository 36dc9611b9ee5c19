"""SLAM, known-shape tracking, static fitting and the two ablations."""
from __future__ import annotations

import dataclasses
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..evaluation.extract import EmptySurface, extract_mesh
from ..evaluation.metrics import ReconReport, coverage_labels, drift_report, precision_recall
from ..field.bake import cached_bake
from ..field.model import NeuralField
from ..geometry.se3 import look_at
from ..mapping.keyframes import Keyframe, KeyframeBank, keyframe_decision
from ..mapping.mapper import MapperConfig, ShapeMapper
from ..sensors.models import TACTILE, VISION, NoiseConfig, tactile_sensor, vision_sensor
from ..sensors.render import occlusion_score
from ..sensors.rig import HandRig, TrajectoryParams, camera_sphere, scripted_trajectory
from ..sensors.sequence import Sequence, simulate_sequence
from ..tracking.residuals import PoseWindow
from ..tracking.solver import LMResult
from ..tracking.tracker import KNOWN_SHAPE, SLAM, TrackResult, tracking_step
from .config import ExperimentConfig

log = logging.getLogger(__name__)

TAUS = np.round(np.arange(1, 11) * 1e-3, 6)


@dataclass
class RunResult:
    mode: str
    seed: int
    trajectory: list = field(default_factory=list)   # TrackResult rows
    gt_poses: list = field(default_factory=list)
    recon: ReconReport = field(default_factory=ReconReport)
    meshes: dict = field(default_factory=dict)       # stamp -> TriangleMesh
    timings: dict = field(default_factory=dict)      # stage -> seconds
    tables: dict = field(default_factory=dict)       # name -> (header, rows)
    diagnostics: str = ""
    lost_steps: int = 0
    field: NeuralField | None = None                 # the final map, for SLAM and fits

    @property
    def mean_adds(self) -> float:
        a = self.recon.adds
        return float(np.nanmean(a)) if np.isfinite(a).any() else float("nan")


class Stopwatch:
    def __init__(self):
        self.t = {}
        self.t0 = time.perf_counter()

    @contextmanager
    def __call__(self, stage: str):
        s = time.perf_counter()
        try:
            yield
        finally:
            self.t[stage] = self.t.get(stage, 0.0) + time.perf_counter() - s

    def report(self) -> dict:
        out = dict(self.t)
        out["total"] = time.perf_counter() - self.t0
        return out


# -- scene construction ---------------------------------------------------------

def trajectory_params(cfg: ExperimentConfig, seed: int, static: bool = False) -> TrajectoryParams:
    tr = cfg.trajectory
    return TrajectoryParams(angular_speed=0.0 if static else np.radians(tr.angular_speed_deg),
                            axis=tuple(tr.axis), translation_amplitude=tr.translation_amplitude,
                            tilt=np.radians(tr.tilt_deg), wobble_frequency=tr.wobble_frequency,
                            seed=seed)


def main_camera(cfg: ExperimentConfig):
    c = cfg.rig.camera
    return vision_sensor("camera", c.width, c.height, c.fov_deg), look_at(c.position, c.target)


def simulate(cfg: ExperimentConfig, seed: int, cameras=None, noise: NoiseConfig | None = None,
             duration: float | None = None, static: bool = False) -> Sequence:
    """Render the configured scene; ``cameras`` overrides the single main camera."""
    shape = cfg.shape()
    rig = HandRig(fingers_enabled=cfg.rig.fingers)
    kind = "axis-rotation" if static else cfg.trajectory.kind
    steps = scripted_trajectory(kind, duration or cfg.duration, cfg.playback_rate,
                                trajectory_params(cfg, seed, static), shape=shape, rig=rig)
    if cameras is None:
        cameras = [main_camera(cfg)] if cfg.rig.vision else []
    tactile = tactile_sensor("tactile", cfg.rig.tactile_width, cfg.rig.tactile_height) \
        if cfg.rig.tactile else None
    noise = noise or dataclasses.replace(cfg.noise, seed=cfg.noise.seed * 7919 + seed)
    return simulate_sequence(shape, steps, cameras, tactile, noise, cfg.rig.tactile_sigma)


def select_frames(frames, vision: bool = True, tactile: bool = True):
    return [f for f in frames if (f.sensor.kind == VISION and vision)
            or (f.sensor.kind == TACTILE and tactile)]


def make_window(cfg: ExperimentConfig, seed: int) -> PoseWindow:
    t = cfg.tracker
    return PoseWindow(n=t.window, M=t.rays, lm_iters=t.lm_iters, lm_step=t.lm_step,
                      lm_damping_init=t.lm_damping_init, icp_points=t.icp_points,
                      huber_delta=t.huber_delta, seed=seed)


def make_mapper(cfg: ExperimentConfig, field: NeuralField, seed: int) -> ShapeMapper:
    m = cfg.mapper
    bank = KeyframeBank(d_thresh=m.d_thresh, t_max=m.t_max,
                        replay_batch_per_sensor=m.replay_batch_per_sensor, replay_size=m.replay_size)
    mc = MapperConfig(init_iterations=m.init_iterations, sampling=m.sampling,
                      w_tr=cfg.weights.w_tr, seed=seed)
    return ShapeMapper(field, bank, mc)


def known_field(cfg: ExperimentConfig) -> NeuralField:
    return NeuralField(cfg.field, cached_bake(cfg.field, cfg.shape(), cfg.bake))


# -- evaluation -----------------------------------------------------------------

def _score(cfg: ExperimentConfig, res: RunResult, seq: Sequence, mesh=None):
    shape = cfg.shape()
    gt_mesh = shape.to_mesh()
    est = [r.pose for r in res.trajectory]
    stamps = [r.stamp for r in res.trajectory]
    drift = drift_report(stamps, est, seq.stamps, seq.gt_poses(), gt_mesh, cfg.metrics)
    rec = ReconReport(adds=drift.adds, failed=drift.failed)
    if mesh is not None:
        m = cfg.metrics
        p, r = precision_recall(gt_mesh, mesh, TAUS, m.samples, m.seed)
        p0, r0 = precision_recall(gt_mesh, mesh, [m.tau], m.samples, m.seed)
        rec.precision, rec.recall = float(p0[0]), float(r0[0])
        rec.fscore = float(2 * p0[0] * r0[0] / (p0[0] + r0[0])) if p0[0] + r0[0] > 0 else 0.0
        rec.taus = TAUS
        rec.fscore_curve = np.divide(2 * p * r, p + r, out=np.zeros_like(p), where=p + r > 0)
    res.recon = rec
    res.gt_poses = seq.gt_poses()


def _coverage(bank: KeyframeBank, mesh) -> np.ndarray:
    """Vertex labels against the keyframe clouds, taken into the object frame."""
    clouds = {VISION: [np.zeros((0, 3))], TACTILE: [np.zeros((0, 3))]}
    for kf in bank.keyframes:
        inv = kf.pose.inverse()
        for f in kf.frames:
            clouds[f.sensor.kind].append(inv.apply(f.backproject()))
    return coverage_labels(mesh.vertices, np.concatenate(clouds[VISION]),
                           np.concatenate(clouds[TACTILE]))


def _no_solve(pose) -> LMResult:
    # placeholder log entry for steps whose pose is given, not estimated
    return LMResult([pose], 0, [0.0], True)


def _mesh(field: NeuralField, cfg: ExperimentConfig, resolution: int | None = None):
    try:
        return extract_mesh(field, resolution or cfg.report.mesh_resolution)
    except EmptySurface:
        return None


# -- runs -----------------------------------------------------------------------

def run_tracking(cfg: ExperimentConfig, seed: int, seq: Sequence | None = None,
                 field: NeuralField | None = None, vision: bool = True,
                 tactile: bool = True) -> RunResult:
    """Known-shape tracking against the frozen, pre-baked field."""
    sw = Stopwatch()
    with sw("bake"):
        field = field or known_field(cfg)
    if seq is None:
        with sw("simulate"):
            seq = simulate(cfg, seed)
    res = RunResult("track-known", seed)
    window = make_window(cfg, seed)
    solves = 2
    with sw("tracking"):
        for i, st in enumerate(seq.steps):
            frames = select_frames(st.frames, vision, tactile)
            r = tracking_step(window, frames, field, KNOWN_SHAPE, cfg.weights, stamp=st.stamp,
                              init_pose=st.object_pose if i == 0 else None)
            lost = r.lost
            for _ in range(solves - 1):
                if lost:
                    break
                r = tracking_step(window, None, field, KNOWN_SHAPE, cfg.weights)
                lost = r.lost
            res.lost_steps += int(lost)
            res.trajectory.append(TrackResult(st.stamp, window.entries[-1].pose, r.lm, lost,
                                              r.sdf_mean))
    with sw("evaluate"):
        _score(cfg, res, seq)
    res.timings = sw.report()
    return res


def run_slam(cfg: ExperimentConfig, seed: int, seq: Sequence | None = None) -> RunResult:
    """Online SLAM: per frame, 2 pose solves and one shape iteration, repeated
    ``rounds_per_frame`` times, with meshes every ``mesh_every`` seconds."""
    sw = Stopwatch()
    if seq is None:
        with sw("simulate"):
            seq = simulate(cfg, seed)
    field = NeuralField(cfg.field, seed=seed)
    mapper = make_mapper(cfg, field, seed)
    bank = mapper.bank
    window = make_window(cfg, seed)
    res = RunResult("slam", seed)
    next_mesh = cfg.report.mesh_every
    rng = np.random.default_rng([seed, 17])
    for i, st in enumerate(seq.steps):
        frames = st.frames
        with sw("tracking"):
            if i == 0:
                entry = window.push(st.stamp, st.object_pose, frames)
                r = None
            else:
                r = tracking_step(window, frames, field, SLAM, cfg.weights, stamp=st.stamp)
                entry = window.entries[-1]
                if not r.lost:
                    r = tracking_step(window, None, field, SLAM, cfg.weights)
        with sw("keyframes"):
            d = keyframe_decision(bank, frames, field, entry.pose, rng)
            if d.accept:
                kf = Keyframe(frames, entry.pose, avg_render_loss=d.loss, accept_reason=d.reason,
                              step=i)
                bank.add(kf)
                entry.keyframe = kf
        for k in range(cfg.mapper.rounds_per_frame):
            with sw("mapping"):
                mapper.shape_iteration()
            if k == cfg.mapper.rounds_per_frame - 1:
                break
            with sw("tracking"):
                for _ in range(2):
                    r = tracking_step(window, None, field, SLAM, cfg.weights)
        lost = bool(r is not None and r.lost)
        res.lost_steps += int(lost)
        if r is None:
            r = TrackResult(st.stamp, entry.pose, _no_solve(entry.pose), False, float("nan"))
        res.trajectory.append(TrackResult(st.stamp, window.entries[-1].pose, r.lm, lost, r.sdf_mean))
        if st.stamp + 1e-9 >= next_mesh:
            with sw("mesh"):
                m = _mesh(field, cfg, cfg.report.checkpoint_resolution)
            if m is not None:
                res.meshes[round(st.stamp, 6)] = m
            next_mesh += cfg.report.mesh_every
    with sw("mesh"):
        final = _mesh(field, cfg)
    if final is not None:
        res.meshes["final"] = final
    with sw("evaluate"):
        _score(cfg, res, seq, final)
        if final is not None:
            res.recon.coverage = _coverage(bank, final)
    res.diagnostics = mapper.diagnostics_csv()
    res.field = field
    res.timings = sw.report()
    return res


def run_fit_static(cfg: ExperimentConfig, seed: int) -> RunResult:
    """Multi-view fit of a static object with its true pose, then F-score."""
    sw = Stopwatch()
    cams = [(vision_sensor(f"view{k}", cfg.rig.camera.width, cfg.rig.camera.height,
                           cfg.rig.camera.fov_deg), p)
            for k, p in enumerate(camera_sphere(cfg.rig.static_views, cfg.rig.static_radius))]
    with sw("simulate"):
        seq = simulate(cfg, seed, cameras=cams if cfg.rig.vision else [], duration=1e-6,
                       static=True)
    field = NeuralField(cfg.field, seed=seed)
    mapper = make_mapper(cfg, field, seed)
    mapper.cfg.init_iterations = 0
    st = seq.steps[0]
    mapper.bank.add(Keyframe(st.frames, st.object_pose))
    res = RunResult("fit-static", seed)
    with sw("mapping"):
        for _ in range(cfg.mapper.static_iterations):
            mapper.shape_iteration()
    with sw("mesh"):
        m = _mesh(field, cfg)
    if m is not None:
        res.meshes["final"] = m
    res.trajectory = [TrackResult(st.stamp, st.object_pose, _no_solve(st.object_pose), False,
                                  float("nan"))]
    with sw("evaluate"):
        _score(cfg, res, seq, m)
    res.diagnostics = mapper.diagnostics_csv()
    res.field = field
    res.timings = sw.report()
    return res


OCCLUSION_HEADER = ["viewpoint", "x", "y", "z", "occlusion_score", "adds_vision",
                    "adds_visuotactile", "improvement_pct", "lost_vision", "lost_visuotactile"]
NOISE_HEADER = ["D", "adds_vision", "adds_visuotactile", "adds_tactile"]


def run_ablate_occlusion(cfg: ExperimentConfig, seed: int) -> RunResult:
    """Track from each camera_sphere viewpoint with and without touch."""
    sw = Stopwatch()
    with sw("bake"):
        field = known_field(cfg)
    ab = cfg.ablation
    views = camera_sphere(ab.viewpoints, ab.radius)
    c = cfg.rig.camera
    rows, seqs = [], []
    for k, pose in enumerate(views):
        cam = vision_sensor("camera", c.width, c.height, c.fov_deg)
        with sw("simulate"):
            seq = simulate(cfg, seed, cameras=[(cam, pose)], duration=ab.duration)
        seqs.append(seq)
        with sw("tracking"):
            rv = run_tracking(cfg, seed, seq, field, vision=True, tactile=False)
            rvt = run_tracking(cfg, seed, seq, field, vision=True, tactile=True)
        rows.append([k, *pose.t, 0.0, rv.mean_adds, rvt.mean_adds,
                     _improvement(rv.mean_adds, rvt.mean_adds), rv.lost_steps, rvt.lost_steps])
    # occlusion score: mask area of each viewpoint, normalized over the viewpoints
    frames = [f.copy(sensor=dataclasses.replace(f.sensor, id=f"view{k}"))
              for k, s in enumerate(seqs) for st in s.steps for f in st.vision()]
    scores = occlusion_score(frames)
    for k, row in enumerate(rows):
        row[4] = scores[f"view{k}"]
    res = RunResult("ablate-occlusion", seed)
    res.tables["occlusion"] = (OCCLUSION_HEADER, rows)
    res.timings = sw.report()
    return res


def _improvement(err_v: float, err_vt: float) -> float:
    return 100.0 * (err_v - err_vt) / err_v if err_v > 0 else 0.0


def run_ablate_noise(cfg: ExperimentConfig, seed: int, tactile_only: bool = True) -> RunResult:
    """Sweep the depth-noise factor D; vision-only, visuo-tactile and touch-only tracking."""
    sw = Stopwatch()
    with sw("bake"):
        field = known_field(cfg)
    rows = []
    for D in cfg.ablation.noise_levels:
        noise = dataclasses.replace(cfg.noise, factor_D=float(D), seed=cfg.noise.seed * 7919 + seed)
        with sw("simulate"):
            seq = simulate(cfg, seed, noise=noise, duration=cfg.ablation.duration)
        with sw("tracking"):
            rv = run_tracking(cfg, seed, seq, field, vision=True, tactile=False)
            rvt = run_tracking(cfg, seed, seq, field, vision=True, tactile=True)
            rt = run_tracking(cfg, seed, seq, field, vision=False, tactile=True) if tactile_only \
                else None
        rows.append([D, rv.mean_adds, rvt.mean_adds, rt.mean_adds if rt else float("nan")])
    res = RunResult("ablate-noise", seed)
    res.tables["noise"] = (NOISE_HEADER, rows)
    res.timings = sw.report()
    return res


RUNNERS = {
    "slam": run_slam,
    "track-known": run_tracking,
    "fit-static": run_fit_static,
    "ablate-occlusion": run_ablate_occlusion,
    "ablate-noise": run_ablate_noise,
}


def run(cfg: ExperimentConfig, seed: int) -> RunResult:
    return RUNNERS[cfg.mode](cfg, seed)
