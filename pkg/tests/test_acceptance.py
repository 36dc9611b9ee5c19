"""End-to-end acceptance criteria 1-8, one verdict line each.

These are slow (about 30 minutes on one core). Skip them with ``-m "not acceptance"``.
"""
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from test_evaluation import _hull, _point_triangle_brute, _random_mesh, _CUBE_SYMS
from test_field import _away_from_cell_faces, _fd_param_check, _touched_coords
from test_tracking import _box_cloud, _fd_jacobian, _rel

from vtslam.evaluation import MetricsConfig, add_s, fscore
from vtslam.field import FieldConfig, NeuralField, cached_bake
from vtslam.geometry import Box, Pose
from vtslam.pipeline import (config_from_dict, run_ablate_noise, run_ablate_occlusion,
                             run_fit_static, run_slam, run_tracking, write_run)
from vtslam.tracking import Cloud, icp_residual, reg_residual, sdf_residual

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
CUBE = Box([0.06, 0.06, 0.06])
NO_FIGS = {"report": {"figures": False}}


def _timed(fn, *args):
    t = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t


def _csvs(res, path):
    d = write_run(res, path, figures=False)
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


# -- 1. gradients ---------------------------------------------------------------------

def _param_states(n=100):
    cfg = FieldConfig(levels=4, table_size=2**12, base_resolution=4, growth_factor=2.0,
                      mlp_width=16)
    worst = 0.0
    for s in range(n):
        rng = np.random.default_rng(s)
        f = NeuralField(cfg, seed=s)
        f.params.theta[: cfg.table_param_count()] = rng.uniform(-0.05, 0.05,
                                                                  cfg.table_param_count())
        pts = rng.uniform(-0.07, 0.07, size=(32, 3))
        up = rng.normal(size=32)
        a, fd = _fd_param_check(f, pts, up, _touched_coords(f, pts, rng, 20))
        worst = max(worst, np.linalg.norm(a - fd) / np.linalg.norm(fd))
    return worst


def _pose_states(field, n=100):
    worst = {"reg": 0.0, "sdf": 0.0, "icp": 0.0}
    mesh = CUBE.to_mesh()
    for s in range(n):
        rng = np.random.default_rng(s)
        poses = [Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.1),
                                      rng.normal(size=3) * 0.003) for _ in range(2)]
        J = reg_residual(poses).jacobian
        worst["reg"] = max(worst["reg"], _rel(J, _fd_jacobian(lambda p: reg_residual(p).values,
                                                                poses)))
        # keep sample points clear of hash-grid cell faces, where the trilinear
        # interpolation has a kink that central differences straddle
        pts = []
        for k in range(2):
            p = mesh.sample(128, seed=1000 * s + k) + rng.normal(scale=0.002, size=(128, 3))
            obj = poses[k].inverse().apply(p)
            pts.append(p[_away_from_cell_faces(field.cfg, obj, 1e-5)][:32])
        r = sdf_residual(poses, pts, field)
        J_fd = _fd_jacobian(lambda p: sdf_residual(p, pts, field).values, poses)
        worst["sdf"] = max(worst["sdf"], _rel(r.jacobian, J_fd))

        a = _box_cloud(s, 300)
        pb = poses[1].apply(poses[0].inverse().apply(a.points))
        pb = pb + rng.normal(scale=2e-4, size=pb.shape)
        clouds = [Cloud(a.points, a.normals + rng.normal(scale=0.1, size=a.normals.shape)),
                  Cloud(pb, np.full_like(pb, np.nan))]
        r = icp_residual(poses, clouds)
        J_fd = _fd_jacobian(lambda p: icp_residual(p, clouds).values, poses, h=1e-7)
        worst["icp"] = max(worst["icp"], _rel(r.jacobian, J_fd))
    return worst


def test_criterion_1_gradients(verdict):
    cfg = FieldConfig()
    field = NeuralField(cfg, cached_bake(cfg, CUBE))
    t = time.perf_counter()
    w_param = _param_states()
    w_pose = _pose_states(field)
    dt = time.perf_counter() - t
    ok = w_param < 1e-3 and max(w_pose.values()) < 1e-3 and dt < 60
    verdict(1, ok, f"param rel {w_param:.2e}, pose rel "
                   + ", ".join(f"{k} {v:.2e}" for k, v in w_pose.items()) + f", {dt:.0f}s")


# -- 2. static fit --------------------------------------------------------------------

@pytest.mark.parametrize("obj", [{"kind": "sphere", "radius": 0.03},
                                 {"kind": "box", "size": [0.06, 0.06, 0.06]}])
def test_criterion_2_static_fit(verdict, obj):
    cfg = config_from_dict({"mode": "fit-static", "object": obj, **NO_FIGS})
    res, dt = _timed(run_fit_static, cfg, 0)
    f = res.recon.fscore
    ok = cfg.mapper.static_iterations <= 2000 and f >= 0.95 and dt < 300
    verdict(2, ok, f"{obj['kind']} F@5mm {f:.3f} after {cfg.mapper.static_iterations} iterations, "
                   f"{dt:.0f}s")


# -- 3. known-shape tracking ----------------------------------------------------------

@pytest.fixture(scope="module")
def tracking_runs():
    cfg = config_from_dict({"mode": "track-known", **NO_FIGS})
    t = time.perf_counter()
    runs = [run_tracking(cfg, s) for s in SEEDS]
    return cfg, runs, time.perf_counter() - t


def test_criterion_3_known_shape_tracking(verdict, tracking_runs):
    cfg, runs, dt = tracking_runs
    adds = [r.mean_adds for r in runs]
    fails = sum(r.recon.failed or r.lost_steps > 0 for r in runs)
    ok = max(adds) <= 0.003 and fails == 0 and dt < 600
    verdict(3, ok, "mean ADD-S mm " + " ".join(f"{1e3 * a:.2f}" for a in adds)
                   + f", failures {fails}, {dt:.0f}s")


# -- 4. SLAM --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def slam_runs():
    cfg = config_from_dict({"mode": "slam", **NO_FIGS})
    t = time.perf_counter()
    runs = [run_slam(cfg, s) for s in SEEDS]
    return cfg, runs, time.perf_counter() - t


def test_criterion_4_slam(verdict, slam_runs):
    cfg, runs, dt = slam_runs
    fs = [r.recon.fscore for r in runs]
    drift = [r.mean_adds for r in runs]
    ok = min(fs) >= 0.8 and max(drift) <= 0.006 and dt < 1200
    verdict(4, ok, "F@5mm " + " ".join(f"{f:.3f}" for f in fs) + ", drift mm "
                   + " ".join(f"{1e3 * d:.2f}" for d in drift) + f", {dt:.0f}s")


# -- 5. occlusion ---------------------------------------------------------------------

def test_criterion_5_occlusion(verdict):
    cfg = config_from_dict({"mode": "ablate-occlusion", **NO_FIGS})
    t = time.perf_counter()
    wins, improvements = 0, []
    for s in SEEDS:
        header, rows = run_ablate_occlusion(cfg, s).tables["occlusion"]
        tab = np.array(rows, dtype=float)
        score, v, vt = (tab[:, header.index(k)] for k in
                        ("occlusion_score", "adds_vision", "adds_visuotactile"))
        # score 0 is the most occluded viewpoint
        q = np.argsort(score, kind="stable")[: max(1, len(score) // 4)]
        wins += int(vt[q].mean() < v[q].mean())
        improvements.extend(tab[:, header.index("improvement_pct")])
    dt = time.perf_counter() - t
    mean_imp = float(np.mean(improvements))
    ok = wins >= 4 and mean_imp > 0 and dt < 1800
    verdict(5, ok, f"occluded quartile won in {wins}/5 seeds, mean improvement {mean_imp:.1f}%, "
                   f"{dt:.0f}s")


# -- 6. noise -------------------------------------------------------------------------

def test_criterion_6_noise(verdict):
    cfg = config_from_dict({"mode": "ablate-noise", **NO_FIGS,
                            "ablation": {"noise_levels": [0, 10, 30, 50]}})
    t = time.perf_counter()
    D, err_v, at_50 = [], [], []
    for s in SEEDS:
        header, rows = run_ablate_noise(cfg, s, tactile_only=False).tables["noise"]
        tab = np.array(rows, dtype=float)
        D.extend(tab[:, 0])
        err_v.extend(tab[:, header.index("adds_vision")])
        last = tab[tab[:, 0] == 50][0]
        at_50.append(last[header.index("adds_visuotactile")] <= last[header.index("adds_vision")])
    dt = time.perf_counter() - t
    rho = spearmanr(D, err_v).statistic
    ok = rho > 0.8 and all(at_50) and dt < 1200
    verdict(6, ok, f"Spearman rho {rho:.3f} (vision ADD-S vs D, pooled over seeds), "
                   f"visuo-tactile <= vision at D=50 in {sum(at_50)}/5, {dt:.0f}s")


# -- 7. metric oracles ----------------------------------------------------------------

def test_criterion_7_metric_oracles(verdict):
    err_adds, err_f = 0.0, 0.0
    for s in range(20):
        rng = np.random.default_rng(s)
        mesh = _random_mesh(rng)
        gt = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi),
                                  rng.normal(size=3) * 0.01)
        est = gt @ Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.3),
                                        rng.normal(size=3) * 0.005)
        m = MetricsConfig(samples=1000, seed=s)
        pts = mesh.sample(m.samples, seed=m.seed)
        a, b = est.apply(pts), gt.apply(pts)
        brute = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(axis=1).mean()
        err_adds = max(err_adds, abs(add_s(mesh, est, gt, m) - brute))

        recon = _hull(mesh.vertices + rng.normal(scale=0.003, size=mesh.vertices.shape))
        tau, n = 0.005, 1500
        f = fscore(mesh, recon, tau, samples=n, seed=s)[2]
        pb = (_point_triangle_brute(recon.sample(n, seed=s), mesh.triangles) < tau).mean()
        rb = (_point_triangle_brute(mesh.sample(n, seed=s + 1), recon.triangles) < tau).mean()
        fb = 2 * pb * rb / (pb + rb) if pb + rb > 0 else 0.0
        err_f = max(err_f, abs(f - fb))

    rng = np.random.default_rng(7)
    cube = CUBE.to_mesh()
    gt = Pose.from_axis_angle(rng.normal(size=3), 1.0, [0.01, 0, 0])
    est = gt @ Pose.from_axis_angle([1, 2, 3], 0.1, [0.002, 0, 0])
    base = add_s(cube, est, gt)
    sym = max(abs(add_s(cube, est @ Pose.from_rt(r.as_matrix(), np.zeros(3)), gt) - base)
              for r in _CUBE_SYMS)
    ok = err_adds < 2e-4 and err_f < 0.01 and sym < 2e-4
    verdict(7, ok, f"ADD-S max err {1e3 * err_adds:.4f} mm, F max err {err_f:.4f}, "
                   f"cube symmetry spread {1e3 * sym:.4f} mm")


# -- 8. determinism -------------------------------------------------------------------

def test_criterion_8_determinism(verdict, tmp_path, tracking_runs, slam_runs):
    same = []
    for name, (cfg, runs, _), fn in (("track-known", tracking_runs, run_tracking),
                                     ("slam", slam_runs, run_slam)):
        again = fn(cfg, 0)
        same.append((name, _csvs(runs[0], tmp_path / f"{name}_a")
                     == _csvs(again, tmp_path / f"{name}_b")))
    noise = config_from_dict({"mode": "ablate-noise", **NO_FIGS,
                              "ablation": {"noise_levels": [0, 50], "duration": 5}})
    same.append(("ablate-noise", _csvs(run_ablate_noise(noise, 0), tmp_path / "n_a")
                 == _csvs(run_ablate_noise(noise, 0), tmp_path / "n_b")))
    verdict(8, all(ok for _, ok in same),
            "byte-identical CSVs: " + ", ".join(f"{n} {'yes' if ok else 'no'}" for n, ok in same))
