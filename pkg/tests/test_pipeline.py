import json

import numpy as np
import pytest
import yaml

from vtslam.evaluation import add_s
from vtslam.pipeline import (ConfigError, ExperimentConfig, config_from_dict, load_config,
                             run_ablate_noise, run_fit_static, run_slam, run_tracking, simulate,
                             write_run)
from vtslam.pipeline.cli import main
from vtslam.pipeline.runs import known_field
from vtslam.sensors import PlaybackError, load_sequence, record_sequence
from vtslam.sensors.models import VISION
from vtslam.tracking import TRAJECTORY_HEADER

SHORT = {"duration": 6, "report": {"figures": False}}


def _cfg(**over):
    d = {**SHORT, "mode": "track-known"}
    for k, v in over.items():
        d[k] = v
    return config_from_dict(d)


@pytest.fixture(scope="module")
def cube_field():
    return known_field(_cfg())


def _col(res, name):
    k = TRAJECTORY_HEADER.index(name)
    return np.array([r.row()[k] for r in res.trajectory], dtype=float)


# -- config ------------------------------------------------------------------------

def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.duration == 30 and cfg.playback_rate == 1 and cfg.seeds == [0]
    assert cfg.tracker.window == 3 and cfg.tracker.rays == 64 and cfg.tracker.lm_iters == 20
    assert (cfg.weights.w_sdf, cfg.weights.w_reg, cfg.weights.w_icp) == (0.01, 0.01, 1.0)


@pytest.mark.parametrize("bad", [
    {"mode": "dance"},
    {"duration": -1},
    {"seeds": []},
    {"rig": {"vision": False, "tactile": False}},
    {"tracker": {"winow": 3}},
    {"object": {"kind": "teapot"}},
    {"rig": "yes"},
])
def test_config_validation_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_config_yaml_round_trip(tmp_path):
    cfg = config_from_dict({"mode": "slam", "seeds": [3, 4], "trajectory": {"angular_speed_deg": 90},
                            "object": {"kind": "sphere", "radius": 0.03}})
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dump())
    back = load_config(p)
    assert back == cfg
    assert yaml.safe_load(p.read_text())["trajectory"]["angular_speed_deg"] == 90


# -- runs ---------------------------------------------------------------------------

def test_tracking_run_deterministic_bytes(tmp_path, cube_field):
    cfg = _cfg()
    outs = []
    for k in range(2):
        res = run_tracking(cfg, 0, field=cube_field)
        d = write_run(res, tmp_path / f"r{k}", figures=False)
        outs.append({p.name: p.read_bytes() for p in d.glob("*.csv")})
    assert outs[0].keys() == {"trajectory.csv", "adds.csv"}
    assert outs[0] == outs[1]


def test_slam_run_deterministic_bytes(tmp_path):
    cfg = config_from_dict({**SHORT, "duration": 3, "mapper": {"init_iterations": 20,
                                                                 "rounds_per_frame": 2},
                            "report": {"figures": False, "mesh_every": 2, "mesh_resolution": 40,
                                       "checkpoint_resolution": 32}})
    outs = []
    for k in range(2):
        res = run_slam(cfg, 1)
        d = write_run(res, tmp_path / f"r{k}", figures=False)
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix != ".json"})
    assert {"trajectory.csv", "adds.csv", "recon.csv", "diagnostics.csv", "mesh_final.ply",
            "field.bin"} <= outs[0].keys()
    assert outs[0] == outs[1]


def test_stage_timings_sum_to_total(cube_field):
    res = run_tracking(_cfg(), 0, field=cube_field)
    t = dict(res.timings)
    total = t.pop("total")
    assert abs(sum(t.values()) - total) <= 0.05 * total


def test_disabled_sensor_has_no_factors(cube_field):
    no_touch = run_tracking(_cfg(rig={"tactile": False}), 0, field=cube_field)
    assert _col(no_touch, "n_sdf_tactile").sum() == 0 and _col(no_touch, "n_icp_tactile").sum() == 0
    assert _col(no_touch, "n_sdf_vision").min() > 0
    no_vision = run_tracking(_cfg(rig={"vision": False}), 0, field=cube_field)
    assert _col(no_vision, "n_sdf_vision").sum() == 0 and _col(no_vision, "n_icp_vision").sum() == 0
    assert _col(no_vision, "n_sdf_tactile").min() > 0


def test_static_object_tracks_below_half_mm(cube_field):
    cfg = _cfg(duration=10, trajectory={"angular_speed_deg": 0, "translation_amplitude": 0,
                                        "tilt_deg": 0})
    seq = simulate(cfg, 0)
    res = run_tracking(cfg, 0, seq, cube_field)
    mesh = cfg.shape().to_mesh()
    errs = [add_s(mesh, r.pose, st.object_pose) for r, st in zip(res.trajectory, seq.steps)]
    assert max(errs) < 5e-4


def test_noisy_tracking_regression(cube_field):
    cfg = _cfg(duration=15, noise={"factor_D": 5})
    res = run_tracking(cfg, 0, field=cube_field)
    assert res.lost_steps == 0 and res.mean_adds <= 0.006


def test_fully_occluded_camera(cube_field):
    cfg = _cfg()
    seq = simulate(cfg, 0)
    for st in seq.steps:
        st.frames = [f.copy(mask=np.zeros_like(f.mask), depth=np.full_like(f.depth, np.nan))
                     if f.sensor.kind == VISION else f for f in st.frames]
    vision = run_tracking(cfg, 0, seq, cube_field, tactile=False)
    both = run_tracking(cfg, 0, seq, cube_field)
    assert vision.lost_steps == len(seq)
    assert both.lost_steps == 0 and both.mean_adds < 0.003


def test_tactile_only_is_flat_in_noise():
    cfg = config_from_dict({"mode": "ablate-noise", "duration": 6,
                            "ablation": {"noise_levels": [0, 50], "duration": 6}})
    res = run_ablate_noise(cfg, 0)
    header, rows = res.tables["noise"]
    k = header.index("adds_tactile")
    assert rows[0][k] == rows[1][k]


def test_fit_static_records_field_and_mesh():
    cfg = config_from_dict({"mode": "fit-static", "object": {"kind": "sphere", "radius": 0.03},
                            "mapper": {"static_iterations": 30},
                            "report": {"figures": False, "mesh_resolution": 40}})
    res = run_fit_static(cfg, 0)
    assert res.field is not None and len(res.trajectory) == 1
    assert res.mode == "fit-static"


# -- record / playback ------------------------------------------------------------------

def test_playback_reproduces_live_run(tmp_path, cube_field):
    cfg = _cfg()
    seq = simulate(cfg, 2)
    record_sequence(seq, tmp_path / "seq")
    back = load_sequence(tmp_path / "seq")
    for a, b in zip(seq.steps, back.steps):
        assert [f.content_hash() for f in a.frames] == [f.content_hash() for f in b.frames]
    live = run_tracking(cfg, 2, seq, cube_field)
    played = run_tracking(cfg, 2, back, cube_field)
    # compare as text so NaN entries match
    assert [repr(r.row()) for r in live.trajectory] == [repr(r.row()) for r in played.trajectory]


def test_playback_rejects_non_monotonic_stamps(tmp_path):
    seq = simulate(_cfg(duration=2), 0)
    d = record_sequence(seq, tmp_path / "seq")
    m = json.loads((d / "manifest.json").read_text())
    m["frames"][-1]["stamp"] = -1.0
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(PlaybackError) as e:
        load_sequence(d)
    assert e.value.frame_index == m["frames"][-1]["index"]


def test_playback_truncated_file(tmp_path):
    seq = simulate(_cfg(duration=2), 0)
    d = record_sequence(seq, tmp_path / "seq")
    p = d / "mask_00001.png"
    p.write_bytes(p.read_bytes()[:20])
    with pytest.raises(PlaybackError) as e:
        load_sequence(d)
    assert e.value.frame_index == 1


# -- CLI ------------------------------------------------------------------------------

def test_cli_track_simulate_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["track", "--duration", "6", "--seeds", "0", "--out", str(out)]) == 0
    summary = capsys.readouterr().out
    assert summary.splitlines()[0].startswith("seed,mode,mean_adds")
    assert (out / "config.yaml").exists() and (out / "summary.yaml").exists()
    assert (out / "seed_0" / "adds.png").exists()

    sims = tmp_path / "sims"
    assert main(["simulate", "--duration", "6", "--seeds", "0", "--out", str(sims)]) == 0
    capsys.readouterr()
    assert main(["eval", "--sequence", str(sims / "seq_seed0"), "--trajectory",
                 str(out / "seed_0" / "trajectory.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "mean_adds,failed"
    assert float(lines[1].split(",")[0]) < 0.003


def test_cli_playback_and_mesh(tmp_path, capsys):
    sims = tmp_path / "sims"
    main(["simulate", "--duration", "3", "--seeds", "0", "--out", str(sims)])
    out = tmp_path / "slam"
    argv = ["slam", "--sequence", str(sims / "seq_seed0"), "--out", str(out), "--no-figures",
            "--duration", "3", "--set", "mapper.init_iterations=20",
            "--set", "mapper.rounds_per_frame=1", "--set", "report.mesh_resolution=40"]
    assert main(argv) == 0
    capsys.readouterr()
    assert main(["mesh", str(out / "seed_0" / "field.bin"), "--resolution", "40",
                 "--out", str(tmp_path / "m.ply")]) == 0
    assert (tmp_path / "m.ply").exists()


def test_cli_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("duration: 3\nreport: {figures: false}\n")
    out = tmp_path / "o"
    assert main(["track", "--duration", "9", "--config", str(cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    assert yaml.safe_load((out / "config.yaml").read_text())["duration"] == 3
    assert len((out / "seed_0" / "trajectory.csv").read_text().splitlines()) == 1 + 4


def test_cli_validation_failure_exit_code(tmp_path, capsys):
    assert main(["track", "--set", "tracker.window=oops", "--out", str(tmp_path)]) == 2
    assert main(["slam", "--set", "bogus.key=1", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err

