import numpy as np
import pytest

from vtslam.geometry import Box, Capsule, Pose, Sphere, gt_sdf
from vtslam.geometry.se3 import look_at
from vtslam.sensors import (AXIS_ROTATION, WOBBLE_ROTATION, EmptySet, InvalidParams, NoiseConfig,
                            OccluderSet, PlaybackError, SensorFrame, TrajectoryParams,
                            camera_sphere, corrupt_depth, load_sequence, occlusion_score,
                            record_sequence, render_frame, scripted_trajectory, simulate_sequence,
                            tactile_sensor, vision_sensor)
from vtslam.sensors.models import TACTILE_CAMERA_DEPTH
from vtslam.sensors.models import SensorModel

CAM = vision_sensor(width=64, height=48, fov_deg=40)
BOX = Box(np.array([0.06] * 3))


def test_sensor_model_validation():
    with pytest.raises(ValueError):
        SensorModel("x", "lidar", 1, 1, 0, 0, 4, 4, 0, 1)
    with pytest.raises(ValueError):
        SensorModel("x", "vision", 1, 1, 0, 0, 4, 4, 1.0, 0.5)
    t = tactile_sensor("t")
    assert (t.width, t.height) == (240, 320) and t.far <= 0.03


def test_center_pixel_depth_on_sphere():
    cam = vision_sensor(width=65, height=49)
    r = 0.03
    f = render_frame(Sphere(r), Pose.identity(), None, cam, look_at([0, 0, 0.2], [0, 0, 0]))
    assert f.depth[24, 32] == pytest.approx(0.2 - r, abs=1e-5)


def test_object_behind_occluder_is_masked_out():
    pose = look_at([0, 0, 0.3], [0, 0, 0])
    wall = OccluderSet([Capsule([-1, 0, 0.12], [1, 0, 0.12], 0.05)])
    f = render_frame(Sphere(0.03), Pose.identity(), wall, CAM, pose)
    assert not f.mask.any()
    assert np.isfinite(f.background).any()


def test_tactile_on_flat_face_matches_plane_oracle():
    t = tactile_sensor("t", 48, 64)
    # camera 21 mm off the +x face, looking in -x
    pos = np.array([0.051, 0.0, 0.0])
    pose = look_at(pos, pos - [1, 0, 0])
    f = render_frame(BOX, Pose.identity(), None, t, pose)
    rays = t.pixel_rays()
    # oracle: z-depth to the plane x = 0.03 is exactly 21 mm wherever the hit lies on the face
    hit = pose.apply(rays * 0.021)
    on_face = np.all(np.abs(hit[..., 1:]) <= 0.03, axis=-1)
    assert on_face.all()
    assert np.allclose(f.depth[on_face], 0.021, atol=1e-6)
    assert np.all(f.depth[f.valid()] <= t.far)


def test_masks_are_exact():
    pose = look_at([-0.15, -0.2, 0.12], [0, 0, 0])
    obj = Pose.from_axis_angle([1, 1, 0], 0.4, [0.005, 0, 0])
    f = render_frame(BOX, obj, None, CAM, pose)
    pts = f.backproject()
    assert len(pts) > 100
    assert np.abs(BOX.sdf(obj.inverse().apply(pts))).max() < 1e-4
    assert np.all(np.isnan(f.depth[~f.mask]))


def _frame():
    pose = look_at([-0.15, -0.2, 0.12], [0, 0, 0])
    return render_frame(BOX, Pose.identity(), None, CAM, pose)


def test_corrupt_identity_at_zero():
    f = _frame()
    g = corrupt_depth(f, NoiseConfig(0.0, seed=3))
    assert np.array_equal(f.depth, g.depth, equal_nan=True) and g.depth is not f.depth


def test_corrupt_deterministic_and_preserves_validity():
    f = _frame()
    a = corrupt_depth(f, NoiseConfig(5.0, seed=1))
    b = corrupt_depth(f, NoiseConfig(5.0, seed=1))
    assert np.array_equal(a.depth, b.depth, equal_nan=True)
    assert np.array_equal(a.mask, f.mask)
    assert np.array_equal(np.isfinite(a.depth), np.isfinite(f.depth))
    assert not np.array_equal(a.depth, corrupt_depth(f, NoiseConfig(5.0, seed=2)).depth, equal_nan=True)


def test_corruption_grows_with_D():
    f = _frame()
    v = f.valid()
    for seed in range(10):
        e10 = np.abs(corrupt_depth(f, NoiseConfig(10, seed)).depth[v] - f.depth[v]).mean()
        e50 = np.abs(corrupt_depth(f, NoiseConfig(50, seed)).depth[v] - f.depth[v]).mean()
        assert e50 > e10


def test_occlusion_score_cases():
    def frames(sid, areas):
        out = []
        for a in areas:
            m = np.zeros((CAM.height, CAM.width), dtype=bool)
            m.flat[:a] = True
            cam = SensorModel(**{**CAM.to_dict(), "id": sid})
            out.append(SensorFrame(cam, 0.0, Pose.identity(), np.where(m, 0.2, np.nan), m))
        return out

    assert occlusion_score(frames("a", [5, 9])) == {"a": 1.0}
    s = occlusion_score(frames("a", [100]) + frames("b", [300]) + frames("c", [500]))
    assert s == {"a": 0.0, "b": 0.5, "c": 1.0}
    assert occlusion_score(frames("a", [0, 0]) + frames("b", [40]))["a"] == 0.0
    fs = frames("a", [100, 200, 300]) + frames("b", [50])
    assert occlusion_score(fs) == occlusion_score(fs[::-1])
    with pytest.raises(EmptySet):
        occlusion_score([])


def test_camera_sphere():
    one = camera_sphere(1, 0.5, [0.1, 0, 0])
    assert np.allclose(one[0].t, [0.1, 0, 0.5])
    assert np.allclose(one[0].rotate(np.array([0, 0, 1.0])), [0, 0, -1])
    poses = camera_sphere(200, 0.5)
    d = np.array([np.linalg.norm(p.t) for p in poses])
    assert np.abs(d - 0.5).max() < 1e-9
    for n in (2, 3, 12, 50, 200):
        pts = np.array([p.t for p in camera_sphere(n, 0.5)]) / 0.5
        cos = np.clip(pts @ pts.T, -1, 1)
        np.fill_diagonal(cos, -1)
        assert np.arccos(cos.max()) > 0
    for p in poses:
        fwd = p.rotate(np.array([0, 0, 1.0]))
        assert np.allclose(fwd, -p.t / 0.5, atol=1e-9)


def test_trajectory_quarter_turn_and_params():
    steps = scripted_trajectory(AXIS_ROTATION, 1.0, 1.0, TrajectoryParams(angular_speed=np.pi / 2))
    assert len(steps) == 2 and steps[1].stamp == 1.0
    yaw = steps[1].object_pose.R
    assert np.allclose(yaw @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    with pytest.raises(InvalidParams):
        scripted_trajectory(AXIS_ROTATION, 0, 1.0)
    with pytest.raises(InvalidParams):
        scripted_trajectory(WOBBLE_ROTATION, 1, 1.0, TrajectoryParams(translation_amplitude=0.01))
    with pytest.raises(InvalidParams):
        scripted_trajectory(WOBBLE_ROTATION, 1, 1.0, TrajectoryParams(tilt=0.5))


def test_static_object_constant_tactile_poses():
    steps = scripted_trajectory(AXIS_ROTATION, 3, 1.0, TrajectoryParams(angular_speed=0.0), shape=BOX)
    for s in steps[1:]:
        for a, b in zip(s.tactile_poses, steps[0].tactile_poses):
            assert np.allclose(a.matrix(), b.matrix())


def test_sphere_contact_consistency():
    s = Sphere(0.03)
    steps = scripted_trajectory(WOBBLE_ROTATION, 10, 1.0,
                                TrajectoryParams(translation_amplitude=0.005, tilt=0.17, seed=4), shape=s)
    n = 0
    for st in steps:
        for tp in st.tactile_poses:
            assert tp is not None
            # gel center: the camera moved forward by its depth behind the gel
            gel = tp.t + TACTILE_CAMERA_DEPTH * tp.rotate(np.array([0, 0, 1.0]))
            assert abs(gt_sdf(s, st.object_pose.inverse().apply(gel[None])[0])) < 0.002
            n += 1
    assert n == 4 * len(steps)


def test_wobble_within_limits():
    p = TrajectoryParams(translation_amplitude=0.005, tilt=np.radians(10), seed=2)
    steps = scripted_trajectory(WOBBLE_ROTATION, 20, 1.0, p)
    assert max(np.linalg.norm(s.object_pose.t) for s in steps) <= 0.005 + 1e-12


def test_record_playback_round_trip(tmp_path):
    traj = scripted_trajectory(WOBBLE_ROTATION, 2, 1.0, TrajectoryParams(0.3, tilt=0.1), shape=BOX)
    cam = look_at([-0.15, -0.2, 0.12], [0, 0, 0])
    seq = simulate_sequence(BOX, traj, [(CAM, cam)], tactile_sensor("t", 24, 32), NoiseConfig(5, 1))
    record_sequence(seq, tmp_path / "seq")
    back = load_sequence(tmp_path / "seq")
    assert len(back) == len(seq)
    for a, b in zip(seq.steps, back.steps):
        assert (a.object_pose.inverse() @ b.object_pose).angle() < 1e-12
        assert [f.sensor.id for f in a.frames] == [f.sensor.id for f in b.frames]
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.depth, fb.depth, equal_nan=True)
            assert np.array_equal(fa.mask, fb.mask)
            assert fa.sensor == fb.sensor
            if fa.background is not None:
                assert np.array_equal(fa.background, fb.background, equal_nan=True)
    (tmp_path / "seq" / "depth_00002.png").write_bytes(b"garbage")
    with pytest.raises(PlaybackError) as e:
        load_sequence(tmp_path / "seq")
    assert e.value.frame_index == 2
