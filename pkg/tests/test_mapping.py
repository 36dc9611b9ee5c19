import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtslam.field import FieldConfig, NeuralField, cached_bake, init_params
from vtslam.field.model import normalize_points
from vtslam.geometry import Pose, Sphere
from vtslam.geometry.se3 import look_at
from vtslam.mapping import (FIRST, FORCED, INFO_GAIN, Keyframe, KeyframeBank, MapperConfig,
                            RaySampleBatch, SamplingConfig, ShapeMapper, distance_bound,
                            keyframe_decision, render_depth, sample_rays, select_replay,
                            shape_loss)
from vtslam.sensors import (HandRig, TrajectoryParams, render_frame, scripted_trajectory,
                            simulate_sequence, tactile_sensor, vision_sensor)

SMALL = FieldConfig(levels=4, table_size=2**12, base_resolution=4, growth_factor=2.0, mlp_width=16)
SPHERE = Sphere(0.03)
CAM = vision_sensor("camera", 64, 48)
CAM_POSE = look_at([-0.17, -0.2, 0.14], [0, 0, 0])


def _scene(stamp=0.0, tactile=True, fingers=False):
    traj = scripted_trajectory("axis-rotation", 1e-6, 1.0, TrajectoryParams(angular_speed=0.0),
                               shape=SPHERE, rig=HandRig(fingers_enabled=fingers))
    seq = simulate_sequence(SPHERE, traj, [(CAM, CAM_POSE)],
                            tactile_sensor("t", 12, 16) if tactile else None)
    frames = [f.copy() for f in seq.steps[0].frames]
    for f in frames:
        f.stamp = stamp
    return frames


def _constant_field(cfg, value):
    p = init_params(cfg, seed=0)
    p.theta[:] = 0.0
    p.biases[-1][:] = value
    return NeuralField(cfg, p)


@pytest.fixture(scope="module")
def frames():
    return _scene()


@pytest.fixture(scope="module")
def baked_sphere():
    cfg = FieldConfig()
    return NeuralField(cfg, cached_bake(cfg, SPHERE))


# -- keyframes ------------------------------------------------------------------

def test_first_keyframe_always_accepted(frames):
    d = keyframe_decision(KeyframeBank(), frames, NeuralField(SMALL), Pose.identity())
    assert d.accept and d.reason == FIRST


def test_poor_render_accepted_as_information_gain(frames):
    bank = KeyframeBank()
    bank.add(Keyframe(frames, Pose.identity()))
    later = [f.copy() for f in frames]
    for f in later:
        f.stamp = 0.1
    # a fresh field renders nothing inside the bound: depth errors of centimeters
    d = keyframe_decision(bank, later, NeuralField(SMALL), Pose.identity())
    assert d.accept and d.reason == INFO_GAIN and d.loss > bank.d_thresh


def test_good_render_rejected_then_forced(frames, baked_sphere):
    bank = KeyframeBank()
    bank.add(Keyframe(frames, Pose.identity()))
    soon = [f.copy() for f in frames]
    for f in soon:
        f.stamp = 0.1
    d = keyframe_decision(bank, soon, baked_sphere, Pose.identity())
    assert not d.accept and d.loss < bank.d_thresh
    late = [f.copy() for f in frames]
    for f in late:
        f.stamp = 0.25
    d = keyframe_decision(bank, late, baked_sphere, Pose.identity())
    assert d.accept and d.reason == FORCED


def test_render_depth_of_baked_sphere(frames, baked_sphere):
    f = frames[0]
    r, c = np.nonzero(f.valid())
    z = render_depth(baked_sphere, Pose.identity(), f, r, c)
    assert np.median(np.abs(z - f.depth[r, c])) < 1e-3


def test_bank_rejects_stale_keyframes(frames):
    bank = KeyframeBank()
    bank.add(Keyframe(frames, Pose.identity()))
    with pytest.raises(ValueError):
        bank.add(Keyframe(frames, Pose.identity()))
    with pytest.raises(ValueError):
        Keyframe([], Pose.identity())


def _bank(losses, frames):
    bank = KeyframeBank()
    for i, l in enumerate(losses):
        fs = [f.copy() for f in frames]
        for f in fs:
            f.stamp = float(i)
        bank.add(Keyframe(fs, Pose.identity(), avg_render_loss=l))
    return bank


def test_replay_small_banks(frames):
    rng = np.random.default_rng(0)
    b1 = _bank([0.0], frames)
    assert select_replay(b1, rng) == [b1[0]]
    b2 = _bank([0.0, 0.0], frames)
    assert select_replay(b2, rng) == [b2[0], b2[1]]


def test_replay_always_has_two_newest_and_favours_high_loss(frames):
    losses = [1e-3] * 10
    losses[3] = 0.1
    bank = _bank(losses, frames)
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(1000):
        sel = select_replay(bank, rng)
        assert sel[-2:] == [bank[8], bank[9]]
        assert len(sel) == bank.replay_size and len(set(map(id, sel))) == len(sel)
        hits += bank[3] in sel
    assert hits / 1000 > 0.95


# -- ray sampling -----------------------------------------------------------------

def test_distance_bound_examples():
    assert distance_bound(0.2, 0.2) == 0.0
    assert distance_bound(0.2, 0.197) == pytest.approx(0.003)
    assert distance_bound(0.2, 0.202) == pytest.approx(-0.002)


def _check_batch(b: RaySampleBatch):
    tr = ~b.free
    assert np.all(np.abs(b.dhat[tr]) <= b.truncation + 1e-12)
    assert np.all(b.dhat[b.free] > b.truncation)
    tac = b.ray_kind[b.ray] == "tactile"
    assert not (b.free & tac).any()
    assert not b.ray_is_free_pixel[b.ray_kind == "tactile"].any()
    _, inside = normalize_points(FieldConfig(), b.pts_obj)
    assert inside.all()


def test_tactile_only_replay_has_no_free_space(frames):
    tac = [f for f in frames if f.sensor.kind == "tactile"]
    b = sample_rays([Keyframe(tac, Pose.identity())], FieldConfig(), np.random.default_rng(0))
    assert len(b) > 0 and not b.free.any()
    _check_batch(b)


def test_sampling_invariants_and_geometry(frames):
    kf = Keyframe(frames, Pose.identity())
    b = sample_rays([kf], FieldConfig(), np.random.default_rng(0), per_sensor=40)
    _check_batch(b)
    assert b.free.any() and (~b.free).any()
    # vision surface pixels: truncation samples sit within d_tr of the true surface along the ray
    vis = (b.ray_kind[b.ray] == "vision") & ~b.free & ~b.ray_is_free_pixel[b.ray]
    assert np.all(np.abs(SPHERE.sdf(b.pts_obj[vis])) <= 0.005 + 1e-6)
    # free samples of a noiseless scene are outside the object
    assert np.all(SPHERE.sdf(b.pts_obj[b.free]) > 0)


def test_discarded_count_matches_brute_filter(frames):
    # tactile intervals do not depend on the bound, so both batches draw the same points
    tac = [f for f in frames if f.sensor.kind == "tactile"]
    kf = Keyframe(tac, Pose.identity())
    sc = SamplingConfig(n_surf=0)
    small = FieldConfig(bound_side=0.064)
    b = sample_rays([kf], small, np.random.default_rng(5), per_sensor=40, cfg=sc)
    ref = sample_rays([kf], FieldConfig(bound_side=1.0), np.random.default_rng(5), per_sensor=40,
                      cfg=sc)
    assert ref.discarded == 0 and len(ref) == ref.n_rays * sc.n_strat
    _, inside = normalize_points(small, ref.pts_obj)
    assert b.discarded == int((~inside).sum()) > 0
    assert np.array_equal(b.pts_obj, ref.pts_obj[inside])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), angle=st.floats(0, 3.0))
def test_sampling_invariants_hold_for_any_pose(frames, seed, angle):
    pose = Pose.from_axis_angle([0.3, -0.2, 1.0], angle, [0.004, 0, -0.002])
    b = sample_rays([Keyframe(frames, pose)], FieldConfig(), np.random.default_rng(seed))
    _check_batch(b)


# -- loss ---------------------------------------------------------------------------

def _batch(pts, dhat, free, rays=None):
    n = len(pts)
    rays = np.arange(n) if rays is None else np.asarray(rays)
    nr = rays.max() + 1
    return RaySampleBatch(np.asarray(pts, float), rays, np.zeros(n), np.asarray(dhat, float),
                          np.asarray(free), np.full(nr, "vision"), np.zeros(nr, int),
                          np.full(nr, "camera", dtype=object), np.zeros(nr, bool))


def test_loss_zero_for_free_space_at_truncation():
    f = _constant_field(SMALL, 0.005)
    b = _batch(np.zeros((4, 3)), [0.01, 0.02, 0.03, np.inf], [True] * 4)
    loss = shape_loss(f, b)
    assert loss.total == 0.0 and np.all(loss.grad == 0)


def test_single_truncation_sample_weighted_by_ten():
    f = _constant_field(SMALL, 0.004)
    loss = shape_loss(f, _batch(np.zeros((1, 3)), [0.001], [False]))
    assert loss.total == pytest.approx(10 * 0.003, rel=1e-12)
    assert loss.l_tr == pytest.approx(0.003, rel=1e-12) and loss.l_f == 0.0


def test_loss_averages_per_ray_then_over_rays():
    f = _constant_field(SMALL, 0.0)
    # ray 0: two truncation samples (errors 1 and 3 mm); ray 1: one free sample (error 5 mm)
    b = _batch(np.zeros((3, 3)), [0.001, 0.003, 0.02], [False, False, True], rays=[0, 0, 1])
    loss = shape_loss(f, b)
    assert loss.l_tr == pytest.approx(0.002 / 2)
    assert loss.l_f == pytest.approx(0.005 / 2)
    assert loss.total == pytest.approx(loss.l_f + 10 * loss.l_tr)


def test_loss_gradient_matches_finite_differences(frames):
    field = NeuralField(SMALL, seed=2)
    b = sample_rays([Keyframe(frames, Pose.identity())], SMALL, np.random.default_rng(3))
    g = shape_loss(field, b).grad
    rng = np.random.default_rng(0)
    # L1 kinks: use small steps in parameters with the largest gradient
    idx = np.argsort(-np.abs(g))[:10]
    for i in idx[rng.permutation(10)[:5]]:
        h = 1e-7
        th = field.params.theta
        old = th[i]
        th[i] = old + h
        lp = shape_loss(field, b, with_grad=False).total
        th[i] = old - h
        lm = shape_loss(field, b, with_grad=False).total
        th[i] = old
        assert (lp - lm) / (2 * h) == pytest.approx(g[i], rel=1e-3)


def test_loss_descends_on_fixed_batch(frames):
    field = NeuralField(FieldConfig(), seed=0)
    m = ShapeMapper(field, cfg=MapperConfig(init_iterations=0))
    b = sample_rays([Keyframe(frames, Pose.identity())], field.cfg, np.random.default_rng(0))
    from vtslam.field import adam_step
    first = shape_loss(field, b).total
    for _ in range(100):
        adam_step(field.params, m.adam, shape_loss(field, b).grad)
    assert shape_loss(field, b, with_grad=False).total < 0.5 * first


# -- shape iterations --------------------------------------------------------------

def _mapper(frames, seed=0):
    field = NeuralField(FieldConfig(), seed=0)
    m = ShapeMapper(field, cfg=MapperConfig(init_iterations=3, seed=seed))
    m.bank.add(Keyframe(frames, Pose.identity()))
    return m


def test_shape_iteration_deterministic_and_refreshes_loss(frames):
    a, b = _mapper(frames), _mapper(frames)
    for m in (a, b):
        m.shape_iteration()
        m.shape_iteration()
    assert np.array_equal(a.field.params.theta, b.field.params.theta)
    assert a.diagnostics_csv() == b.diagnostics_csv()
    # warm-up plus two calls
    assert a.iteration == 5 and a.bank[0].uses == 5
    assert a.bank[0].avg_render_loss > 0
    c = _mapper(frames, seed=1)
    c.shape_iteration()
    c.shape_iteration()
    assert not np.array_equal(a.field.params.theta, c.field.params.theta)


def test_empty_bank_rejected():
    with pytest.raises(ValueError):
        ShapeMapper(NeuralField(SMALL)).shape_iteration()


@pytest.fixture(scope="module")
def static_sphere_medians():
    frames = _scene(fingers=False)
    m = ShapeMapper(NeuralField(FieldConfig(), seed=0), cfg=MapperConfig(init_iterations=0))
    m.bank.add(Keyframe(frames, Pose.identity()))
    totals = [m.shape_iteration()["total"] for _ in range(500)]
    return np.median(np.reshape(totals, (50, 10)), axis=1)


def test_loss_trend_on_static_sphere(static_sphere_medians):
    med = static_sphere_medians
    assert med[-1] < 0.2 * med[0]
    assert np.all(np.diff(med[:10]) < 0)
    assert np.mean(np.diff(med) < 0) > 0.6


@pytest.mark.xfail(reason="window medians plateau into batch noise after ~10 windows", strict=False)
def test_loss_window_medians_strictly_decrease(static_sphere_medians):
    assert np.all(np.diff(static_sphere_medians) < 0)
