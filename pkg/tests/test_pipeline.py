import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexcotrain.capture import MarkerCube, default_camera, synth_episode
from dexcotrain.episode import Embodiment, HandStream, RawEpisode, merge_hands
from dexcotrain.errors import DimensionMismatch, EmbodimentMismatch, EmptyEpisode, TooFewSamples
from dexcotrain.pipeline import (
    FilterRules,
    ProcessConfig,
    clip_percentiles,
    compute_relative_actions,
    fill_gaps,
    filter_episode,
    gaussian_kernel,
    gaussian_smooth,
    integrate_actions,
    normalize_apply,
    normalize_fit,
    denormalize,
    process_episode,
    track_episode,
    track_ratio,
)
from dexcotrain.pose import (
    Pose,
    Rotation,
    compose,
    geodesic_distance,
    quat_canonical,
    random_pose,
    relative,
)
from dexcotrain.retarget import reference_hand


def make_raw(positions, tracked=None, quats=None, embodiment="human"):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    tracked = np.ones(n, dtype=bool) if tracked is None else np.asarray(tracked, dtype=bool)
    if quats is None:
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    wt = np.where(tracked[:, None], positions, np.nan)
    wq = np.where(tracked[:, None], quats, np.nan)
    hand = HandStream(
        wrist_t=wt, wrist_q=wq, tracked=tracked, fingertips=np.zeros((n, 5, 3)),
        embeddings=np.zeros((n, 2, 4), dtype=np.float32),
    )
    return RawEpisode(embodiment=embodiment, rate=30.0, timestamps=np.arange(n) / 30.0, hands=[hand])


def slow_line(n, speed=0.001):
    return np.stack([np.arange(n) * speed, np.zeros(n), np.full(n, 0.5)], axis=1)


# ---------------------------------------------------------------------------
# track ratio and filtering
# ---------------------------------------------------------------------------

def test_track_ratio_examples():
    assert track_ratio(make_raw(slow_line(4))) == 1.0
    assert track_ratio(make_raw(slow_line(4), [1, 1, 0, 1])) == 0.75
    left = make_raw(slow_line(4))
    right = make_raw(slow_line(4), [1, 0, 1, 0])
    assert track_ratio(merge_hands(left, right)) == 0.5
    with pytest.raises(EmptyEpisode):
        track_ratio(make_raw(np.zeros((0, 3))))


@pytest.mark.parametrize("n_tracked, kept", [(74, False), (75, True), (76, True)])
def test_track_ratio_rule_boundary(n_tracked, kept):
    # untracked frames spread through the episode so no other rule fires
    tracked = np.zeros(100, dtype=bool)
    tracked[np.linspace(0, 99, n_tracked).round().astype(int)] = True
    assert tracked.sum() == n_tracked
    report = filter_episode(make_raw(slow_line(100), tracked))
    assert report.track_ratio == n_tracked / 100
    assert report.kept is kept
    assert report.reasons == ([] if kept else ["track_ratio"])
    assert report.rules["min_frames"] and report.rules["jump"]


def test_filter_min_frames():
    report = filter_episode(make_raw(slow_line(29)))
    assert report.reasons == ["min_frames"]
    assert filter_episode(make_raw(slow_line(30))).kept


def _reach_traj(n):
    return [
        Pose(np.array([0.05 * math.sin(i / 20), 0.03 * math.cos(i / 15), 0.55 + 0.05 * math.sin(i / 30)]),
             Rotation.from_rotvec([0.1 * math.sin(i / 25), 0.1 * math.cos(i / 40), 0.0]))
        for i in range(n)
    ]


def test_filter_clean_synthetic_and_teleport():
    cube, cam = MarkerCube.standard(), default_camera()
    traj = _reach_traj(60)
    clean = track_episode(synth_episode(traj, cube, cam, noise=0.3, seed=2), cube, cam)
    report = filter_episode(clean)
    assert report.kept and report.reasons == []

    traj[30] = Pose(traj[30].t + np.array([0.0, 0.0, 0.5]), traj[30].r)
    bad = track_episode(synth_episode(traj, cube, cam, noise=0.3, seed=2), cube, cam)
    assert bad.hands[0].tracked[30]
    report = filter_episode(bad)
    assert not report.kept and report.reasons == ["jump"]


def test_filter_is_pure():
    ep = make_raw(slow_line(50), np.arange(50) % 3 != 0)
    a, b = filter_episode(ep), filter_episode(ep)
    assert a.to_dict() == b.to_dict()


def test_filter_records_every_failure():
    tracked = np.zeros(20, dtype=bool)
    tracked[:10] = True
    pos = slow_line(20)
    pos[5:] += [0.3, 0, 0]
    report = filter_episode(make_raw(pos, tracked), FilterRules())
    assert report.reasons == ["track_ratio", "min_frames", "jump"]


# ---------------------------------------------------------------------------
# gap filling
# ---------------------------------------------------------------------------

def test_fill_two_frame_gap_linear():
    # frames 1 and 2 are missing between t(0,0,0) and t(0.3,0,0)
    pos = np.zeros((6, 3))
    pos[3:] = [0.3, 0, 0]
    ep = make_raw(pos, [1, 0, 0, 1, 1, 1])
    (out,) = fill_gaps(ep, max_gap=5)
    np.testing.assert_allclose(out.hands[0].wrist_t[1], [0.1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(out.hands[0].wrist_t[2], [0.2, 0, 0], atol=1e-15)
    assert out.hands[0].tracked.all()


def test_fill_gap_rotation_slerp():
    q = np.tile([1.0, 0, 0, 0], (3, 1))
    q[2] = Rotation.about_z(math.pi / 2).q
    ep = make_raw(np.zeros((3, 3)), [1, 0, 1], quats=q)
    (out,) = fill_gaps(ep)
    assert geodesic_distance(Rotation(out.hands[0].wrist_q[1]), Rotation.about_z(math.pi / 4)) < 1e-12


def test_fill_long_gap_splits():
    tracked = np.ones(40, dtype=bool)
    tracked[15:25] = False
    pieces = fill_gaps(make_raw(slow_line(40), tracked), max_gap=5)
    assert [p.n_frames for p in pieces] == [15, 15]
    assert [p.episode_id for p in pieces] == ["ep_s0", "ep_s1"]
    assert all(p.hands[0].tracked.all() for p in pieces)


def test_fill_gap_boundary_and_trim():
    tracked = np.ones(30, dtype=bool)
    tracked[10:15] = False  # exactly max_gap: filled
    tracked[:2] = False  # leading gap: trimmed
    tracked[-3:] = False  # trailing gap: trimmed
    (piece,) = fill_gaps(make_raw(slow_line(30), tracked), max_gap=5)
    assert piece.n_frames == 25
    np.testing.assert_allclose(piece.hands[0].wrist_t, slow_line(30)[2:27], atol=1e-15)


def test_fill_gapless_unchanged():
    ep = make_raw(slow_line(10))
    (out,) = fill_gaps(ep)
    assert out is ep


# ---------------------------------------------------------------------------
# percentile clipping
# ---------------------------------------------------------------------------

def oracle_percentile(values, pct):
    s = sorted(values)
    rank = pct / 100 * (len(s) - 1)
    k = math.floor(rank)
    if k + 1 >= len(s):
        return s[-1]
    return s[k] + (rank - k) * (s[k + 1] - s[k])


def test_clip_series_0_to_100():
    out, bounds = clip_percentiles(np.arange(101.0))
    assert bounds.tolist() == [[2.0, 97.0]]
    assert out[100] == 97.0 and out[0] == 2.0
    np.testing.assert_array_equal(out[2:98], np.arange(2.0, 98.0))


def test_clip_constant_series():
    out, bounds = clip_percentiles(np.full(20, 3.5))
    assert bounds.tolist() == [[3.5, 3.5]]
    np.testing.assert_array_equal(out, 3.5)


def test_clip_matches_sort_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 300))
        x = rng.standard_cauchy(size=(n, 3))
        out, bounds = clip_percentiles(x)
        for d in range(3):
            col = x[:, d].tolist()
            lo, hi = oracle_percentile(col, 2), oracle_percentile(col, 97)
            assert bounds[d].tolist() == [lo, hi]
            assert out[:, d].tolist() == [min(max(v, lo), hi) for v in col]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200))
def test_clip_property(values):
    out, bounds = clip_percentiles(np.array(values))
    lo, hi = bounds[0]
    assert np.all(out >= lo) and np.all(out <= hi)
    interior = [(i, v) for i, v in enumerate(values) if lo <= v <= hi]
    assert all(out[i] == v for i, v in interior)


def test_clip_too_few():
    with pytest.raises(TooFewSamples):
        clip_percentiles(np.array([1.0]))


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def dense_oracle(x, sigma):
    radius = int(4 * sigma + 0.5)
    k = np.array([math.exp(-0.5 * (i / sigma) ** 2) for i in range(-radius, radius + 1)])
    k /= k.sum()
    padded = np.pad(x, radius, mode="symmetric")
    return np.array([np.dot(k, padded[i:i + 2 * radius + 1]) for i in range(len(x))])


def test_kernel_radius_and_mass():
    assert len(gaussian_kernel(2.0)) == 17
    assert abs(gaussian_kernel(2.0).sum() - 1.0) < 1e-15


def test_smooth_impulse_matches_dense_convolution():
    pos = np.zeros((51, 3))
    pos[25, 0] = 1.0
    quats = np.tile([1.0, 0, 0, 0], (51, 1))
    out, _ = gaussian_smooth(pos, quats, sigma=2.0)
    np.testing.assert_allclose(out[:, 0], dense_oracle(pos[:, 0], 2.0), atol=1e-9)
    assert np.all(out[:, 1:] == 0)


def test_smooth_random_matches_dense_convolution_at_boundaries():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(40, 3))
    quats = np.tile([1.0, 0, 0, 0], (40, 1))
    for sigma in (0.7, 2.0, 5.0):
        out, _ = gaussian_smooth(pos, quats, sigma)
        for d in range(3):
            np.testing.assert_allclose(out[:, d], dense_oracle(pos[:, d], sigma), atol=1e-9)


def test_smooth_matches_scipy_reflect():
    ndimage = pytest.importorskip("scipy.ndimage")
    rng = np.random.default_rng(2)
    pos = rng.normal(size=(60, 3))
    out, _ = gaussian_smooth(pos, np.tile([1.0, 0, 0, 0], (60, 1)), 2.0)
    ref = ndimage.gaussian_filter1d(pos, 2.0, axis=0, mode="reflect", truncate=4.0)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_smooth_constant_is_unchanged():
    q = Rotation.from_rotvec([0.3, -0.2, 0.1]).q
    pos = np.tile([0.1, -0.2, 0.5], (30, 1))
    out_p, out_q = gaussian_smooth(pos, np.tile(q, (30, 1)), 2.0)
    np.testing.assert_allclose(out_p, pos, atol=1e-12)
    np.testing.assert_allclose(out_q, np.tile(q, (30, 1)), atol=1e-12)


def test_smooth_tiny_sigma_identity():
    rng = np.random.default_rng(3)
    pos = rng.normal(size=(25, 3))
    quats = np.array([Rotation.from_rotvec(v).q for v in rng.normal(size=(25, 3))])
    out_p, out_q = gaussian_smooth(pos, quats, 1e-6)
    np.testing.assert_allclose(out_p, pos, atol=1e-9)
    np.testing.assert_allclose(out_q, quat_canonical(quats), atol=1e-9)


def test_smooth_quats_ignores_hemisphere():
    rng = np.random.default_rng(4)
    q = np.array([Rotation.from_rotvec([0.02 * i, 0.01 * math.sin(i), 0.0]).q for i in range(30)])
    flipped = q * np.where(rng.random(30) < 0.5, -1.0, 1.0)[:, None]
    _, a = gaussian_smooth(np.zeros((30, 3)), q, 2.0)
    _, b = gaussian_smooth(np.zeros((30, 3)), flipped, 2.0)
    np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    assert np.all(a[:, 0] >= 0)


def test_smooth_rotation_about_fixed_axis_tracks_angle():
    # small rotations about one axis: the quaternion mean is close to smoothing the angle
    ang = 0.02 * np.sin(np.arange(50) / 4.0)
    q = np.array([Rotation.about_z(a).q for a in ang])
    _, out = gaussian_smooth(np.zeros((50, 3)), q, 2.0)
    got = 2 * np.arctan2(out[:, 3], out[:, 0])
    np.testing.assert_allclose(got, dense_oracle(ang, 2.0), atol=1e-6)


# ---------------------------------------------------------------------------
# relative actions
# ---------------------------------------------------------------------------

def test_relative_actions_examples():
    p = Pose(np.array([0.1, 0.2, 0.3]), Rotation.from_rotvec([0.1, 0.2, 0.3]))
    a = compute_relative_actions([p, p])
    np.testing.assert_allclose(a[0], [0, 0, 0, 1, 0, 0, 0, 1, 0], atol=1e-12)
    a = compute_relative_actions([Pose.identity(), Pose.translation(0, 0, 0.01)])
    np.testing.assert_allclose(a[0], [0, 0, 0.01, 1, 0, 0, 0, 1, 0], atol=1e-15)
    with pytest.raises(TooFewSamples):
        compute_relative_actions([p])


def test_relative_actions_match_pairwise_relative():
    rng = np.random.default_rng(5)
    poses = [random_pose(rng) for _ in range(20)]
    a = compute_relative_actions(poses)
    for i in range(19):
        np.testing.assert_allclose(a[i], relative(poses[i], poses[i + 1]), atol=1e-12)


def test_chain_reconstruction_error_linear_in_n():
    rng = np.random.default_rng(6)
    poses = [random_pose(rng, 0.5)]
    for _ in range(1000):
        poses.append(compose(poses[-1], Pose(rng.normal(scale=0.01, size=3), Rotation.from_rotvec(rng.normal(scale=0.05, size=3)))))
    pos, quat = integrate_actions(poses[0], compute_relative_actions(poses))
    for n in (10, 100, 1000):
        terr = np.linalg.norm(pos[n] - poses[n].t)
        rerr = geodesic_distance(Rotation(quat[n]), poses[n].r)
        assert terr < 1e-8 and rerr < 1e-8
        assert max(terr, rerr) / n < 1e-10


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def test_normalize_endpoints_and_round_trip():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(500, 4))
    x[:, 3] = 1.25  # constant dimension
    stats = normalize_fit(x, "robot")
    y = normalize_apply(stats.lo, stats)
    np.testing.assert_array_equal(y[:3], -1.0)
    np.testing.assert_array_equal(normalize_apply(stats.hi, stats)[:3], 1.0)
    assert y[3] == 0.0
    inside = np.clip(x, stats.lo, stats.hi)
    back = denormalize(normalize_apply(inside, stats), stats)
    np.testing.assert_allclose(back, inside, atol=1e-9)
    assert np.all(np.abs(normalize_apply(x, stats)) <= 1.0)


def test_normalize_embodiments_are_separate():
    rng = np.random.default_rng(8)
    human = normalize_fit(rng.normal(size=(300, 2)), Embodiment.HUMAN)
    robot = normalize_fit(rng.normal(loc=3.0, size=(300, 2)), Embodiment.ROBOT)
    assert not np.allclose(human.lo, robot.lo)
    with pytest.raises(EmbodimentMismatch):
        normalize_apply(np.zeros(2), human, embodiment="robot")
    with pytest.raises(EmbodimentMismatch):
        denormalize(np.zeros(2), robot, embodiment=Embodiment.HUMAN)
    with pytest.raises(DimensionMismatch):
        normalize_apply(np.zeros(3), human)
    with pytest.raises(TooFewSamples):
        normalize_fit(np.zeros((1, 2)), "human")
    back = type(human).from_dict(human.to_dict())
    assert back.embodiment is Embodiment.HUMAN
    np.testing.assert_array_equal(back.lo, human.lo)


# ---------------------------------------------------------------------------
# idempotence and whole-episode processing
# ---------------------------------------------------------------------------

def test_fill_then_tiny_smooth_idempotent():
    rng = np.random.default_rng(9)
    tracked = rng.random(60) > 0.1
    tracked[0] = tracked[-1] = True
    quats = np.array([Rotation.from_rotvec(v).q for v in 0.05 * rng.normal(size=(60, 3))])
    ep = make_raw(slow_line(60) + 0.01 * rng.normal(size=(60, 3)), tracked, quats)

    def once(e):
        out = []
        for piece in fill_gaps(e):
            h = piece.hands[0]
            p, q = gaussian_smooth(h.wrist_t, h.wrist_q, 1e-6)
            out.append(make_raw(p, quats=q))
        return out

    first = once(ep)
    second = [once(p)[0] for p in first]
    for a, b in zip(first, second):
        np.testing.assert_allclose(a.hands[0].wrist_t, b.hands[0].wrist_t, atol=1e-9)
        np.testing.assert_allclose(a.hands[0].wrist_q, b.hands[0].wrist_q, atol=1e-9)


def test_process_episode_stage_order_and_shapes():
    cube, cam = MarkerCube.standard(), default_camera()
    raw = synth_episode(_reach_traj(45), cube, cam, noise=0.3, dropout=0.1, seed=11, episode_id="h0")
    out = process_episode(raw, ProcessConfig(), cube, cam, reference_hand())
    assert out.error is None and len(out.episodes) >= 1
    ep = out.episodes[0]
    assert ep.stages == ["track", "filter", "interpolate", "clip", "smooth", "retarget"]
    assert ep.actions().shape == (ep.n_frames - 1, 26)
    assert len(ep.report.clip_bounds) == 9
    assert ep.hands[0].ik_residuals.shape == (ep.n_frames,)
    model = reference_hand()
    assert all(model.within_limits(q) for q in ep.hands[0].joints)
    gt = np.array(raw.ground_truth["wrist"][0])
    assert np.max(np.linalg.norm(ep.hands[0].positions - gt[:ep.n_frames, :3], axis=1)) < 0.01


def test_process_robot_episode_keeps_joints():
    cube, cam = MarkerCube.standard(), default_camera()
    raw = synth_episode(_reach_traj(40), cube, cam, seed=12, embodiment="robot")
    out = process_episode(raw, ProcessConfig(), cube, cam, reference_hand())
    ep = out.episodes[0]
    np.testing.assert_array_equal(ep.hands[0].joints, raw.hands[0].joints)
    assert ep.stages[-1] == "retarget"


def test_process_rejects_heavy_dropout():
    cube, cam = MarkerCube.standard(), default_camera()
    raw = synth_episode(_reach_traj(60), cube, cam, dropout=0.4, seed=13)
    out = process_episode(raw, ProcessConfig(), cube, cam, reference_hand())
    assert out.episodes == [] and out.reports[0].reasons == ["track_ratio"]
