import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexcotrain.errors import DegenerateRot6D
from dexcotrain.pose import (
    RELATIVE_IDENTITY,
    Pose,
    Rotation,
    compose,
    from_rot6d,
    geodesic_distance,
    inverse,
    lift,
    pose_interpolate,
    random_pose,
    random_rotation,
    relative,
    relative_batch,
    to_rot6d,
)


def rot_z(deg):
    return Rotation.about_z(math.radians(deg))


def mat_rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    m = np.eye(4)
    m[:2, :2] = [[c, -s], [s, c]]
    return m


def assert_pose_close(a, b, tol=1e-9):
    assert np.linalg.norm(a.t - b.t) < tol
    assert geodesic_distance(a.r, b.r) < tol


seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_compose_identity():
    p = Pose(np.array([0.1, -0.2, 0.3]), rot_z(30))
    assert_pose_close(compose(Pose.identity(), p), p)


def test_compose_translations():
    out = compose(Pose.translation(1, 0, 0), Pose.translation(0, 1, 0))
    np.testing.assert_allclose(out.t, [1, 1, 0])


def test_compose_matches_matrix_product():
    a = Pose(np.array([1.0, 0, 0]), rot_z(90))
    b = Pose.translation(1, 0, 0)
    out = compose(a, b)
    # oracle: explicit 4x4 product built without the quaternion path
    ma = mat_rot_z(90)
    ma[0, 3] = 1.0
    mb = np.eye(4)
    mb[0, 3] = 1.0
    oracle = ma @ mb
    np.testing.assert_allclose(out.t, oracle[:3, 3], atol=1e-12)
    np.testing.assert_allclose(out.t, [1, 1, 0], atol=1e-12)
    assert geodesic_distance(out.r, rot_z(90)) < 1e-12


def test_inverse_cases():
    assert_pose_close(inverse(Pose.identity()), Pose.identity())
    np.testing.assert_allclose(inverse(Pose.translation(1, 2, 3)).t, [-1, -2, -3])
    p = Pose(np.array([1.0, 0, 0]), rot_z(90))
    m = mat_rot_z(90)
    m[0, 3] = 1.0
    np.testing.assert_allclose(inverse(p).matrix(), np.linalg.inv(m), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_inverse_round_trip(seed):
    p = random_pose(np.random.default_rng(seed))
    assert_pose_close(compose(p, inverse(p)), Pose.identity())


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))


def test_relative_cases():
    p = Pose(np.array([0.3, 0.1, -0.2]), rot_z(40))
    np.testing.assert_allclose(relative(p, p), RELATIVE_IDENTITY, atol=1e-12)
    np.testing.assert_allclose(
        relative(Pose.identity(), Pose.translation(0, 0, 0.5)), [0, 0, 0.5, 1, 0, 0, 0, 1, 0], atol=1e-15
    )


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_relative_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    oracle = np.linalg.inv(a.matrix()) @ b.matrix()
    rel = relative(a, b)
    np.testing.assert_allclose(rel[:3], oracle[:3, 3], atol=1e-9)
    np.testing.assert_allclose(rel[3:6], oracle[:3, 0], atol=1e-9)
    np.testing.assert_allclose(rel[6:9], oracle[:3, 1], atol=1e-9)
    assert_pose_close(compose(a, lift(rel)), b)


def test_relative_batch_agrees_with_scalar():
    rng = np.random.default_rng(5)
    poses = [random_pose(rng) for _ in range(20)]
    ta = np.array([p.t for p in poses[:-1]])
    qa = np.array([p.r.q for p in poses[:-1]])
    tb = np.array([p.t for p in poses[1:]])
    qb = np.array([p.r.q for p in poses[1:]])
    batch = relative_batch(ta, qa, tb, qb)
    for k in range(19):
        np.testing.assert_allclose(batch[k], relative(poses[k], poses[k + 1]), atol=1e-12)


def test_rot6d_cases():
    np.testing.assert_array_equal(to_rot6d(Rotation.identity()), [1, 0, 0, 0, 1, 0])
    assert geodesic_distance(from_rot6d([2, 0, 0, 0, 3, 0]), Rotation.identity()) == 0.0


def test_rot6d_round_trip_random():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = random_rotation(rng)
        back = from_rot6d(to_rot6d(r))
        worst = max(worst, geodesic_distance(r, back))
        m = back.matrix()
        np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(m) - 1.0) < 1e-9
    assert worst < 1e-9


@pytest.mark.parametrize(
    "v",
    [[0, 0, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0], [1, 0, 0, 2, 0, 0], [1, 0, 0, -1, 1e-9, 0]],
)
def test_rot6d_degenerate(v):
    with pytest.raises(DegenerateRot6D):
        from_rot6d(v)


def test_canonicalization_preserves_rotation():
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        r = Rotation(q)
        assert r.q[0] >= 0
        # the matrix of q and -q agree; compare with the raw quaternion's matrix
        w, x, y, z = q
        raw = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        np.testing.assert_allclose(r.matrix(), raw, atol=1e-12)


def test_unit_norm_after_operations():
    rng = np.random.default_rng(11)
    a, b = random_pose(rng), random_pose(rng)
    for p in (compose(a, b), inverse(a), lift(relative(a, b)), pose_interpolate(a, b, 0.3)):
        assert abs(np.linalg.norm(p.r.q) - 1.0) < 1e-9
        assert p.r.q[0] >= 0


def test_interpolate_endpoints_and_midpoints():
    rng = np.random.default_rng(1)
    a, b = random_pose(rng), random_pose(rng)
    assert_pose_close(pose_interpolate(a, b, 0.0), a)
    assert_pose_close(pose_interpolate(a, b, 1.0), b)
    mid = pose_interpolate(Pose.identity(), Pose(np.zeros(3), rot_z(90)), 0.5)
    assert geodesic_distance(mid.r, rot_z(45)) < 1e-12
    np.testing.assert_allclose(
        pose_interpolate(Pose.identity(), Pose.translation(2, 0, 0), 0.5).t, [1, 0, 0]
    )
    with pytest.raises(ValueError):
        pose_interpolate(a, b, 1.5)


def test_interpolate_takes_shortest_arc():
    a = Rotation.about_z(math.radians(170))
    b = Rotation.about_z(math.radians(-170))
    mid = pose_interpolate(Pose(np.zeros(3), a), Pose(np.zeros(3), b), 0.5)
    assert geodesic_distance(mid.r, Rotation.about_z(math.pi)) < 1e-12


def test_geodesic_cases():
    r = rot_z(33)
    assert geodesic_distance(r, r) == 0.0
    assert abs(geodesic_distance(Rotation.identity(), rot_z(90)) - math.pi / 2) < 1e-15


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_geodesic_left_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b, g = random_rotation(rng), random_rotation(rng), random_rotation(rng)
    assert abs(geodesic_distance(g * a, g * b) - geodesic_distance(a, b)) < 1e-12


def test_pose_binary_layout():
    p = Pose(np.array([1.0, 2.0, 3.0]), rot_z(90))
    raw = p.to_bytes()
    assert len(raw) == 56
    assert np.frombuffer(raw, dtype="<f8")[0] == 1.0
    assert_pose_close(Pose.from_bytes(raw), p, tol=0.0 + 1e-15)
