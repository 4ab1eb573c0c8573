import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimanip.transforms import (CompositeConfig, InvalidRotation, MetricWeights, Transform,
                                composite_distance, geodesic_distance, interpolate_pose_path,
                                matrix_to_quat, pose_distance, quat_to_matrix, rot_exp, rot_log,
                                rot_z, sample_rotation, sample_se3)

unit = st.floats(-1.0, 1.0, allow_nan=False)
rotvecs = st.tuples(unit, unit, unit).map(lambda v: np.array(v) * 3.0)


def quat_angle(Ra, Rb):
    # independent route: angle from the quaternion dot product
    qa, qb = matrix_to_quat(Ra), matrix_to_quat(Rb)
    return 2.0 * np.arccos(np.clip(abs(float(qa @ qb)), 0.0, 1.0))


def slerp(q0, q1, s):
    d = float(q0 @ q1)
    if d < 0:
        q1, d = -q1, -d
    om = np.arccos(np.clip(d, -1.0, 1.0))
    if om < 1e-12:
        return q0
    return (np.sin((1 - s) * om) * q0 + np.sin(s * om) * q1) / np.sin(om)


def random_config(rng):
    return CompositeConfig(rng.uniform(-3, 3, 6), rng.uniform(-3, 3, 6),
                           sample_se3(([-1, -1, -1], [1, 1, 1]), rng))


def test_geodesic_identity_and_antipodal():
    assert geodesic_distance(np.eye(3), np.eye(3)) == 0.0
    assert geodesic_distance(np.eye(3), rot_z(np.pi)) == pytest.approx(np.pi, abs=1e-12)


def test_geodesic_matches_quaternion_oracle(rng):
    for _ in range(500):
        Ra, Rb = sample_rotation(rng), sample_rotation(rng)
        assert abs(geodesic_distance(Ra, Rb) - quat_angle(Ra, Rb)) < 1e-9


def test_geodesic_left_invariance(rng):
    for _ in range(200):
        Ra, Rb, Q = sample_rotation(rng), sample_rotation(rng), sample_rotation(rng)
        assert abs(geodesic_distance(Q @ Ra, Q @ Rb) - geodesic_distance(Ra, Rb)) < 1e-9


def test_composite_identity_and_alpha_one(rng):
    c = random_config(rng)
    assert composite_distance(c, c) == 0.0
    a, b = random_config(rng), random_config(rng)
    d = composite_distance(a, b, MetricWeights(alpha=1.0))
    assert d == np.linalg.norm(a.q1 - b.q1) + np.linalg.norm(a.q2 - b.q2)


def test_composite_symmetry(rng):
    for _ in range(1000):
        a, b = random_config(rng), random_config(rng)
        assert abs(composite_distance(a, b) - composite_distance(b, a)) < 1e-12


def test_composite_dimension_mismatch():
    T = Transform.identity()
    with pytest.raises(ValueError):
        composite_distance(CompositeConfig(np.zeros(6), np.zeros(6), T), CompositeConfig(np.zeros(5), np.zeros(6), T))


def test_metric_weights_validated():
    with pytest.raises(ValueError):
        MetricWeights(alpha=1.5)
    with pytest.raises(ValueError):
        MetricWeights(rot_weight=-1.0)


def test_transform_rejects_non_rotation():
    with pytest.raises(InvalidRotation):
        Transform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidRotation):
        Transform(np.eye(3) * 1.01)


def test_sample_se3_membership_and_bounds(rng):
    lo, hi = np.array([-0.2, 0.1, 0.0]), np.array([0.3, 0.4, 0.05])
    for _ in range(500):
        T = sample_se3((lo, hi), rng)
        R = T.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1.0) < 1e-9
        assert np.all(T.translation >= lo) and np.all(T.translation <= hi)


def test_sample_se3_deterministic():
    a = sample_se3(([0, 0, 0], [1, 1, 1]), np.random.default_rng(5))
    b = sample_se3(([0, 0, 0], [1, 1, 1]), np.random.default_rng(5))
    assert np.array_equal(a.matrix, b.matrix)
    with pytest.raises(ValueError):
        sample_se3(([0, 0, 0], [-1, 1, 1]), np.random.default_rng(0))


def test_pose_path_constant():
    T = sample_se3(([0, 0, 0], [1, 1, 1]), np.random.default_rng(1))
    P = interpolate_pose_path(T, T).sample(np.linspace(0, 1, 11))
    assert np.abs(P - T.matrix).max() < 1e-15


def test_pose_path_endpoints_and_midpoint(rng):
    for _ in range(100):
        T0 = sample_se3(([-1, -1, -1], [1, 1, 1]), rng)
        T1 = sample_se3(([-1, -1, -1], [1, 1, 1]), rng)
        path = interpolate_pose_path(T0, T1)
        P = path.sample(np.array([0.0, 0.5, 1.0]))
        assert np.abs(P[0] - T0.matrix).max() < 1e-12
        assert np.array_equal(P[2][:3, :3], T1.rotation)
        assert np.abs(P[2][:3, 3] - T1.translation).max() < 1e-12
        full = geodesic_distance(T0.rotation, T1.rotation)
        assert abs(geodesic_distance(T0.rotation, P[1][:3, :3]) - 0.5 * full) < 1e-9


def test_pose_path_matches_slerp_oracle(rng):
    s = np.linspace(0, 1, 21)
    for _ in range(50):
        T0 = sample_se3(([0, 0, 0], [1, 1, 1]), rng)
        T1 = sample_se3(([0, 0, 0], [1, 1, 1]), rng)
        P = interpolate_pose_path(T0, T1).sample(s)
        q0, q1 = matrix_to_quat(T0.rotation), matrix_to_quat(T1.rotation)
        for k, sk in enumerate(s):
            R = quat_to_matrix(slerp(q0, q1, sk))
            assert geodesic_distance(P[k][:3, :3], R) < 1e-9


def test_pose_path_reversible(rng):
    s = np.linspace(0, 1, 17)
    for _ in range(50):
        T0 = sample_se3(([0, 0, 0], [1, 1, 1]), rng)
        T1 = sample_se3(([0, 0, 0], [1, 1, 1]), rng)
        a = interpolate_pose_path(T0, T1).sample(s)
        b = interpolate_pose_path(T1, T0).sample(1.0 - s)
        assert np.abs(a - b).max() < 1e-9


def test_pose_path_translation_has_zero_end_velocity():
    T0 = Transform.identity()
    T1 = Transform(np.eye(3), [1.0, 0.0, 0.0])
    P = interpolate_pose_path(T0, T1).sample(np.array([0.0, 1e-4, 1 - 1e-4, 1.0]))
    assert (P[1][0, 3] - P[0][0, 3]) / 1e-4 < 1e-3
    assert (P[3][0, 3] - P[2][0, 3]) / 1e-4 < 1e-3


def test_pose_path_pi_rotation_is_deterministic_and_flagged():
    T1 = Transform(rot_z(np.pi))
    a = interpolate_pose_path(Transform.identity(), T1)
    b = interpolate_pose_path(Transform.identity(), T1)
    assert a.degenerate_axis and np.array_equal(a.axis, b.axis)
    assert np.abs(a.sample(np.array([1.0]))[0][:3, :3] - T1.rotation).max() < 1e-12


@settings(max_examples=300, deadline=None)
@given(rotvecs)
def test_rot_exp_log_roundtrip(v):
    th = np.linalg.norm(v)
    if th >= np.pi - 1e-6:
        return
    assert np.abs(rot_log(rot_exp(v)) - v).max() < 1e-9


@settings(max_examples=300, deadline=None)
@given(rotvecs)
def test_quaternion_roundtrip(v):
    R = rot_exp(v)
    assert np.abs(quat_to_matrix(matrix_to_quat(R)) - R).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_axioms(seed):
    r = np.random.default_rng(seed)
    a, b, c = (random_config(r) for _ in range(3))
    dab, dbc, dac = composite_distance(a, b), composite_distance(b, c), composite_distance(a, c)
    assert dab >= 0 and dac <= dab + dbc + 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pose_distance_triangle(seed):
    r = np.random.default_rng(seed)
    a, b, c = (sample_se3(([0, 0, 0], [1, 1, 1]), r) for _ in range(3))
    assert pose_distance(a, c) <= pose_distance(a, b) + pose_distance(b, c) + 1e-9
