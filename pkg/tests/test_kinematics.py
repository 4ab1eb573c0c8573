import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from helpers import fd_jacobian

from bimanip.kinematics import (INDETERMINATE, JointLimitError, JointTrajectory, TrackingError,
                                differential_ik_track, forward_kinematics, ik_class, is_singular,
                                jacobian, sigma_min, solve_ik, track_poses)
from bimanip._kernels import TRACK_SINGULAR
from bimanip.transforms import Transform, geodesic_distance, interpolate_pose_path, rot_z

# tool pose of the right arm at q = 0, from the hand-chained product of its origins
HOME = np.array([[0.0, -1.0, 0.0, -0.1],
                 [-1.0, 0.0, 0.0, -0.15],
                 [0.0, 0.0, -1.0, 0.29],
                 [0.0, 0.0, 0.0, 1.0]])
STRETCHED = np.array([0.0, 0.0, -np.pi / 2, 0.0, 0.3, 0.0])


@pytest.fixture(scope="module")
def arm(box):
    return box.arms[0]


def random_q(arm, rng, n):
    lo, hi = np.maximum(arm.lo, -np.pi), np.minimum(arm.hi, np.pi)
    return lo + (hi - lo) * rng.random((n, arm.dof))


def poe_fk(arm, q):
    # product of exponentials with space-frame screws taken at q = 0
    M = arm.base.matrix.copy()
    screws = []
    for j in arm.joints:
        M = M @ j.origin.matrix
        w = M[:3, :3] @ j.axis
        v = -np.cross(w, M[:3, 3])
        S = np.zeros((4, 4))
        S[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
        S[:3, 3] = v
        screws.append(S)
    home = M @ arm.tool.matrix
    T = np.eye(4)
    for S, qi in zip(screws, q):
        T = T @ expm(S * qi)
    return T @ home


def test_home_pose(arm):
    assert np.abs(forward_kinematics(arm, np.zeros(6)).matrix - HOME).max() < 1e-12


def test_joint_one_rotates_about_its_axis(arm):
    phi = 0.7
    p0 = forward_kinematics(arm, np.zeros(6)).translation
    p1 = forward_kinematics(arm, np.array([phi, 0, 0, 0, 0, 0])).translation
    c = arm.shoulder
    expected = c + rot_z(phi) @ (p0 - c)
    assert np.abs(p1 - expected).max() < 1e-12


def test_fk_matches_product_of_exponentials(arm, rng):
    for q in random_q(arm, rng, 200):
        assert np.abs(forward_kinematics(arm, q).matrix - poe_fk(arm, q)).max() < 1e-9


def test_fk_rejects_limits_and_shape(arm):
    with pytest.raises(JointLimitError):
        forward_kinematics(arm, np.array([0, 3.0, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        forward_kinematics(arm, np.zeros(5))


def test_jacobian_zero_velocity(arm):
    assert np.all(jacobian(arm, np.full(6, 0.2)) @ np.zeros(6) == 0.0)


def test_jacobian_matches_finite_differences(arm):
    r = np.random.default_rng(0)
    worst = 0.0
    for q in random_q(arm, r, 100):
        q = np.clip(q, arm.lo + 1e-5, arm.hi - 1e-5)
        worst = max(worst, float(np.abs(jacobian(arm, q) - fd_jacobian(arm, q)).max()))
    assert worst < 1e-5


def test_generic_configurations_full_rank(arm, rng):
    for q in random_q(arm, rng, 50):
        if is_singular(arm, q):
            continue
        assert np.linalg.matrix_rank(jacobian(arm, q), tol=1e-6) == 6


def test_stretched_arm_is_singular(arm):
    assert sigma_min(arm, STRETCHED) < 1e-9
    assert is_singular(arm, STRETCHED)
    assert ik_class(arm, STRETCHED) == INDETERMINATE


def test_generic_not_singular_and_infinite_tol(arm):
    q = np.array([0.3, 0.2, -0.8, 0.4, 0.9, -0.2])
    assert not is_singular(arm, q)
    assert is_singular(arm, q, tol=np.inf)


def test_ik_class_locally_constant(arm, rng):
    for q in random_q(arm, rng, 200):
        if sigma_min(arm, q) < 1e-2:
            continue
        k = ik_class(arm, q)
        assert k != INDETERMINATE
        assert ik_class(arm, q + 1e-7 * rng.standard_normal(6)) == k


def test_ik_class_separates_branches_of_one_pose(arm):
    target = forward_kinematics(arm, np.array([0.2, 0.3, -0.9, 0.3, 0.8, 0.1]))
    sols = solve_ik(arm, target, n_seeds=64)
    labels = {ik_class(arm, q) for q in sols}
    for q in sols:
        assert np.abs(forward_kinematics(arm, q).matrix - target.matrix).max() < 1e-8
    assert len(labels) >= 2


def test_ik_class_count_bounded(arm):
    r = np.random.default_rng(3)
    labels = {ik_class(arm, q) for q in random_q(arm, r, 10_000)} - {INDETERMINATE}
    assert 1 <= len(labels) <= 8


def _line_path(arm, q0, d):
    T0 = forward_kinematics(arm, q0)
    return interpolate_pose_path(T0, Transform(T0.rotation, T0.translation + d))


def test_track_constant_path(arm):
    q0 = np.array([0.2, 0.3, -0.9, 0.3, 0.8, 0.1])
    T0 = forward_kinematics(arm, q0)
    tr = differential_ik_track(arm, q0, interpolate_pose_path(T0, T0), 10)
    assert np.abs(tr.q - q0).max() < 1e-12


def test_track_five_cm_line(arm):
    q0 = np.array([0.2, 0.3, -0.9, 0.3, 0.8, 0.1])
    path = _line_path(arm, q0, np.array([0.05, 0.0, 0.0]))
    tr = differential_ik_track(arm, q0, path, 50)
    P = path.sample(tr.times)
    k0 = ik_class(arm, q0)
    for q, T in zip(tr.q, P):
        F = forward_kinematics(arm, q)
        assert np.linalg.norm(F.translation - T[:3, 3]) < 1e-6
        assert geodesic_distance(F.rotation, T[:3, :3]) < 1e-6
        assert ik_class(arm, q) == k0
    assert tr.within_limits(arm)


def test_track_resolution_stable(arm):
    q0 = np.array([0.2, 0.3, -0.9, 0.3, 0.8, 0.1])
    path = _line_path(arm, q0, np.array([0.0, -0.05, 0.0]))
    a = differential_ik_track(arm, q0, path, 50).q[-1]
    b = differential_ik_track(arm, q0, path, 100).q[-1]
    assert np.abs(a - b).max() < 1e-4


def test_track_through_stretched_singularity(arm):
    # targets from a joint path that bends the elbow through full extension at its midpoint
    qa = STRETCHED.copy()
    qa[2] += 0.2
    qb = STRETCHED.copy()
    qb[2] -= 0.2
    for n in (20, 40, 100):
        qs = qa + np.linspace(0, 1, n + 1)[:, None] * (qb - qa)
        targets = np.stack([arm.frames(q)[-1] for q in qs])
        code, step = track_poses(arm, qa, targets)[:2]
        assert code == TRACK_SINGULAR
        assert step == n // 2


def test_track_error_kind_on_unreachable_line(arm):
    q0 = np.array([0.2, 0.3, -0.9, 0.3, 0.8, 0.1])
    path = _line_path(arm, q0, np.array([0.0, 0.05, 0.0]))
    assert solve_ik(arm, path.end, n_seeds=64) == []
    with pytest.raises(TrackingError) as ei:
        differential_ik_track(arm, q0, path, 50)
    assert ei.value.kind == "DIVERGED"


def test_track_requires_matching_start(arm):
    q0 = np.array([0.2, 0.3, -0.9, 0.3, 0.8, 0.1])
    T = Transform(np.eye(3), [0.3, 0.0, 0.3])
    with pytest.raises(ValueError):
        differential_ik_track(arm, q0, interpolate_pose_path(T, T), 5)


def test_joint_trajectory_invariants():
    with pytest.raises(ValueError):
        JointTrajectory([0.0, 0.0], np.zeros((2, 6)), 0)
    with pytest.raises(ValueError):
        JointTrajectory([0.0, 1.0], np.zeros((3, 6)), 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=6, max_size=6))
def test_fk_rotation_is_proper(box, q):
    R = forward_kinematics(box.arms[1], np.array(q)).rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12
