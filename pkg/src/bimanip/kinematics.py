"""Serial-arm kinematics: forward kinematics, Jacobians, branch labels and
closed-loop tracking of gripper pose paths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import _kernels as K
from .transforms import MetricWeights, PosePath, Transform, pose_distance

SINGULAR_TOL = 1e-4
TRACK_TOL = 1e-9
MAX_NEWTON_ITERS = 50
INDETERMINATE = -1


class JointLimitError(ValueError):
    pass


class TrackingError(RuntimeError):
    """Raised by differential_ik_track; kind is SINGULAR, LIMIT or DIVERGED."""

    def __init__(self, kind: str, step: int):
        super().__init__(f"TRACKING_{kind} at step {step}")
        self.kind = kind
        self.step = step


_STATUS = {K.TRACK_SINGULAR: "SINGULAR", K.TRACK_LIMIT: "LIMIT", K.TRACK_DIVERGED: "DIVERGED"}


@dataclass(frozen=True)
class Box:
    """Oriented box given by half-extents in a local frame."""

    half: np.ndarray
    frame: Transform = field(default_factory=Transform.identity)

    def __post_init__(self):
        h = np.array(self.half, dtype=float)
        if h.shape != (3,) or np.any(h <= 0):
            raise ValueError("box half-extents must be three positive numbers")
        h.flags.writeable = False
        object.__setattr__(self, "half", h)

    def vertices(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=float)
        return self.frame.apply(signs * self.half)


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    origin: Transform
    lo: float
    hi: float

    def __post_init__(self):
        a = np.array(self.axis, dtype=float)
        if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("joint axis must be a unit 3-vector")
        if not self.lo < self.hi:
            raise ValueError("joint limits need lo < hi")
        a.flags.writeable = False
        object.__setattr__(self, "axis", a)


@dataclass(frozen=True)
class BranchPredicate:
    """A scalar whose sign separates IK branches.

    kind "joint_sin": sin(q[joint] + offset).
    kind "point_coord": coordinate `component` of the origin of the frame after
    joint `joint`, expressed in the frame after joint `ref`, minus offset.
    """

    kind: str
    joint: int
    offset: float = 0.0
    ref: int = 0
    component: int = 0


class SerialArm:
    """Revolute serial chain. link_shapes[0] rides on the base frame, link_shapes[i]
    on the frame after joint i."""

    def __init__(self, base: Transform, joints: Sequence[Joint], link_shapes: Sequence[Sequence[Box]],
                 tool: Transform, predicates: Sequence[BranchPredicate] = (), name: str = "arm"):
        if len(link_shapes) != len(joints) + 1:
            raise ValueError("need one link shape list per joint plus the base link")
        self.base = base
        self.joints = tuple(joints)
        self.link_shapes = tuple(tuple(s) for s in link_shapes)
        self.tool = tool
        self.predicates = tuple(predicates)
        self.name = name
        n = len(self.joints)
        for p in self.predicates:
            if p.kind not in ("joint_sin", "point_coord"):
                raise ValueError(f"unknown branch predicate kind {p.kind!r}")
            if not (0 <= p.joint < n and 0 <= p.ref < n and 0 <= p.component < 3):
                raise ValueError("branch predicate index out of range")
        self._base = np.ascontiguousarray(base.matrix)
        self._origins = np.ascontiguousarray(np.stack([j.origin.matrix for j in self.joints]))
        self._axes = np.ascontiguousarray(np.stack([j.axis for j in self.joints]))
        self._tool = np.ascontiguousarray(tool.matrix)
        self.lo = np.array([j.lo for j in self.joints])
        self.hi = np.array([j.hi for j in self.joints])
        self._pk = np.array([0 if p.kind == "joint_sin" else 1 for p in self.predicates], dtype=np.int64)
        self._pa = np.array([p.joint for p in self.predicates], dtype=np.int64)
        self._pb = np.array([p.ref for p in self.predicates], dtype=np.int64)
        self._pc = np.array([p.component for p in self.predicates], dtype=np.int64)
        self._po = np.array([p.offset for p in self.predicates], dtype=float)

    @property
    def dof(self) -> int:
        return len(self.joints)

    def within_limits(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.lo) and np.all(q <= self.hi))

    def frames(self, q) -> np.ndarray:
        """All frames (base, after each joint, tool) as an (n + 2, 4, 4) array."""
        out = np.empty((self.dof + 2, 4, 4))
        K.fk_frames(self._base, self._origins, self._axes, self._tool,
                    np.ascontiguousarray(q, dtype=float), out)
        return out

    def kernel_args(self):
        return self._base, self._origins, self._axes, self._tool

    def predicate_args(self):
        return self._pk, self._pa, self._pb, self._pc, self._po

    @cached_property
    def reach(self) -> float:
        """Upper bound on the distance from the first joint to the tool point."""
        r = float(np.linalg.norm(self._tool[:3, 3]))
        for o in self._origins[1:]:
            r += float(np.linalg.norm(o[:3, 3]))
        return r

    @cached_property
    def shoulder(self) -> np.ndarray:
        return (self._base @ self._origins[0])[:3, 3].copy()

    @cached_property
    def wrist_bound(self) -> tuple[np.ndarray, float, np.ndarray]:
        """(anchor, radius, tool inverse): the origin of the last frame, found from a
        tool pose as (T @ tool^-1), always lies within radius of the fixed anchor."""
        n = self.dof
        k = n - 1
        while k > 0 and np.linalg.norm(self._origins[k][:3, 3]) < 1e-12:
            k -= 1
        B0 = self._base @ self._origins[0]
        anchor = B0[:3, 3].copy()
        start = 1
        if n > 1 and np.linalg.norm(np.cross(self._origins[1][:3, 3], self._axes[0])) < 1e-12:
            anchor = anchor + B0[:3, :3] @ self._origins[1][:3, 3]
            start = 2
        radius = sum(float(np.linalg.norm(self._origins[j][:3, 3])) for j in range(start, k + 1))
        return anchor, radius, np.linalg.inv(self._tool)

    def may_reach(self, target: np.ndarray, margin: float = 1e-6) -> bool:
        anchor, radius, tinv = self.wrist_bound
        wrist = target[:3, :3] @ tinv[:3, 3] + target[:3, 3]
        return bool(np.linalg.norm(wrist - anchor) <= radius + margin)

    @cached_property
    def seed_pool(self) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic joint seeds and their tool poses."""
        rng = np.random.default_rng(7919)
        qs = self.lo + (self.hi - self.lo) * rng.random((512, self.dof))
        qs[0] = np.clip(np.zeros(self.dof), self.lo, self.hi)
        poses = np.stack([self.frames(q)[-1] for q in qs])
        return qs, poses


def _check_q(arm: SerialArm, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (arm.dof,):
        raise ValueError(f"expected {arm.dof} joint values, got shape {q.shape}")
    if not arm.within_limits(q):
        raise JointLimitError("joint vector outside limits")
    return q


def forward_kinematics(arm: SerialArm, q) -> Transform:
    q = _check_q(arm, q)
    return Transform.from_matrix(arm.frames(q)[-1], check=False)


def jacobian(arm: SerialArm, q) -> np.ndarray:
    """6 x n map from joint rates to [linear; angular] gripper velocity in world axes."""
    q = _check_q(arm, q)
    J = np.empty((6, arm.dof))
    K.jacobian_from_frames(arm.frames(q), arm._axes, J)
    return J


def sigma_min(arm: SerialArm, q) -> float:
    return float(np.linalg.svd(jacobian(arm, q), compute_uv=False)[-1])


def is_singular(arm: SerialArm, q, tol: float = SINGULAR_TOL) -> bool:
    return sigma_min(arm, q) < tol


def ik_class(arm: SerialArm, q, tol: float = SINGULAR_TOL) -> int:
    """Bit pattern of branch-predicate signs, or INDETERMINATE near a singularity."""
    q = _check_q(arm, q)
    if is_singular(arm, q, tol):
        return INDETERMINATE
    return int(K.branch_label(q, arm.frames(q), *arm.predicate_args()))


@dataclass(frozen=True, eq=False)
class JointTrajectory:
    times: np.ndarray
    q: np.ndarray
    arm_id: int

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or len(t) != len(q):
            raise ValueError("need one joint vector per timestamp")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        t.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "q", q)

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other) -> bool:
        return (isinstance(other, JointTrajectory) and self.arm_id == other.arm_id
                and np.array_equal(self.times, other.times) and np.array_equal(self.q, other.q))

    def within_limits(self, arm: SerialArm) -> bool:
        return bool(np.all(self.q >= arm.lo) and np.all(self.q <= arm.hi))


def default_steps(path: PosePath, w: MetricWeights = MetricWeights(), ds: float = 0.005) -> int:
    return max(1, math.ceil(path.length(w) / ds))


def track_poses(arm: SerialArm, q0, targets: np.ndarray, max_jump: float = 0.5):
    """Run the tracking kernel over an explicit (N, 4, 4) target array.

    Returns (status, failing step, q array, frames array).
    """
    targets = np.ascontiguousarray(targets, dtype=float)
    N = len(targets)
    qs = np.zeros((N, arm.dof))
    frames = np.zeros((N, arm.dof + 2, 4, 4))
    status, step = K.track_path(*arm.kernel_args(), arm.lo, arm.hi, targets,
                                np.ascontiguousarray(q0, dtype=float), SINGULAR_TOL, TRACK_TOL,
                                MAX_NEWTON_ITERS, max_jump, *arm.predicate_args(), qs, frames)
    return int(status), int(step), qs, frames


def differential_ik_track(arm: SerialArm, q0, pose_path: PosePath, n_steps: int | None = None,
                          arm_id: int = 0) -> JointTrajectory:
    """Track a gripper pose path with damped least squares plus Newton correction."""
    q0 = _check_q(arm, q0)
    if n_steps is None:
        n_steps = default_steps(pose_path)
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    T0 = arm.frames(q0)[-1]
    e = np.empty(6)
    K.pose_error(T0, pose_path.start.matrix, e)
    if np.linalg.norm(e[:3]) > 1e-6 or np.linalg.norm(e[3:]) > 1e-6:
        raise ValueError("q0 does not realize the start of the pose path")
    s = np.linspace(0.0, 1.0, n_steps + 1)
    targets = pose_path.sample(s)
    targets[0] = T0
    status, step, qs, _ = track_poses(arm, q0, targets)
    if status != K.TRACK_OK:
        raise TrackingError(_STATUS[status], step)
    return JointTrajectory(s, qs, arm_id)


def solve_ik(arm: SerialArm, target: Transform | np.ndarray, n_seeds: int = 8,
             q_hint=None, want_class: int | None = None, stats: dict | None = None,
             first_only: bool = False) -> list[np.ndarray]:
    """Newton IK from the seeds whose tool poses lie nearest the target.

    Returns the distinct non-singular in-limit solutions, nearest seed first (or
    nearest to q_hint when given).
    """
    Tt = np.ascontiguousarray(target.matrix if isinstance(target, Transform) else target)
    qs, poses = arm.seed_pool
    d = (np.linalg.norm(poses[:, :3, 3] - Tt[:3, 3], axis=1)
         + 0.1 * np.linalg.norm(poses[:, :3, :3] - Tt[:3, :3], axis=(1, 2)))
    order = np.argsort(d, kind="stable")[:n_seeds]
    seeds = [qs[i] for i in order]
    if q_hint is not None:
        seeds.insert(0, np.asarray(q_hint, dtype=float))
    frames = np.empty((arm.dof + 2, 4, 4))
    J = np.empty((6, arm.dof))
    sols: list[np.ndarray] = []
    for seed in seeds:
        q = np.array(seed, dtype=float)
        its = K.newton_solve(*arm.kernel_args(), arm.lo, arm.hi, Tt, q, 100, TRACK_TOL, TRACK_TOL,
                             0.5, 1e-3, True, frames, J)
        if its < 0 or not arm.within_limits(q):
            continue
        K.jacobian_from_frames(frames, arm._axes, J)
        if K.sigma_min(J) < SINGULAR_TOL:
            if stats is not None:
                stats["singular"] = stats.get("singular", 0) + 1
            continue
        if want_class is not None and int(K.branch_label(q, frames, *arm.predicate_args())) != want_class:
            continue
        if any(np.max(np.abs(q - s)) < 1e-6 for s in sols):
            continue
        sols.append(q)
        if first_only:
            break
    if q_hint is not None and sols:
        hint = np.asarray(q_hint, dtype=float)
        sols.sort(key=lambda v: float(np.linalg.norm(v - hint)))
    return sols


def relative_pose_error(Ta: np.ndarray, Tb: np.ndarray) -> tuple[float, float]:
    """Translation and rotation size of Ta^-1 Tb."""
    e = np.empty(6)
    K.pose_error(Ta, Tb, e)
    return float(np.linalg.norm(e[:3])), float(np.linalg.norm(e[3:]))


__all__ = [
    "Box", "Joint", "BranchPredicate", "SerialArm", "JointTrajectory", "TrackingError",
    "JointLimitError", "forward_kinematics", "jacobian", "is_singular", "ik_class", "sigma_min",
    "differential_ik_track", "solve_ik", "track_poses", "default_steps", "pose_distance",
    "INDETERMINATE", "SINGULAR_TOL",
]
