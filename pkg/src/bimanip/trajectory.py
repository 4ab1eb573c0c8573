"""Manipulation trajectories: alternating transfer (object held) and transit (object
resting) segments, with composition and replay validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .grasps import BimanualGrasp, equilibrium_along, gripper_offsets
from .kinematics import SINGULAR_TOL
from .transforms import CompositeConfig, MetricWeights, Transform, geodesic_distance
from .world import PlacementError, World, classify_placement

JUNCTION_TOL = 1e-6
CLOSED_CHAIN_TOL = 1e-6


class JunctionError(ValueError):
    def __init__(self, index: int, gap: float):
        super().__init__(f"segments {index} and {index + 1} do not meet (gap {gap:.3g})")
        self.index = index
        self.gap = gap


def _freeze(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TransferSegment:
    """Both grippers hold the object with a fixed grasp while it moves. meta holds only
    JSON-native values (lists, not tuples) so saved files load back equal."""

    grasp: BimanualGrasp
    poses: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    s: np.ndarray
    kind: str = "typea"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("poses", "q1", "q2", "s"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        n = len(self.s)
        if not (len(self.poses) == len(self.q1) == len(self.q2) == n and n >= 1):
            raise ValueError("transfer segment arrays must share their length")

    def __len__(self) -> int:
        return len(self.s)

    @property
    def is_transfer(self) -> bool:
        return True

    def pose_at(self, i: int) -> np.ndarray:
        return self.poses[i]

    def reversed(self) -> "TransferSegment":
        return TransferSegment(self.grasp, self.poses[::-1], self.q1[::-1], self.q2[::-1],
                               self.s[-1] - self.s[::-1], self.kind, dict(self.meta, reversed=True))


@dataclass(frozen=True, eq=False)
class TransitSegment:
    """The object rests at a fixed pose while the arms move."""

    pose: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    s: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pose", "q1", "q2", "s"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if not (len(self.q1) == len(self.q2) == len(self.s) >= 1):
            raise ValueError("transit segment arrays must share their length")

    def __len__(self) -> int:
        return len(self.s)

    @property
    def is_transfer(self) -> bool:
        return False

    def pose_at(self, i: int) -> np.ndarray:
        return self.pose

    @property
    def poses(self) -> np.ndarray:
        return np.broadcast_to(self.pose, (len(self.s), 4, 4))


def _seg_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, TransferSegment):
        return (a.grasp == b.grasp and a.kind == b.kind and np.array_equal(a.poses, b.poses)
                and np.array_equal(a.q1, b.q1) and np.array_equal(a.q2, b.q2) and np.array_equal(a.s, b.s))
    return (np.array_equal(a.pose, b.pose) and np.array_equal(a.q1, b.q1) and np.array_equal(a.q2, b.q2)
            and np.array_equal(a.s, b.s))


def boundary_gap(ca: tuple, cb: tuple) -> float:
    """Largest joint or pose discrepancy between two (q1, q2, T) boundary states."""
    q = max(float(np.max(np.abs(ca[0] - cb[0]))), float(np.max(np.abs(ca[1] - cb[1]))))
    t = float(np.linalg.norm(ca[2][:3, 3] - cb[2][:3, 3]))
    r = geodesic_distance(ca[2][:3, :3], cb[2][:3, :3])
    return max(q, t, r)


@dataclass(frozen=True, eq=False)
class ManipulationTrajectory:
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __eq__(self, other) -> bool:
        return (isinstance(other, ManipulationTrajectory) and len(self.segments) == len(other.segments)
                and all(_seg_equal(a, b) for a, b in zip(self.segments, other.segments)))

    @property
    def transfers(self) -> list[TransferSegment]:
        return [s for s in self.segments if s.is_transfer]

    @property
    def length(self) -> int:
        """Number of transfer segments."""
        return len(self.transfers)

    @property
    def n_typeb(self) -> int:
        return sum(1 for s in self.transfers if s.kind == "typeb")

    @property
    def regrasps(self) -> int:
        return max(0, self.length - 1)

    @property
    def sample_count(self) -> int:
        return sum(len(s) for s in self.segments)

    def start_state(self):
        s = self.segments[0]
        return s.q1[0], s.q2[0], s.pose_at(0)

    def end_state(self):
        s = self.segments[-1]
        return s.q1[-1], s.q2[-1], s.pose_at(len(s) - 1)

    def object_poses(self) -> np.ndarray:
        return np.concatenate([np.asarray(s.poses) for s in self.segments])

    def path_length(self, w: MetricWeights = MetricWeights()) -> float:
        """Sum of composite distances between consecutive samples."""
        total = 0.0
        prev = None
        for seg in self.segments:
            for i in range(len(seg)):
                cur = (seg.q1[i], seg.q2[i], seg.pose_at(i))
                if prev is not None:
                    total += _composite(prev, cur, w)
                prev = cur
        return total


def _composite(a, b, w: MetricWeights) -> float:
    arms = float(np.linalg.norm(a[0] - b[0]) + np.linalg.norm(a[1] - b[1]))
    obj = (w.rot_weight * geodesic_distance(a[2][:3, :3], b[2][:3, :3])
           + w.trans_weight * float(np.linalg.norm(a[2][:3, 3] - b[2][:3, 3])))
    return w.alpha * arms + (1.0 - w.alpha) * obj


def segment_length(seg, w: MetricWeights = MetricWeights()) -> float:
    return ManipulationTrajectory((seg,)).path_length(w)


def _join_transits(a: TransitSegment, b: TransitSegment) -> TransitSegment:
    off = a.s[-1] - b.s[0]
    return TransitSegment(a.pose, np.concatenate([a.q1, b.q1[1:]]), np.concatenate([a.q2, b.q2[1:]]),
                          np.concatenate([a.s, b.s[1:] + off]), dict(a.meta))


def compose(trajs: Sequence[ManipulationTrajectory], tol: float = JUNCTION_TOL) -> ManipulationTrajectory:
    """Concatenate trajectories whose boundary states agree; adjacent transits are merged
    and a one-sample transit separates adjacent transfers."""
    flat = []
    for t in trajs:
        flat.extend(t.segments if isinstance(t, ManipulationTrajectory) else [t])
    out: list = []
    for i, seg in enumerate(flat):
        if out:
            prev = out[-1]
            gap = boundary_gap((prev.q1[-1], prev.q2[-1], prev.pose_at(len(prev) - 1)),
                               (seg.q1[0], seg.q2[0], seg.pose_at(0)))
            if gap > tol:
                raise JunctionError(i - 1, gap)
            if not prev.is_transfer and not seg.is_transfer:
                out[-1] = _join_transits(prev, seg)
                continue
            if prev.is_transfer and seg.is_transfer:
                out.append(TransitSegment(prev.poses[-1], prev.q1[-1:], prev.q2[-1:], [0.0]))
        out.append(seg)
    return ManipulationTrajectory(tuple(out))


@dataclass
class ValidationReport:
    ok: bool = True
    errors: list = field(default_factory=list)
    max_closed_chain_error: float = 0.0

    def fail(self, msg: str):
        self.ok = False
        self.errors.append(msg)


def closed_chain_error(w: World, seg: TransferSegment) -> float:
    """Largest deviation of either gripper from its grasp frame over the segment."""
    G = gripper_offsets(w, seg.grasp)
    worst = 0.0
    e = np.empty(6)
    for i in range(len(seg)):
        for arm, q, Gi in ((w.arms[0], seg.q1[i], G[0]), (w.arms[1], seg.q2[i], G[1])):
            K.pose_error(arm.frames(q)[-1], seg.poses[i] @ Gi, e)
            worst = max(worst, float(np.linalg.norm(e[:3])), float(np.linalg.norm(e[3:])))
    return worst


def validate_trajectory(w: World, traj: ManipulationTrajectory, equilibrium: bool = True,
                        placements: bool = True) -> ValidationReport:
    """Replay every sample: junctions, joint limits, closed-chain constraint, singularity,
    collisions, equilibrium, and stable placement during transits."""
    rep = ValidationReport()
    prev = None
    for si, seg in enumerate(traj.segments):
        if prev is not None:
            gap = boundary_gap((prev.q1[-1], prev.q2[-1], prev.pose_at(len(prev) - 1)),
                               (seg.q1[0], seg.q2[0], seg.pose_at(0)))
            if gap > JUNCTION_TOL:
                rep.fail(f"junction {si - 1}/{si}: gap {gap:.3g}")
        prev = seg
        for arm, Q in ((w.arms[0], seg.q1), (w.arms[1], seg.q2)):
            if np.any(Q < arm.lo - 1e-12) or np.any(Q > arm.hi + 1e-12):
                rep.fail(f"segment {si}: joint limits violated")
        F1 = np.stack([w.arms[0].frames(q) for q in seg.q1])
        F2 = np.stack([w.arms[1].frames(q) for q in seg.q2])
        poses = np.ascontiguousarray(np.asarray(seg.poses))
        if seg.is_transfer:
            err = closed_chain_error(w, seg)
            rep.max_closed_chain_error = max(rep.max_closed_chain_error, err)
            if err > CLOSED_CHAIN_TOL:
                rep.fail(f"segment {si}: closed-chain error {err:.3g}")
            J = np.empty((6, w.arms[0].dof))
            for F, arm in ((F1, w.arms[0]), (F2, w.arms[1])):
                for f in F:
                    K.jacobian_from_frames(f, arm._axes, J)
                    if K.sigma_min(J) < SINGULAR_TOL:
                        rep.fail(f"segment {si}: singular configuration")
                        break
            pairs = w.collision_pairs(seg.grasp.g1.l, seg.grasp.g2.l)
            c = w.first_collision(F1, F2, poses, pairs)
            if c >= 0:
                rep.fail(f"segment {si}: collision at sample {c}")
            if equilibrium and equilibrium_along(w, seg.grasp, poses) >= 0:
                rep.fail(f"segment {si}: static equilibrium fails")
            if placements and seg.kind == "typea":
                cid = seg.meta.get("class_id")
                for P in poses[:: max(1, len(poses) // 20)]:
                    try:
                        pc = classify_placement(w, Transform.from_matrix(P, check=False))
                    except PlacementError as exc:
                        rep.fail(f"segment {si}: {exc}")
                        break
                    if cid is not None and pc.class_id != cid:
                        rep.fail(f"segment {si}: placement class changed")
                        break
        else:
            pairs = w.collision_pairs(None, None)
            c = w.first_collision(F1, F2, poses, pairs)
            if c >= 0:
                rep.fail(f"segment {si}: transit collision at sample {c}")
            if placements:
                try:
                    pc = classify_placement(w, Transform.from_matrix(seg.pose, check=False))
                    if not w.placement_classes[pc.class_id].stable:
                        rep.fail(f"segment {si}: transit placement is not stable")
                except PlacementError as exc:
                    rep.fail(f"segment {si}: {exc}")
    return rep


def composite_configs(traj: ManipulationTrajectory) -> list[CompositeConfig]:
    out = []
    for seg in traj.segments:
        for i in range(len(seg)):
            out.append(CompositeConfig(seg.q1[i], seg.q2[i], Transform.from_matrix(seg.pose_at(i), check=False)))
    return out
