"""Grasp parameters, grasp classes, gripper poses, bimanual grasp validation and
the static-equilibrium check."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import _kernels as K
from .kinematics import solve_ik
from .transforms import CompositeConfig, Transform, rot_x
from .world import Gripper, ObjectModel, World, check_collision_free

AXES = {1: (0, 1.0), 2: (1, 1.0), 3: (2, 1.0), 4: (0, -1.0), 5: (1, -1.0), 6: (2, -1.0)}
TILTS = (-np.pi / 6, np.pi / 6)
EQUILIBRIUM_TOL = 1e-8


def axis_vector(code: int) -> np.ndarray:
    i, s = AXES[code]
    v = np.zeros(3)
    v[i] = s
    return v


def axis_index(code: int) -> int:
    return AXES[code][0]


class GraspError(RuntimeError):
    """kind is IK_UNREACHABLE (with arm), COLLISION or SINGULAR."""

    def __init__(self, kind: str, arm: int | None = None):
        super().__init__(kind if arm is None else f"{kind} (arm {arm + 1})")
        self.kind = kind
        self.arm = arm


class EquilibriumLPError(RuntimeError):
    pass


@dataclass(frozen=True)
class GraspParams:
    l: int
    a: int
    b: int
    delta: float = 0.5
    tilt: float = 0.0

    def __post_init__(self):
        if self.a not in AXES or self.b not in AXES:
            raise ValueError("axis codes must lie in 1..6")
        if axis_index(self.a) == axis_index(self.b):
            raise ValueError("approach and sliding axes must be orthogonal")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in the open interval (0, 1)")
        if self.l < 0:
            raise ValueError("link index must be nonnegative")
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "tilt", float(self.tilt))

    @property
    def lateral(self) -> int:
        return 3 - axis_index(self.a) - axis_index(self.b)


@dataclass(frozen=True)
class BimanualGrasp:
    g1: GraspParams
    g2: GraspParams

    def __iter__(self):
        return iter((self.g1, self.g2))

    def key(self) -> tuple:
        return (self.g1.l, self.g1.a, self.g1.b, self.g1.delta, self.g1.tilt,
                self.g2.l, self.g2.a, self.g2.b, self.g2.delta, self.g2.tilt)


@dataclass(frozen=True, order=True)
class GraspClassId:
    arm: int
    l: int
    a: int


def grasp_fits(obj: ObjectModel, gripper: Gripper, l: int, a: int, b: int) -> bool:
    """Lateral width inside the stroke and the faces large enough for the pads."""
    if axis_index(a) == axis_index(b):
        return False
    h = obj.links[l].half
    lat = 3 - axis_index(a) - axis_index(b)
    return bool(2 * h[lat] < gripper.stroke and 2 * h[axis_index(a)] >= gripper.pad_length
                and 2 * h[axis_index(b)] >= gripper.pad_width)


def enumerate_grasp_classes(obj: ObjectModel, gripper: Gripper, arm: int = 0) -> list[GraspClassId]:
    out = []
    for l in range(len(obj.links)):
        for a in range(1, 7):
            if any(grasp_fits(obj, gripper, l, a, b) for b in range(1, 7)):
                out.append(GraspClassId(arm, l, a))
    return out


def discretized_grasp_count(obj: ObjectModel, gripper: Gripper, deltas: Sequence[float],
                            tilts: Sequence[float] = (0.0,)) -> int:
    """Number of single-arm grasps (l, a, b, delta, tilt) on the given grids."""
    n = 0
    for l in range(len(obj.links)):
        for a, b in itertools.permutations(range(1, 7), 2):
            if grasp_fits(obj, gripper, l, a, b):
                n += len(deltas) * len(tilts)
    return n


def gripper_in_object(g: GraspParams, obj: ObjectModel, gripper: Gripper) -> np.ndarray:
    """4x4 gripper frame expressed in the object frame."""
    link = obj.links[g.l]
    h = link.half
    za = axis_vector(g.a)
    yb = axis_vector(g.b)
    z = -za
    x = np.cross(yb, z)
    G = np.eye(4)
    G[:3, :3] = np.column_stack([x, yb, z]) @ rot_x(g.tilt)
    ia, ib = axis_index(g.a), axis_index(g.b)
    G[:3, 3] = (za * (h[ia] - 0.5 * gripper.pad_length)
                + yb * (g.delta - 0.5) * (2 * h[ib] - gripper.pad_width))
    return link.frame.matrix @ G


def grasp_to_gripper_pose(object_T: Transform, g: GraspParams, obj: ObjectModel, tilt: float | None = None,
                          gripper: Gripper = Gripper()) -> Transform:
    if tilt is not None:
        g = replace(g, tilt=tilt)
    return Transform.from_matrix(object_T.matrix @ gripper_in_object(g, obj, gripper), check=False)


def gripper_offsets(w: World, grasp: BimanualGrasp) -> tuple[np.ndarray, np.ndarray]:
    return (gripper_in_object(grasp.g1, w.object, w.gripper),
            gripper_in_object(grasp.g2, w.object, w.gripper))


def grippers_disjoint(w: World, grasp: BimanualGrasp) -> bool:
    """The two grippers' boxes do not overlap at their nominal poses."""
    boxes = []
    for G in gripper_offsets(w, grasp):
        for b in w.gripper.body_boxes + w.gripper.finger_boxes:
            M = G @ b.frame.matrix
            boxes.append((M[:3, 3].copy(), np.ascontiguousarray(M[:3, :3]), b.half))
    n = len(boxes) // 2
    for i in range(n):
        for j in range(n, 2 * n):
            if K.obb_overlap(boxes[i][0], boxes[i][1], boxes[i][2], boxes[j][0], boxes[j][1],
                             boxes[j][2], 1e-6):
                return False
    return True


def gripper_clear(w: World, objT: np.ndarray, grasp: BimanualGrasp, reach: bool = True) -> bool:
    """Cheap necessary condition: gripper boxes alone are free of the environment and of
    non-grasped object links, and both grasp points lie within arm reach."""
    owner, fidx, local, halves, tag = w._boxes
    others = [i for i in range(len(owner)) if owner[i] >= 2]
    for arm_i, (g, G) in enumerate(zip(grasp, gripper_offsets(w, grasp))):
        M = objT @ G
        if reach:
            if not w.arms[arm_i].may_reach(M):
                return False
        for b, is_finger in [(b, False) for b in w.gripper.body_boxes] + [(b, True) for b in w.gripper.finger_boxes]:
            B = M @ b.frame.matrix
            c = B[:3, 3].copy()
            R = np.ascontiguousarray(B[:3, :3])
            for k in others:
                if is_finger and owner[k] == 2 and tag[k][1] == g.l:
                    continue
                Lk = objT @ local[k] if owner[k] == 2 else local[k]
                if K.obb_overlap(c, R, b.half, Lk[:3, 3].copy(), np.ascontiguousarray(Lk[:3, :3]),
                                 halves[k], 1e-6):
                    return False
    return True


def candidate_grasps(w: World, delta: float = 0.5) -> list[BimanualGrasp]:
    """All (l, a, b) pairs for the two arms that fit and whose grippers are disjoint."""
    singles = [(l, a, b) for l in range(len(w.object.links))
               for a, b in itertools.permutations(range(1, 7), 2)
               if grasp_fits(w.object, w.gripper, l, a, b)]
    out = []
    for s1 in singles:
        for s2 in singles:
            g = BimanualGrasp(GraspParams(*s1, delta), GraspParams(*s2, delta))
            if grippers_disjoint(w, g):
                out.append(g)
    return out


def validate_bimanual_grasp(w: World, T: Transform, g: BimanualGrasp, n_seeds: int = 8,
                            hints=(None, None), want_classes=(None, None)) -> tuple[np.ndarray, np.ndarray]:
    """IK for both grippers; returns joint vectors giving a collision-free, non-singular
    composite configuration, or raises GraspError."""
    offs = gripper_offsets(w, g)
    sols = []
    for i in range(2):
        target = T.matrix @ offs[i]
        if not w.arms[i].may_reach(target):
            raise GraspError("IK_UNREACHABLE", i)
        stats: dict = {}
        s = solve_ik(w.arms[i], target, n_seeds, q_hint=hints[i], want_class=want_classes[i], stats=stats)
        if not s:
            raise GraspError("SINGULAR" if stats.get("singular") else "IK_UNREACHABLE", i)
        sols.append(s)
    for q1 in sols[0]:
        for q2 in sols[1]:
            if check_collision_free(w, CompositeConfig(q1, q2, T), True, g):
                return q1, q2
    raise GraspError("COLLISION")


def validate_with_tilt(w: World, T: Transform, g: BimanualGrasp, **kw):
    """validate_bimanual_grasp, retrying with tilted grippers when the untilted grasp fails.

    Returns (grasp used, q1, q2)."""
    try:
        return (g, *validate_bimanual_grasp(w, T, g, **kw))
    except GraspError as first:
        err = first
    for t1, t2 in itertools.product((0.0,) + TILTS, repeat=2):
        if t1 == 0.0 and t2 == 0.0:
            continue
        gt = BimanualGrasp(replace(g.g1, tilt=t1), replace(g.g2, tilt=t2))
        try:
            return (gt, *validate_bimanual_grasp(w, T, gt, **kw))
        except GraspError:
            continue
    raise err


# static equilibrium

def pad_contacts(obj: ObjectModel, g: GraspParams, gripper: Gripper) -> list[tuple[np.ndarray, np.ndarray]]:
    """(point, inward normal) pairs in the object frame: 4 corners on each of two pads."""
    G = gripper_in_object(g, obj, gripper)
    link = obj.links[g.l]
    x, y, z, tcp = G[:3, 0], G[:3, 1], G[:3, 2], G[:3, 3]
    h_lat = link.half[g.lateral]
    out = []
    for side in (1.0, -1.0):
        normal = -side * x
        for sz in (-0.5, 0.5):
            for sy in (-0.5, 0.5):
                p = tcp + side * h_lat * x + sz * gripper.pad_length * z + sy * gripper.pad_width * y
                out.append((p, normal))
    return out


def contact_wrench_matrix(obj: ObjectModel, grasp: BimanualGrasp, gripper: Gripper, mu: float,
                          cone_edges: int) -> np.ndarray:
    """Columns are unit-normal friction-cone edge wrenches [f; p x f] in the object frame."""
    cols = []
    phis = 2 * np.pi * np.arange(cone_edges) / cone_edges
    for g in grasp:
        for p, n in pad_contacts(obj, g, gripper):
            t1 = np.cross(n, [1.0, 0.0, 0.0])
            if np.linalg.norm(t1) < 1e-6:
                t1 = np.cross(n, [0.0, 1.0, 0.0])
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(n, t1)
            for ph in phis:
                f = n + mu * (np.cos(ph) * t1 + np.sin(ph) * t2)
                cols.append(np.concatenate([f, np.cross(p, f)]))
    return np.array(cols).T


def gravity_wrench(obj: ObjectModel, T: Transform | np.ndarray, gravity) -> np.ndarray:
    R = (T.matrix if isinstance(T, Transform) else T)[:3, :3]
    f = obj.mass * (R.T @ np.asarray(gravity, dtype=float))
    return np.concatenate([f, np.cross(obj.center_of_mass, f)])


def lp_feasible(A: np.ndarray, b: np.ndarray) -> bool:
    """x >= 0 with A x = b, decided by the phase-1 simplex and confirmed by residual."""
    if not np.any(b):
        return True
    scale = float(np.max(np.abs(b)))
    status, x, obj = K.simplex_phase1(np.ascontiguousarray(A), np.ascontiguousarray(b / scale), 1e-11, 5000)
    if status == K.LP_FAILED:
        raise EquilibriumLPError("phase-1 simplex did not terminate")
    return bool(np.linalg.norm(A @ (x * scale) - b) <= EQUILIBRIUM_TOL)


_WRENCH_CACHE: dict = {}


def _wrenches(obj, g, gripper, mu, cone_edges):
    key = (id(obj), g.key(), gripper, mu, cone_edges)
    A = _WRENCH_CACHE.get(key)
    if A is None:
        A = contact_wrench_matrix(obj, g, gripper, mu, cone_edges)
        if len(_WRENCH_CACHE) > 4096:
            _WRENCH_CACHE.clear()
        _WRENCH_CACHE[key] = A
    return A


def check_static_equilibrium(obj: ObjectModel, T: Transform, g: BimanualGrasp, mu: float, cone_edges: int = 8,
                             gravity=(0.0, 0.0, -9.81), gripper: Gripper = Gripper()) -> bool:
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if cone_edges < 3:
        raise ValueError("need at least three cone edges")
    A = _wrenches(obj, g, gripper, mu, cone_edges)
    return lp_feasible(A, -gravity_wrench(obj, T, gravity))


def equilibrium_along(w: World, g: BimanualGrasp, poses: np.ndarray) -> int:
    """Index of the first pose where equilibrium fails, or -1."""
    if not np.any(w.gravity):
        return -1
    A = _wrenches(w.object, g, w.gripper, w.mu, w.cone_edges)
    # gravity in the object frame for every pose at once
    gdir = np.einsum("nji,j->ni", np.asarray(poses)[:, :3, :3], w.gravity)
    F = w.object.mass * gdir
    W = -np.concatenate([F, np.cross(w.object.center_of_mass, F)], axis=1)
    i = K.first_unbalanced(np.ascontiguousarray(A), W, gdir, 1e-11, EQUILIBRIUM_TOL, 5000)
    if i == -2:
        raise EquilibriumLPError("phase-1 simplex did not terminate")
    return int(i)


class GraspFinder:
    """Searches a fixed grasp set for one that validates at a given object pose.

    Remembers the last successful grasp and per-grasp joint solutions so that
    neighbouring poses are usually settled by a single warm-started Newton solve.
    """

    def __init__(self, w: World, deltas: Sequence[float] = (0.25, 0.5, 0.75), n_seeds: int = 8,
                 combos: Sequence[BimanualGrasp] | None = None):
        self.w = w
        self.n_seeds = n_seeds
        if combos is None:
            singles = [GraspParams(l, a, b, d) for l in range(len(w.object.links))
                       for a, b in itertools.permutations(range(1, 7), 2)
                       if grasp_fits(w.object, w.gripper, l, a, b) for d in deltas]
            self.singles = singles
            pairs = [(i, j) for i in range(len(singles)) for j in range(len(singles))
                     if grippers_disjoint(w, BimanualGrasp(singles[i], singles[j]))]
        else:
            singles = sorted({g for c in combos for g in c}, key=lambda g: (g.l, g.a, g.b, g.delta, g.tilt))
            index = {g: i for i, g in enumerate(singles)}
            self.singles = singles
            pairs = [(index[c.g1], index[c.g2]) for c in combos]
        self.pairs = pairs
        self.recent: list[int] = []
        self.hints: list[dict] = [{}, {}]
        # gripper boxes in the object frame, grouped by single grasp
        gboxes = [(b, False) for b in w.gripper.body_boxes] + [(b, True) for b in w.gripper.finger_boxes]
        mats, halves, group, skip = [], [], [], []
        for si, g in enumerate(singles):
            G = gripper_in_object(g, w.object, w.gripper)
            for b, finger in gboxes:
                mats.append(G @ b.frame.matrix)
                halves.append(b.half)
                group.append(si)
                skip.append(g.l if finger else -2)
        self._gm = np.stack(mats)
        self._gh = np.ascontiguousarray(np.stack(halves))
        self._gg = np.array(group, dtype=np.int64)
        self._gs = np.array(skip, dtype=np.int64)
        self._offsets = np.stack([gripper_in_object(g, w.object, w.gripper) for g in singles])
        owner, _, local, bh, tag = w._boxes
        st = [i for i in range(len(owner)) if owner[i] == 3]
        ob = [i for i in range(len(owner)) if owner[i] == 2]
        self._static = (local[st], np.ascontiguousarray(bh[st]))
        self._obj = (local[ob], np.ascontiguousarray(bh[ob]), np.array([tag[i][1] for i in ob], dtype=np.int64))

    def clear_singles(self, objT: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per single grasp: gripper boxes free of the environment and other links, and
        the wrist within each arm's reach."""
        A = np.ascontiguousarray(objT @ self._gm)
        sm, sh = self._static
        om, oh, ot = self._obj
        Bm = np.ascontiguousarray(np.concatenate([sm, objT @ om]))
        Bh = np.ascontiguousarray(np.concatenate([sh, oh]))
        Bt = np.concatenate([np.full(len(sm), -1, dtype=np.int64), ot])
        free = K.group_clear(A, self._gh, self._gg, self._gs, len(self.singles), Bm, Bh, Bt, 1e-6)
        targets = objT @ self._offsets
        reach = [np.array([free[i] and arm.may_reach(targets[i]) for i in range(len(self.singles))])
                 for arm in self.w.arms]
        return reach[0], reach[1]

    def _ik(self, arm_i: int, si: int, target: np.ndarray, cache: dict, full: bool = False):
        key = (si, full)
        if key in cache:
            return cache[key]
        arm = self.w.arms[arm_i]
        hint = self.hints[arm_i].get(si)
        sols = []
        if hint is not None and not full:
            sols = solve_ik(arm, target, 0, q_hint=hint, first_only=True)
        if not sols:
            sols = solve_ik(arm, target, self.n_seeds, first_only=not full)
        cache[key] = sols
        return sols

    def find(self, objT: np.ndarray, order: Sequence[int] | None = None):
        """First (grasp, q1, q2) that validates at objT, or None."""
        w = self.w
        T = Transform.from_matrix(objT, check=False)
        ok1, ok2 = self.clear_singles(objT)
        targets = objT @ self._offsets
        cache1: dict = {}
        cache2: dict = {}
        idx = list(order) if order is not None else list(range(len(self.pairs)))
        if order is None and self.recent:
            seen = set(self.recent)
            idx = self.recent + [i for i in idx if i not in seen]
        for pi in idx:
            i, j = self.pairs[pi]
            if not (ok1[i] and ok2[j]):
                continue
            s1 = self._ik(0, i, targets[i], cache1)
            if not s1:
                continue
            s2 = self._ik(1, j, targets[j], cache2)
            if not s2:
                continue
            g = BimanualGrasp(self.singles[i], self.singles[j])
            for full in (False, True):
                if full:
                    s1 = self._ik(0, i, targets[i], cache1, True)
                    s2 = self._ik(1, j, targets[j], cache2, True)
                for q1 in s1:
                    for q2 in s2:
                        if check_collision_free(w, CompositeConfig(q1, q2, T), True, g):
                            if pi in self.recent:
                                self.recent.remove(pi)
                            self.recent.insert(0, pi)
                            self.hints[0][i] = q1
                            self.hints[1][j] = q2
                            return g, q1, q2
        return None
