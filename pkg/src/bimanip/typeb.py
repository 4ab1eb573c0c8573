"""Placement-changing transfers: flip queries staged at the manipulation point, a
bidirectional closed-chain RRT over object poses, and closed-chain shortcutting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .grasps import BimanualGrasp, GraspError, candidate_grasps, gripper_clear, validate_bimanual_grasp
from .kinematics import default_steps
from .reachability import _Checker, _label
from .trajectory import ManipulationTrajectory, TransferSegment
from .transforms import Transform, interpolate_pose_path, pose_distance, rot_exp, sample_se3
from .world import (PlacementCoord, PlacementError, World, classify_placement, placement_to_transform)

CONNECT_TOL = 1e-5


class QueryError(RuntimeError):
    def __init__(self, kind: str, msg: str = ""):
        super().__init__(f"{kind}: {msg}" if msg else kind)
        self.kind = kind


@dataclass(frozen=True, eq=False)
class ClosedChainQuery:
    T_start: Transform
    T_goal: Transform
    grasp: BimanualGrasp
    q_start: tuple
    q_goal: tuple
    class_start: int = -1
    class_goal: int = -1
    coord_start: PlacementCoord | None = None
    coord_goal: PlacementCoord | None = None


def flip_geometry(w: World, class_i: int, class_j: int, point, side: int = 1) -> tuple[Transform, Transform]:
    """Start pose at point in class_i, yawed so the outward normal of face j points
    horizontally across the center line toward one arm (side = +1 or -1), and the pose
    after tipping onto face j. The tipping axis is horizontal and parallel to the center
    line; the body turns about its center of mass and is then lowered onto the table, so
    non-adjacent faces work too and the part stays near the manipulation point."""
    pi, pj = w.placement_class(class_i), w.placement_class(class_j)
    n0 = pi.canonical_rotation @ pj.normal
    if np.hypot(n0[0], n0[1]) < 1e-9:
        raise QueryError("NO_FLIP_AXIS", f"faces {class_i} and {class_j} are parallel")
    cl = w.center_line
    across = side * np.array([-cl[1], cl[0]])
    theta = math.atan2(across[1], across[0]) - math.atan2(n0[1], n0[0])
    T0 = placement_to_transform(w, PlacementCoord(class_i, point[0], point[1], theta))
    n = T0.rotation @ pj.normal
    axis = np.cross(n, [0.0, 0.0, -1.0])
    axis /= np.linalg.norm(axis)
    R = rot_exp(axis * math.acos(float(np.clip(-n[2], -1.0, 1.0))))
    verts = T0.apply(w.object.vertices)
    com = T0.apply(np.asarray(w.object.center_of_mass)[None])[0]
    moved = (verts - com) @ R.T + com
    t1 = com + R @ (T0.translation - com)
    t1[2] += verts[:, 2].min() - moved[:, 2].min()
    T1 = Transform(R @ T0.rotation, t1, check=False)
    c1 = classify_placement(w, T1)
    if c1.class_id != class_j:
        raise QueryError("NO_FLIP_AXIS", f"tipping lands in class {c1.class_id}, not {class_j}")
    return T0, placement_to_transform(w, c1)


def _valid_at(w, T, g, chk, classes=(None, None), n_seeds=8, hints=(None, None)):
    if not gripper_clear(w, T.matrix, g):
        return None
    try:
        q1, q2 = validate_bimanual_grasp(w, T, g, n_seeds, hints=hints, want_classes=classes)
    except GraspError:
        return None
    if chk.run(T.matrix[None], q1, q2)[0] < 1:
        return None
    return q1, q2


def generate_cc_query(w: World, class_i: int, class_j: int, manipulation_point=None,
                      rng: np.random.Generator | None = None, deltas=(0.25, 0.5, 0.75),
                      equilibrium: bool = True) -> ClosedChainQuery:
    """Flip query between two placement classes with a grasp valid at both ends, taken
    first in a random order of the candidates (uniform over the valid ones)."""
    if class_i == class_j:
        raise ValueError("a flip query needs two distinct classes")
    rng = rng if rng is not None else np.random.default_rng(0)
    point = w.manipulation_point if manipulation_point is None else np.asarray(manipulation_point, float)
    w.surface_at(point[0], point[1])
    n_seeds = int(w.params.get("ik_seeds", 8))
    cands = [g for d in deltas for g in candidate_grasps(w, d)]
    any_clear = False
    fallback = None
    for side in (1, -1):
        T0, T1 = flip_geometry(w, class_i, class_j, point, side)
        clear = [g for g in cands if gripper_clear(w, T0.matrix, g) and gripper_clear(w, T1.matrix, g)]
        any_clear = any_clear or bool(clear)
        for k in rng.permutation(len(clear)):
            g = clear[k]
            chk = _Checker(w, g, equilibrium)
            s = _valid_at(w, T0, g, chk, n_seeds=n_seeds)
            if s is None:
                continue
            e = _guided_goal(w, T0, T1, g, s, equilibrium)
            if e is not None:
                return ClosedChainQuery(T0, T1, g, s, e, class_i, class_j, classify_placement(w, T0),
                                        classify_placement(w, T1))
            if fallback is None:
                classes = (_label(w.arms[0], s[0]), _label(w.arms[1], s[1]))
                e = (_valid_at(w, T1, g, chk, classes, n_seeds, s)
                     or _valid_at(w, T1, g, chk, n_seeds=n_seeds, hints=s))
                if e is not None:
                    fallback = ClosedChainQuery(T0, T1, g, s, e, class_i, class_j, classify_placement(w, T0),
                                                classify_placement(w, T1))
    if fallback is not None:
        return fallback
    if not any_clear:
        raise QueryError("NO_COMMON_GRASP", f"no grasp clears both placements {class_i} and {class_j}")
    raise QueryError("IK_FAILED", f"no grasp is reachable at both placements {class_i} and {class_j}")


def _guided_goal(w, T0, T1, g, s, equilibrium, lifts=(0.03, 0.08), n_rot=6):
    """Goal joints reached by tracking a lift, tip and lower motion from the start joints,
    which puts both ends on one connected piece of the closed-chain manifold; None when
    no such guide motion is valid."""
    et = _EdgeTracker(w, g, float(w.params.get("check_resolution", 0.01)), equilibrium)
    from .transforms import rot_axis_angle
    axis, angle, _ = rot_axis_angle(T1.rotation @ T0.rotation.T)
    shift = T1.translation - T0.translation
    for lift in lifts:
        for c_off in (0.5, 0.0, 1.0):
            up = np.array([0.0, 0.0, lift])
            c = T0.translation + c_off * np.array([shift[0], shift[1], 0.0]) + up
            seq = [T0, Transform(T0.rotation, T0.translation + up, check=False)]
            for k in range(1, n_rot + 1):
                R = rot_exp(axis * angle * k / n_rot)
                seq.append(Transform(R @ T0.rotation, c + R @ (T0.translation + up - c), check=False))
            seq.append(T1)
            q1, q2 = s
            for a, b in zip(seq[:-1], seq[1:]):
                r = et.track(a, b, q1, q2)
                if r is None:
                    break
                q1, q2 = r[1][-1], r[2][-1]
            else:
                return q1, q2
    return None


# closed-chain RRT

@dataclass
class _Vertex:
    T: Transform
    q1: np.ndarray
    q2: np.ndarray
    parent: int
    edge: tuple | None = field(default=None, repr=False)  # (poses, Q1, Q2) parent -> self


class CCTree:
    def __init__(self, T: Transform, q1, q2):
        self.vertices = [_Vertex(T, np.asarray(q1, float), np.asarray(q2, float), -1)]
        self._R = [T.rotation]
        self._t = [T.translation]

    def add(self, v: _Vertex) -> int:
        self.vertices.append(v)
        self._R.append(v.T.rotation)
        self._t.append(v.T.translation)
        return len(self.vertices) - 1

    def nearest(self, T: Transform, k: int, w) -> list[int]:
        """k nearest vertices under the object part of the composite metric."""
        R = np.array(self._R)
        t = np.array(self._t)
        M = np.einsum("nij,ik->njk", R, T.rotation)
        tr = np.trace(M, axis1=1, axis2=2)
        skew = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)
        ang = np.arctan2(0.5 * np.linalg.norm(skew, axis=1), 0.5 * (tr - 1.0))
        d = w.rot_weight * ang + w.trans_weight * np.linalg.norm(t - T.translation, axis=1)
        order = np.argsort(d, kind="stable")
        return [int(i) for i in order[:k]]

    def path_to_root(self, i: int) -> list[int]:
        out = []
        while i >= 0:
            out.append(i)
            i = self.vertices[i].parent
        return out


def _toward(Ta: Transform, Tb: Transform, step: float, w) -> Transform:
    """Pose at metric distance step from Ta along the geodesic to Tb (Tb when closer)."""
    d = pose_distance(Ta, Tb, w)
    if d <= step:
        return Tb
    f = step / d
    p = interpolate_pose_path(Ta, Tb)
    R = Ta.rotation @ rot_exp(p.axis * (f * p.angle))
    t = Ta.translation + f * (Tb.translation - Ta.translation)
    return Transform(R, t, check=False)


class _EdgeTracker:
    def __init__(self, w: World, g: BimanualGrasp, ds: float, equilibrium: bool):
        self.w = w
        self.chk = _Checker(w, g, equilibrium)
        self.ds = ds

    def poses(self, Ta: Transform, Tb: Transform) -> np.ndarray:
        path = interpolate_pose_path(Ta, Tb)
        n = max(2, default_steps(path, self.w.weights, self.ds))
        return path.sample(np.linspace(0.0, 1.0, n + 1))

    def track(self, Ta: Transform, Tb: Transform, q1, q2):
        P = self.poses(Ta, Tb)
        n_ok, Q1, Q2 = self.chk.run(P, q1, q2)
        if n_ok < len(P):
            return None
        return P, Q1, Q2


def cc_plan(w: World, query: ClosedChainQuery, step_size: float | None = None, k_nn: int | None = None,
            bounds=None, max_iters: int | None = None, rng: np.random.Generator | None = None,
            equilibrium: bool | None = None, stats: dict | None = None) -> ManipulationTrajectory | None:
    """Bidirectional closed-chain RRT; None when max_iters runs out."""
    p = w.params
    step = float(p.get("cc_step_size", 0.15) if step_size is None else step_size)
    k_nn = int(p.get("cc_k_nn", 5) if k_nn is None else k_nn)
    max_iters = int(p.get("cc_max_iters", 2000) if max_iters is None else max_iters)
    equilibrium = bool(p.get("cc_equilibrium", True) if equilibrium is None else equilibrium)
    bounds = w.translation_bounds() if bounds is None else bounds
    rng = rng if rng is not None else np.random.default_rng(0)
    ds = float(p.get("check_resolution", 0.01))
    et = _EdgeTracker(w, query.grasp, ds, equilibrium)
    ta = CCTree(query.T_start, *query.q_start)
    tb = CCTree(query.T_goal, *query.q_goal)
    trees = [ta, tb]
    if stats is not None:
        stats.update(iterations=0, vertices=2)
    if pose_distance(query.T_start, query.T_goal, w.weights) == 0.0 and all(
            np.array_equal(a, b) for a, b in zip(query.q_start, query.q_goal)):
        return _trajectory(query, [(query.T_start.matrix[None], np.asarray(query.q_start[0])[None],
                                    np.asarray(query.q_start[1])[None])])
    for it in range(max_iters):
        if stats is not None:
            stats["iterations"] = it + 1
        a, b = trees[it % 2], trees[(it + 1) % 2]
        if it == 0:
            # a direct join is tried before any sampling
            r = _connect(w, et, a, b, 0, k_nn)
            if r is not None:
                return _extract(query, trees, 0, 0, r[1], r[2], forward=True)
        T_rand = sample_se3(bounds, rng)
        new = _extend(w, et, a, T_rand, step, k_nn)
        if new is None:
            continue
        r = _connect(w, et, a, b, new, k_nn)
        if stats is not None:
            stats["vertices"] = len(ta.vertices) + len(tb.vertices)
        if r is not None:
            j, edge = r[1], r[2]
            return _extract(query, trees, it % 2, new, j, edge, forward=(it % 2 == 0))
    return None


def _extend(w, et, tree, T_rand, step, k_nn):
    for i in tree.nearest(T_rand, k_nn, w.weights):
        v = tree.vertices[i]
        T_new = _toward(v.T, T_rand, step, w.weights)
        e = et.track(v.T, T_new, v.q1, v.q2)
        if e is None:
            continue
        return tree.add(_Vertex(T_new, e[1][-1], e[2][-1], i, e))
    return None


def _connect(w, et, src, dst, i, k_nn):
    """Join src vertex i to one of the k nearest dst vertices; the tracked joints must land
    on the dst vertex's joints within CONNECT_TOL. Returns (i, j, edge) or None."""
    v = src.vertices[i]
    for j in dst.nearest(v.T, k_nn, w.weights):
        u = dst.vertices[j]
        e = et.track(v.T, u.T, v.q1, v.q2)
        if e is None:
            continue
        P, Q1, Q2 = e
        if max(np.max(np.abs(Q1[-1] - u.q1)), np.max(np.abs(Q2[-1] - u.q2))) > CONNECT_TOL:
            continue
        Q1, Q2 = Q1.copy(), Q2.copy()
        Q1[-1], Q2[-1] = u.q1, u.q2
        P = P.copy()
        P[-1] = u.T.matrix
        return i, j, (P, Q1, Q2)
    return None


def _chain(tree: CCTree, i: int):
    """Edges from the root down to vertex i, in order."""
    idx = tree.path_to_root(i)[::-1]
    return [tree.vertices[k].edge for k in idx[1:]]


def _rev(edge):
    return edge[0][::-1], edge[1][::-1], edge[2][::-1]


def _extract(query, trees, a_idx, i, j, edge, forward):
    """Root-to-root edge list; edge joins vertex i of trees[a_idx] to vertex j of the other."""
    a, b = trees[a_idx], trees[1 - a_idx]
    edges = _chain(a, i) + [edge] + [_rev(e) for e in _chain(b, j)[::-1]]
    if not forward:
        edges = [_rev(e) for e in edges[::-1]]
    return _trajectory(query, edges)


def _trajectory(query, edges) -> ManipulationTrajectory:
    P = [edges[0][0]] + [e[0][1:] for e in edges[1:]]
    Q1 = [edges[0][1]] + [e[1][1:] for e in edges[1:]]
    Q2 = [edges[0][2]] + [e[2][1:] for e in edges[1:]]
    knots = np.cumsum([0] + [len(e[0]) - 1 for e in edges]).tolist()
    P, Q1, Q2 = np.concatenate(P), np.concatenate(Q1), np.concatenate(Q2)
    seg = TransferSegment(query.grasp, P, Q1, Q2, np.arange(len(P), dtype=float), "typeb",
                          {"class_pair": [int(query.class_start), int(query.class_goal)], "knots": knots})
    return ManipulationTrajectory((seg,))


def shortcut_cc(w: World, traj: ManipulationTrajectory, iterations: int | None = None,
                rng: np.random.Generator | None = None, equilibrium: bool | None = None) -> ManipulationTrajectory:
    """Random shortcutting of a closed-chain trajectory; a shortcut replaces the stretch
    between two samples when the tracked direct path is valid, lands on the later sample's
    joints and strictly shortens the composite path length."""
    iterations = int(w.params.get("shortcut_iterations", 200) if iterations is None else iterations)
    equilibrium = bool(w.params.get("cc_equilibrium", True) if equilibrium is None else equilibrium)
    rng = rng if rng is not None else np.random.default_rng(0)
    segs = list(traj.segments)
    idx = [k for k, s in enumerate(segs) if s.is_transfer and s.kind == "typeb"]
    if iterations <= 0 or not idx:
        return traj
    k = idx[0]
    seg = segs[k]
    et = _EdgeTracker(w, seg.grasp, float(w.params.get("check_resolution", 0.01)), equilibrium)
    P, Q1, Q2 = np.array(seg.poses), np.array(seg.q1), np.array(seg.q2)
    length = _length(P, Q1, Q2, w.weights)
    for _ in range(iterations):
        n = len(P)
        if n < 3:
            break
        i, j = sorted(rng.choice(n, 2, replace=False))
        if j - i < 2:
            continue
        Ta = Transform.from_matrix(P[i], check=False)
        Tb = Transform.from_matrix(P[j], check=False)
        e = et.track(Ta, Tb, Q1[i], Q2[i])
        if e is None:
            continue
        Pn, Q1n, Q2n = e
        if max(np.max(np.abs(Q1n[-1] - Q1[j])), np.max(np.abs(Q2n[-1] - Q2[j]))) > CONNECT_TOL:
            continue
        Pn, Q1n, Q2n = Pn[:-1], Q1n[:-1], Q2n[:-1]
        cand = (np.concatenate([P[:i], Pn, P[j:]]), np.concatenate([Q1[:i], Q1n, Q1[j:]]),
                np.concatenate([Q2[:i], Q2n, Q2[j:]]))
        L = _length(*cand, w.weights)
        if L < length:
            P, Q1, Q2 = cand
            length = L
    meta = {key: v for key, v in seg.meta.items() if key != "knots"}
    segs[k] = TransferSegment(seg.grasp, P, Q1, Q2, np.arange(len(P), dtype=float), seg.kind,
                              dict(meta, shortcut=iterations))
    return ManipulationTrajectory(tuple(segs))


def _length(P, Q1, Q2, w) -> float:
    dq = np.linalg.norm(np.diff(Q1, axis=0), axis=1) + np.linalg.norm(np.diff(Q2, axis=0), axis=1)
    M = np.einsum("nji,njk->nik", P[:-1, :3, :3], P[1:, :3, :3])
    tr = np.trace(M, axis1=1, axis2=2)
    skew = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)
    ang = np.arctan2(0.5 * np.linalg.norm(skew, axis=1), 0.5 * (tr - 1.0))
    dt = np.linalg.norm(np.diff(P[:, :3, 3], axis=0), axis=1)
    return float(np.sum(w.alpha * dq + (1.0 - w.alpha) * (w.rot_weight * ang + w.trans_weight * dt)))


def plan_flip(w: World, class_i: int, class_j: int, rng: np.random.Generator, retries: int | None = None,
              shortcut: int | None = None, max_iters: int | None = None, deadline: float | None = None):
    """Query generation plus closed-chain planning with perturbed retries; returns
    (trajectory, query) or raises QueryError with the last failure."""
    retries = int(w.params.get("query_retries", 10) if retries is None else retries)
    last = None
    point = np.array(w.manipulation_point, dtype=float)
    for attempt in range(retries + 1):
        if deadline is not None and attempt and time.monotonic() > deadline:
            break
        pt = point
        if attempt:
            r = 0.05 * math.sqrt(rng.random())
            a = 2 * math.pi * rng.random()
            pt = point + r * np.array([math.cos(a), math.sin(a)])
        try:
            q = generate_cc_query(w, class_i, class_j, pt, rng)
        except (QueryError, PlacementError) as exc:
            last = exc
            if getattr(exc, "kind", "") == "NO_FLIP_AXIS":
                break
            continue
        traj = cc_plan(w, q, rng=rng, max_iters=max_iters)
        if traj is None:
            last = QueryError("BUDGET_EXHAUSTED", f"closed-chain search failed for {class_i}->{class_j}")
            if max_iters == 0:
                break
            continue
        return shortcut_cc(w, traj, shortcut, rng), q
    if isinstance(last, QueryError):
        raise last
    raise QueryError("NO_COMMON_GRASP", str(last))
