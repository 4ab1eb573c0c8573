"""In-placement planning: object paths over the placement grid, grasp coverage covers
built from a low-discrepancy grasp enumeration, and regrasp transit motions."""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from . import _kernels as K
from .grasps import BimanualGrasp, GraspParams, candidate_grasps, gripper_clear
from .kinematics import track_poses
from .reachability import CoverageInterval, PlacementGrid, _Checker, path_grasp_coverage
from .trajectory import ManipulationTrajectory, TransferSegment, TransitSegment, compose
from .world import PlacementCoord, World, placement_matrices

THETA_WEIGHT = 0.1
OVERLAP_MIN = 1e-3
RETREAT = 0.05


class PlanningError(RuntimeError):
    """kind names the failure (DIFFERENT_COMPONENTS, CELL_INFEASIBLE, BUDGET_EXHAUSTED,
    TRANSIT_FAILED, ...); detail carries extra context such as a handover parameter."""

    def __init__(self, kind: str, msg: str = "", detail=None):
        super().__init__(f"{kind}: {msg}" if msg else kind)
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True, eq=False)
class ObjectPath:
    """Piecewise-linear path in (x, y, theta) with theta unwrapped, parameterized over
    [0, 1] by arclength with theta weighted THETA_WEIGHT meters per radian."""

    class_id: int
    waypoints: np.ndarray
    world: World = field(repr=False, default=None)

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float).reshape(-1, 3)
        wp.flags.writeable = False
        object.__setattr__(self, "waypoints", wp)

    @cached_property
    def knots(self) -> np.ndarray:
        d = np.diff(self.waypoints, axis=0)
        seg = np.hypot(d[:, 0], d[:, 1]) + THETA_WEIGHT * np.abs(d[:, 2])
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        return cum / cum[-1] if cum[-1] > 0 else np.zeros_like(cum)

    @property
    def metric_length(self) -> float:
        d = np.diff(self.waypoints, axis=0)
        return float(np.sum(np.hypot(d[:, 0], d[:, 1]) + THETA_WEIGHT * np.abs(d[:, 2])))

    def xyt(self, s) -> np.ndarray:
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), 0.0, 1.0)
        if len(self.waypoints) == 1 or self.knots[-1] == 0:
            return np.repeat(self.waypoints[:1], len(s), axis=0)
        k = self.knots
        idx = np.clip(np.searchsorted(k, s, side="right") - 1, 0, len(k) - 2)
        span = k[idx + 1] - k[idx]
        u = np.where(span > 0, (s - k[idx]) / np.where(span > 0, span, 1.0), 0.0)
        out = self.waypoints[idx] + u[:, None] * (self.waypoints[idx + 1] - self.waypoints[idx])
        out[s >= 1.0] = self.waypoints[-1]
        return out

    def poses(self, s) -> np.ndarray:
        return placement_matrices(self.world, self.class_id, self.xyt(s))

    def coord(self, s: float) -> PlacementCoord:
        x, y, t = self.xyt([s])[0]
        return PlacementCoord(self.class_id, x, y, t)


def _neighbors(cell, shape):
    i, j, k = cell
    nx, ny, nt = shape
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        a, b = i + di, j + dj
        if 0 <= a < nx and 0 <= b < ny:
            yield (a, b, k)
    if nt > 1:
        yield (i, j, (k + 1) % nt)
        yield (i, j, (k - 1) % nt)


def _segment_clear(grid: PlacementGrid, p, q, label) -> bool:
    dx, dy, dt = grid.resolution
    n = int(math.ceil(max(abs(q[0] - p[0]) / (0.25 * dx), abs(q[1] - p[1]) / (0.25 * dy),
                          abs(q[2] - p[2]) / (0.25 * dt), 1)))
    for u in np.linspace(0.0, 1.0, n + 1):
        x, y, t = p + u * (q - p)
        try:
            c = grid.cell_of(x, y, t)
        except ValueError:
            return False
        if grid.labels[c] != label:
            return False
    return True


def plan_object_path(w: World, grid: PlacementGrid, p_start: PlacementCoord, p_goal: PlacementCoord) -> ObjectPath:
    """A* over the 6-connected periodic lattice, then greedy line-of-sight shortcutting."""
    if p_start.class_id != grid.class_id or p_goal.class_id != grid.class_id:
        raise PlanningError("CLASS_MISMATCH", "coords are not in the grid's placement class")
    try:
        cs = grid.cell_of(p_start.x, p_start.y, p_start.theta)
        cg = grid.cell_of(p_goal.x, p_goal.y, p_goal.theta)
    except ValueError as exc:
        raise PlanningError("CELL_INFEASIBLE", str(exc)) from None
    for c in (cs, cg):
        if not grid.occupancy[c]:
            raise PlanningError("CELL_INFEASIBLE", f"cell {c} is not reachable")
    if grid.labels[cs] != grid.labels[cg]:
        raise PlanningError("DIFFERENT_COMPONENTS", "start and goal lie in different components")
    start = np.array([p_start.x, p_start.y, p_start.theta])
    if (p_start.x, p_start.y, p_start.theta) == (p_goal.x, p_goal.y, p_goal.theta):
        return ObjectPath(grid.class_id, start[None], w)
    nt = grid.shape[2]

    def h(c):
        dk = abs(c[2] - cg[2])
        return abs(c[0] - cg[0]) + abs(c[1] - cg[1]) + min(dk, nt - dk)

    openh = [(h(cs), 0, cs)]
    came = {cs: None}
    gcost = {cs: 0}
    while openh:
        f, g, c = heapq.heappop(openh)
        if c == cg:
            break
        if g > gcost[c]:
            continue
        for nb in _neighbors(c, grid.shape):
            if not grid.occupancy[nb]:
                continue
            ng = g + 1
            if ng < gcost.get(nb, 1 << 60):
                gcost[nb] = ng
                came[nb] = c
                heapq.heappush(openh, (ng + h(nb), ng, nb))
    cells = [cg]
    while came[cells[-1]] is not None:
        cells.append(came[cells[-1]])
    cells.reverse()
    pts = [start]
    theta = p_start.theta
    prev_k = cells[0][2]
    for c in cells[1:-1]:
        theta += _wrap((c[2] - prev_k) * grid.resolution[2])
        prev_k = c[2]
        x, y, _ = grid.coord(c)
        pts.append(np.array([x, y, theta]))
    last = cells[-1] if len(cells) > 1 else cells[0]
    theta += _wrap((last[2] - prev_k) * grid.resolution[2])
    goal = np.array([p_goal.x, p_goal.y, theta + _wrap(p_goal.theta - theta)])
    pts.append(goal)
    label = grid.labels[cs]
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _segment_clear(grid, pts[i], pts[j], label):
            j -= 1
        out.append(pts[j])
        i = j
    return ObjectPath(grid.class_id, np.array(out), w)


def _wrap(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


def check_cover(sigma, intervals: Sequence[CoverageInterval], overlap_min: float = OVERLAP_MIN) -> bool:
    return select_cover(intervals, overlap_min) is not None


def select_cover(intervals: Sequence[CoverageInterval], overlap_min: float = OVERLAP_MIN):
    """Greedy farthest-reach chain of intervals from 0 to 1 with strict junction overlaps,
    or None when no cover exists."""
    ivs = list(intervals)
    first = [iv for iv in ivs if iv.a <= 0.0]
    if not first:
        return None
    cur = max(first, key=lambda iv: iv.b)
    chain = [cur]
    while cur.b < 1.0:
        nxt = [iv for iv in ivs if iv.a <= cur.b - overlap_min and iv.b > cur.b]
        if not nxt:
            return None
        cur = max(nxt, key=lambda iv: iv.b)
        chain.append(cur)
    return chain


class GraspEnumeration:
    """Element j pairs grasp combo j mod C with Halton point j div C (bases 2 and 3,
    index 0 skipped) as the two sliding offsets."""

    def __init__(self, combos: Sequence[BimanualGrasp]):
        if not combos:
            raise ValueError("no grasp combos to enumerate")
        self.combos = list(combos)
        self._pts = np.empty((0, 2))

    def halton(self, i: int) -> np.ndarray:
        if i >= len(self._pts):
            n = max(2 * i + 2, 64)
            self._pts = qmc.Halton(d=2, scramble=False).random(n + 1)[1:]
        return self._pts[i]

    def __getitem__(self, j: int) -> BimanualGrasp:
        c = self.combos[j % len(self.combos)]
        d1, d2 = self.halton(j // len(self.combos))
        return BimanualGrasp(GraspParams(c.g1.l, c.g1.a, c.g1.b, d1), GraspParams(c.g2.l, c.g2.a, c.g2.b, d2))


def combos_for_path(w: World, sigma: ObjectPath, n_probe: int = 5) -> list[BimanualGrasp]:
    """Grasp combos whose grippers clear the environment somewhere along sigma, most
    often-clear first."""
    probes = sigma.poses(np.linspace(0.0, 1.0, n_probe))
    scored = []
    for i, c in enumerate(candidate_grasps(w)):
        score = sum(gripper_clear(w, P, c) for P in probes)
        if score:
            scored.append((-score, i, c))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [c for _, _, c in scored]


def _segment_grid(a: float, b: float, ds: float) -> np.ndarray:
    n = max(1, int(math.ceil((b - a) / ds - 1e-9)))
    return np.linspace(a, b, n + 1)


def _track_interval(w: World, chk: _Checker, sigma: ObjectPath, iv: CoverageInterval, t0: float, t1: float,
                    ds: float):
    """Joint trajectories along sigma over [t0, t1] under the interval's grasp, anchored at
    its stored samples. Returns (s, poses, q1, q2) or None."""
    q1, q2 = iv.q_at(t0)
    k = max(0, min(int(np.searchsorted(iv.s, t0, side="right")) - 1, len(iv.s) - 1))
    s_anchor = iv.s[k]
    pre = np.array([s_anchor, t0]) if s_anchor != t0 else np.array([t0])
    if len(pre) == 2:
        P = sigma.poses(pre)
        n_ok, Q1, Q2 = chk.run(P, q1, q2)
        if n_ok < 2:
            return None
        q1, q2 = Q1[-1], Q2[-1]
    S = _segment_grid(t0, t1, ds)
    P = sigma.poses(S)
    n_ok, Q1, Q2 = chk.run(P, q1, q2)
    if n_ok < len(S):
        return None
    return S, P, Q1, Q2


def plan_typea(w: World, sigma: ObjectPath, budget: int | None = None, start_config=None, end_config=None,
               rng: np.random.Generator | None = None, time_cap: float | None = None,
               combos: Sequence[BimanualGrasp] | None = None, equilibrium: bool = True,
               transit_budget: int | None = None) -> ManipulationTrajectory:
    """Cover sigma with grasp coverage intervals, then stitch transfer segments with
    regrasp transits. start_config / end_config are optional (q1, q2) pairs the
    trajectory must begin / end at (connected by transits)."""
    p = w.params
    budget = int(p.get("typea_budget", 512) if budget is None else budget)
    ds = float(p.get("ds", 0.005))
    rng = rng if rng is not None else np.random.default_rng(0)
    deadline = time.monotonic() + time_cap if time_cap else None
    if combos is None:
        combos = combos_for_path(w, sigma)
    if not combos:
        raise PlanningError("BUDGET_EXHAUSTED", "no grasp clears the environment along the path")
    enum = GraspEnumeration(combos)
    found: list[CoverageInterval] = []
    chain = None
    for j in range(budget):
        if deadline and time.monotonic() > deadline:
            break
        found.extend(path_grasp_coverage(w, sigma, enum[j], ds=ds, equilibrium=equilibrium))
        chain = select_cover(found)
        if chain is not None:
            break
    if chain is None:
        raise PlanningError("BUDGET_EXHAUSTED", f"no cover after {budget} grasp elements")
    segs = _stitch(w, sigma, chain, ds, equilibrium)
    out = []
    tb = transit_budget
    if start_config is not None:
        first = segs[0]
        out.append(plan_transit(w, first.poses[0], start_config, (first.q1[0], first.q2[0]), rng, tb))
    for i, seg in enumerate(segs):
        if i > 0:
            prev = segs[i - 1]
            try:
                out.append(plan_transit(w, seg.poses[0], (prev.q1[-1], prev.q2[-1]), (seg.q1[0], seg.q2[0]), rng, tb))
            except PlanningError as exc:
                raise PlanningError("TRANSIT_FAILED", f"regrasp at t={seg.meta['t0']:.4f}",
                                    seg.meta["t0"]) from exc
        out.append(seg)
    if end_config is not None:
        last = segs[-1]
        out.append(plan_transit(w, last.poses[-1], (last.q1[-1], last.q2[-1]), end_config, rng, tb))
    return compose([ManipulationTrajectory(tuple(out))])


def _stitch(w, sigma, chain, ds, equilibrium):
    """Transfer segments for a cover chain with handovers at overlap midpoints; other
    points of the overlap are tried when the midpoint fails the re-check."""
    checkers = [_Checker(w, iv.grasp, equilibrium) for iv in chain]
    n = len(chain)
    segs = []
    t0 = 0.0
    for k in range(n):
        iv = chain[k]
        if k < n - 1:
            lo, hi = max(chain[k + 1].a, t0), chain[k].b
            tries = [lo + f * (hi - lo) for f in (0.5, 0.25, 0.75, 0.1, 0.9)]
        else:
            tries = [1.0]
        res = None
        for t1 in tries:
            if t1 <= t0 and len(sigma.waypoints) > 1 and k < n - 1:
                continue
            r = _track_interval(w, checkers[k], sigma, iv, t0, t1, ds)
            if r is None:
                continue
            if k < n - 1:
                nxt = _track_interval(w, checkers[k + 1], sigma, chain[k + 1], t1, min(1.0, t1 + ds), ds)
                if nxt is None:
                    continue
            res = (t1, r)
            break
        if res is None:
            raise PlanningError("TRANSIT_FAILED", f"no valid handover inside ({tries[0]:.4f})", tries[0])
        t1, (S, P, Q1, Q2) = res
        segs.append(TransferSegment(iv.grasp, P, Q1, Q2, S - S[0], "typea",
                                    {"class_id": sigma.class_id, "t0": float(t0), "t1": float(t1),
                                     "interval": [float(iv.a), float(iv.b)],
                                     "ik_class_pair": [int(k) for k in iv.ik_class_pair]}))
        t0 = t1
    return segs


# transit motions

class _TransitSpace:
    def __init__(self, w: World, objT: np.ndarray, fixed: tuple, moving: tuple, pairs: np.ndarray):
        self.w = w
        self.objT = np.ascontiguousarray(objT)
        self.fixed = fixed
        self.moving = moving
        self.pairs = pairs
        self.lo = np.concatenate([w.arms[i].lo for i in moving])
        self.hi = np.concatenate([w.arms[i].hi for i in moving])
        self._static_frames = [w.arms[i].frames(fixed[i]) for i in range(2)]

    def split(self, x):
        qs = list(self.fixed)
        off = 0
        for i in self.moving:
            n = self.w.arms[i].dof
            qs[i] = x[off:off + n]
            off += n
        return qs

    def free_path(self, X: np.ndarray) -> bool:
        F = [np.empty((len(X), self.w.arms[i].dof + 2, 4, 4)) for i in range(2)]
        for i in range(2):
            if i not in self.moving:
                F[i][:] = self._static_frames[i]
        for k, x in enumerate(X):
            qs = self.split(x)
            for i in self.moving:
                F[i][k] = self.w.arms[i].frames(qs[i])
        objs = np.broadcast_to(self.objT, (len(X), 4, 4))
        return self.w.first_collision(F[0], F[1], np.ascontiguousarray(objs), self.pairs) < 0

    def edge(self, a, b, res: float = 0.03) -> np.ndarray:
        n = max(1, int(math.ceil(float(np.max(np.abs(b - a))) / res)))
        return a[None, :] + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)[None, :]


def _retreat(w: World, arm_i: int, q, dist: float):
    """Straight-line gripper retreat along its approach axis; returns the joint samples."""
    arm = w.arms[arm_i]
    T0 = arm.frames(q)[-1]
    if dist == 0.0:
        return np.asarray(q, dtype=float)[None]
    n = 10
    targets = np.repeat(T0[None], n + 1, axis=0)
    for k in range(n + 1):
        targets[k, :3, 3] = T0[:3, 3] - (dist * k / n) * T0[:3, 2]
    st, step, Q, F = track_poses(arm, q, targets)
    if st != K.TRACK_OK:
        return None
    return Q


def _retreat_any(w: World, arm_i: int, q, free=None):
    """Longest of a few retreat distances that tracks cleanly and passes free(Q)."""
    for d in (RETREAT, 0.6 * RETREAT, 0.3 * RETREAT, 0.0):
        Q = _retreat(w, arm_i, q, d)
        if Q is not None and (free is None or free(Q)):
            return Q
    return None


def rrt_connect(space: _TransitSpace, a: np.ndarray, b: np.ndarray, rng: np.random.Generator,
                iters: int, step: float = 0.3):
    """Bidirectional RRT with greedy connection in the joint space of the moving arms."""
    trees = [([a], [-1]), ([b], [-1])]
    if space.free_path(space.edge(a, b)):
        return [a, b]
    for it in range(iters):
        x = space.lo + (space.hi - space.lo) * rng.random(len(a))
        ta, tb = trees[it % 2], trees[(it + 1) % 2]
        new = _extend(space, ta, x, step)
        if new is None:
            continue
        # connect the other tree greedily toward the new vertex
        target = ta[0][new]
        while True:
            j = _extend(space, tb, target, step)
            if j is None:
                break
            if np.max(np.abs(tb[0][j] - target)) < 1e-12:
                pa = _trace(ta, new)
                pb = _trace(tb, j)
                path = pa[::-1] + pb[1:]
                return path if it % 2 == 0 else path[::-1]
    return None


def _extend(space, tree, x, step):
    verts, parents = tree
    V = np.array(verts)
    d = np.max(np.abs(V - x[None, :]), axis=1)
    i = int(np.argmin(d))
    near = verts[i]
    if d[i] < 1e-12:
        return None
    new = x if d[i] <= step else near + (x - near) * (step / d[i])
    if not space.free_path(space.edge(near, new)):
        return None
    verts.append(new)
    parents.append(i)
    return len(verts) - 1


def _trace(tree, i):
    verts, parents = tree
    out = []
    while i >= 0:
        out.append(verts[i])
        i = parents[i]
    return out


def _smooth(space, path, rng, iters=60):
    path = list(path)
    for _ in range(iters):
        if len(path) < 3:
            break
        i, j = sorted(rng.choice(len(path), 2, replace=False))
        if j - i < 2:
            continue
        if space.free_path(space.edge(path[i], path[j])):
            path = path[:i + 1] + path[j:]
    return path


def plan_transit(w: World, objT: np.ndarray, c_from, c_to, rng: np.random.Generator | None = None,
                 budget: int | None = None) -> TransitSegment:
    """Arm motion with the object resting at objT: each moving gripper retreats along its
    approach axis, a bidirectional RRT connects, then it approaches the new grasp. Arms
    move one at a time (both orders tried) before a joint search is attempted."""
    rng = rng if rng is not None else np.random.default_rng(0)
    budget = int(w.params.get("transit_budget", 3000) if budget is None else budget)
    objT = np.asarray(objT.matrix if hasattr(objT, "matrix") else objT, dtype=float)
    qf = (np.asarray(c_from[0], dtype=float), np.asarray(c_from[1], dtype=float))
    qt = (np.asarray(c_to[0], dtype=float), np.asarray(c_to[1], dtype=float))
    pairs = w.collision_pairs(None, None)
    for name, (a, b) in (("start", qf), ("goal", qt)):
        if not (w.arms[0].within_limits(a) and w.arms[1].within_limits(b)):
            raise PlanningError("PRECONDITION", f"transit {name} configuration violates joint limits")
        if w.first_collision(w.arms[0].frames(a)[None], w.arms[1].frames(b)[None], objT[None], pairs) >= 0:
            raise PlanningError("PRECONDITION", f"transit {name} configuration is in collision")
    moving = tuple(i for i in range(2) if np.max(np.abs(qf[i] - qt[i])) > 1e-12)
    if not moving:
        return TransitSegment(objT, qf[0][None], qf[1][None], [0.0])
    plans = [tuple((i,) for i in order) for order in (moving, moving[::-1])] if len(moving) == 2 else []
    plans.append((moving,))
    last = None
    for plan in plans:
        try:
            cur = list(qf)
            parts = []
            for group in plan:
                nxt = [qt[i] if i in group else cur[i] for i in range(2)]
                parts.append(_transit_group(w, objT, tuple(cur), tuple(nxt), group, rng, budget))
                cur = nxt
        except PlanningError as exc:
            last = exc
            continue
        q1 = np.concatenate([parts[0][0]] + [p[0][1:] for p in parts[1:]])
        q2 = np.concatenate([parts[0][1]] + [p[1][1:] for p in parts[1:]])
        return TransitSegment(objT, q1, q2, np.arange(len(q1), dtype=float))
    raise last


def _transit_group(w: World, objT, qf, qt, moving, rng, budget):
    # open fingers clear the object, so transits are checked without exemptions
    pairs = w.collision_pairs(None, None)
    pre, post = [], []
    for i in moving:
        r = _retreat_any(w, i, qf[i], _TransitSpace(w, objT, tuple(qf), (i,), pairs).free_path)
        a = _retreat_any(w, i, qt[i], _TransitSpace(w, objT, tuple(qt), (i,), pairs).free_path)
        if r is None or a is None:
            raise PlanningError("TRANSIT_FAILED", "gripper cannot retreat along its approach axis")
        pre.append(r)
        post.append(a[::-1])

    def stack(parts, pad_end):
        n = max(len(p) for p in parts)
        X = np.empty((n, sum(w.arms[i].dof for i in moving)))
        off = 0
        for p, i in zip(parts, moving):
            fill = np.repeat(p[-1:] if pad_end else p[:1], n - len(p), axis=0)
            X[:, off:off + w.arms[i].dof] = np.concatenate([p, fill] if pad_end else [fill, p])
            off += w.arms[i].dof
        return X

    X_pre = stack(pre, True)
    X_post = stack(post, False)
    sp = _TransitSpace(w, objT, tuple(qf), moving, pairs)
    if not sp.free_path(X_pre) or not sp.free_path(X_post):
        raise PlanningError("TRANSIT_FAILED", "retreat or approach motion collides")
    path = rrt_connect(sp, X_pre[-1], X_post[0], rng, budget)
    if path is None:
        raise PlanningError("BUDGET_EXHAUSTED", "transit search exhausted its budget")
    path = _smooth(sp, path, rng)
    mids = [X_pre]
    for u, v in zip(path[:-1], path[1:]):
        mids.append(sp.edge(u, v)[1:])
    mids.append(X_post[1:])
    X = np.concatenate(mids)
    q1 = np.repeat(qf[0][None], len(X), axis=0)
    q2 = np.repeat(qf[1][None], len(X), axis=0)
    off = 0
    for i in moving:
        n = w.arms[i].dof
        (q1 if i == 0 else q2)[:] = X[:, off:off + n]
        off += n
    q1[0], q2[0] = qf[0], qf[1]
    q1[-1], q2[-1] = qt[0], qt[1]
    return q1, q2
