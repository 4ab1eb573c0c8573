"""Certificates: a spanning set of placement-changing transfers over the reachable
placement classes, and query solving by chaining them with in-placement plans."""

from __future__ import annotations

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .reachability import PlacementGrid, analyze_placement_connectivity
from .trajectory import ManipulationTrajectory, compose, validate_trajectory
from .transforms import Transform
from .typea import PlanningError, plan_object_path, plan_transit, plan_typea
from .typeb import QueryError, plan_flip
from .world import PlacementCoord, PlacementError, World, classify_placement, placement_to_transform

log = logging.getLogger(__name__)

Node = tuple  # (class id, component label)


class CertificateError(RuntimeError):
    def __init__(self, kind: str, msg: str = "", detail=None):
        super().__init__(f"{kind}: {msg}" if msg else kind)
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True, eq=False)
class CertEntry:
    """One stored placement-changing transfer from node a to node b."""

    a: Node
    b: Node
    start: PlacementCoord
    goal: PlacementCoord
    trajectory: ManipulationTrajectory

    @property
    def classes(self) -> tuple[int, int]:
        return self.a[0], self.b[0]

    def oriented(self, src: Node) -> tuple[ManipulationTrajectory, PlacementCoord, PlacementCoord]:
        """Trajectory with its entry and exit coords when traversed from src."""
        if src == self.a:
            return self.trajectory, self.start, self.goal
        segs = tuple(s.reversed() for s in reversed(self.trajectory.segments))
        return ManipulationTrajectory(segs), self.goal, self.start


@dataclass(eq=False)
class Certificate:
    fingerprint: str
    nodes: list
    entries: list = field(default_factory=list)
    unreachable: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def edges(self) -> dict:
        """Adjacency: node -> sorted list of (neighbor, entry index)."""
        adj = {n: [] for n in self.nodes}
        for k, e in enumerate(self.entries):
            adj[e.a].append((e.b, k))
            adj[e.b].append((e.a, k))
        for n in adj:
            adj[n].sort()
        return adj

    def components(self) -> list[list]:
        uf = UnionFind(self.nodes)
        for e in self.entries:
            uf.union(e.a, e.b)
        return uf.groups()

    @property
    def spanning(self) -> bool:
        return len(self.components()) <= 1

    def node_of(self, coord: PlacementCoord, grids: dict) -> Node:
        return grid_node(coord, grids)


def grid_node(coord: PlacementCoord, grids: dict) -> Node:
    """(class, component) of the grid cell holding a placement."""
    if coord.class_id not in grids:
        raise CertificateError("INFEASIBLE", f"class {coord.class_id} is not a reachable stable class")
    g = grids[coord.class_id]
    try:
        lab = g.label_at(coord.x, coord.y, coord.theta)
    except ValueError:
        lab = -1
    if lab < 0:
        raise CertificateError("INFEASIBLE", f"placement {coord} lies in no reachable cell")
    return coord.class_id, lab


class UnionFind:
    def __init__(self, items: Sequence):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> list[list]:
        out: dict = {}
        for x in sorted(self.parent):
            out.setdefault(self.find(x), []).append(x)
        return sorted(out.values())


def placement_grids(w: World, resolution=None, progress=None) -> dict[int, PlacementGrid]:
    return {c: analyze_placement_connectivity(w, c, resolution, progress=progress) for c in w.stable_classes}


def pair_rng(seed: int, i: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(i), int(j)]))


def _plan_pair(w, grids, seed, i, j, budget, cap):
    t0 = time.monotonic()
    try:
        traj, q = plan_flip(w, i, j, pair_rng(seed, i, j), max_iters=budget, deadline=t0 + cap)
        na = grid_node(q.coord_start, grids)
        nb = grid_node(q.coord_goal, grids)
    except (QueryError, CertificateError, PlacementError) as exc:
        log.info("pair %d-%d failed: %s", i, j, exc)
        return i, j, getattr(exc, "kind", type(exc).__name__), time.monotonic() - t0
    return i, j, CertEntry(na, nb, q.coord_start, q.coord_goal, traj), time.monotonic() - t0


def compute_certificate(w: World, seed: int = 0, grids: dict | None = None, budget: int | None = None,
                        pair_time_cap: float | None = None, progress=None, workers: int = 1) -> Certificate:
    """Flip every unordered pair of reachable classes; raises SPANNING_FAILED (with the
    partial certificate as detail) when the stored transfers leave the graph split.
    budget overrides the closed-chain iteration limit per query. Pairs run on `workers`
    threads; each pair has its own generator, so the result does not depend on it."""
    if not w.stable_classes:
        raise CertificateError("NO_STABLE_CLASS", "the object has no stable placement")
    grids = placement_grids(w) if grids is None else grids
    nodes = [(c, k) for c in sorted(grids) for k in range(grids[c].n_components)]
    unreachable = sorted(c for c in grids if grids[c].n_components == 0)
    classes = sorted({n[0] for n in nodes})
    cap = float(w.params.get("pair_time_cap", 600) if pair_time_cap is None else pair_time_cap)
    cert = Certificate(w.fingerprint, nodes, [], unreachable,
                       {"seed": int(seed), "budget": budget, "params": dict(w.params), "failures": {}})
    pairs = [(i, j) for a, i in enumerate(classes) for j in classes[a + 1:]]
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_plan_pair, w, grids, seed, i, j, budget, cap) for i, j in pairs]
            results = [f.result() for f in futs]
    else:
        results = [_plan_pair(w, grids, seed, i, j, budget, cap) for i, j in pairs]
    for i, j, res, dt in results:
        if isinstance(res, CertEntry):
            cert.entries.append(res)
        else:
            cert.meta["failures"][f"{i}-{j}"] = res
        if progress:
            progress(i, j, dt if isinstance(res, CertEntry) else None)
    groups = cert.components()
    if len(groups) > 1:
        raise CertificateError("SPANNING_FAILED", f"disconnected groups {groups}", cert)
    return cert


def verify_certificate(w: World, cert: Certificate, grids: dict | None = None) -> list[str]:
    """Replay checks for a loaded certificate; returns a list of problems (empty when valid)."""
    if cert.fingerprint != w.fingerprint:
        return ["certificate was computed for a different scene"]
    out = []
    for k, e in enumerate(cert.entries):
        if e.a not in cert.nodes or e.b not in cert.nodes:
            out.append(f"entry {k}: endpoint node is not in the certificate")
        rep = validate_trajectory(w, e.trajectory, bool(w.params.get("cc_equilibrium", True)))
        if not rep.ok:
            out.append(f"entry {k}: " + "; ".join(rep.errors[:3]))
        for c, P in ((e.start, e.trajectory.start_state()[2]), (e.goal, e.trajectory.end_state()[2])):
            d = np.abs(placement_to_transform(w, c).matrix - P).max()
            if d > 1e-6:
                out.append(f"entry {k}: stored placement differs from the trajectory by {d:.3g}")
        if grids is not None:
            for c, n in ((e.start, e.a), (e.goal, e.b)):
                try:
                    if cert.node_of(c, grids) != n:
                        out.append(f"entry {k}: placement {c} is not in node {n}")
                except CertificateError as exc:
                    out.append(f"entry {k}: {exc}")
    if not cert.spanning:
        out.append(f"certificate does not span: {cert.components()}")
    return out


def extract_placement_sequence(cert: Certificate, src: Node | int, dst: Node | int) -> list[tuple[Node, CertEntry]]:
    """Fewest-edge route through the certificate graph, ties broken toward the
    lexicographically smallest node sequence. Returns (departure node, entry) pairs."""
    src, dst = _as_node(cert, src), _as_node(cert, dst)
    if src == dst:
        return []
    adj = cert.edges()
    prev = {src: None}
    dq = deque([src])
    while dq:
        u = dq.popleft()
        if u == dst:
            break
        for v, k in adj[u]:
            if v not in prev:
                prev[v] = (u, k)
                dq.append(v)
    if dst not in prev:
        raise CertificateError("NOT_CONNECTED", f"{src} and {dst} are not linked by the certificate")
    out = []
    v = dst
    while prev[v] is not None:
        u, k = prev[v]
        out.append((u, cert.entries[k]))
        v = u
    return out[::-1]


def _as_node(cert: Certificate, x) -> Node:
    if isinstance(x, tuple):
        if x not in cert.nodes:
            raise CertificateError("NOT_CONNECTED", f"{x} is not a certificate node")
        return x
    hits = [n for n in cert.nodes if n[0] == x]
    if len(hits) != 1:
        raise CertificateError("NOT_CONNECTED", f"class {x} maps to {len(hits)} certificate nodes")
    return hits[0]


def solve_query(w: World, cert: Certificate, T_start: Transform, T_goal: Transform, grids: dict | None = None,
                budget: int | None = None, seed: int = 0, retries: int = 3) -> ManipulationTrajectory:
    """TypeA legs between the stored transfers on the shortest certificate route."""
    if cert.fingerprint != w.fingerprint:
        raise CertificateError("FINGERPRINT_MISMATCH", "certificate was computed for a different scene")
    grids = placement_grids(w) if grids is None else grids
    cs, cg = classify_placement(w, T_start), classify_placement(w, T_goal)
    for c in (cs, cg):
        if not w.placement_class(c.class_id).stable:
            raise CertificateError("INFEASIBLE", f"class {c.class_id} is not a stable placement")
    route = extract_placement_sequence(cert, cert.node_of(cs, grids), cert.node_of(cg, grids))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    parts = []
    cur, q_cur = cs, None
    legs = []
    for node, entry in route:
        traj, entry_c, exit_c = entry.oriented(node)
        legs.append((cur, entry_c, q_cur, _first_q(traj)))
        legs.append(traj)
        cur, q_cur = exit_c, _last_q(traj)
    legs.append((cur, cg, q_cur, None))
    n_leg = 0
    for leg in legs:
        if isinstance(leg, ManipulationTrajectory):
            parts.append(leg)
            continue
        a, b, qa, qb = leg
        parts.append(_typea_leg(w, grids, a, b, qa, qb, budget, rng, retries, n_leg))
        n_leg += 1
    return compose([p for p in parts if p.segments])


def _first_q(traj):
    s = traj.segments[0]
    return s.q1[0], s.q2[0]


def _last_q(traj):
    s = traj.segments[-1]
    return s.q1[-1], s.q2[-1]


def _typea_leg(w, grids, a: PlacementCoord, b: PlacementCoord, qa, qb, budget, rng, retries, leg):
    grid = grids[a.class_id]
    try:
        sigma = plan_object_path(w, grid, a, b)
    except PlanningError as exc:
        raise CertificateError("TYPEA_FAILED", f"leg {leg}: {exc}", leg) from exc
    last = None
    for _ in range(retries):
        try:
            if len(sigma.waypoints) == 1 and qa is not None and qb is not None:
                seg = plan_transit(w, sigma.poses([0.0])[0], qa, qb, rng)
                return ManipulationTrajectory((seg,))
            if len(sigma.waypoints) == 1 and (qa is not None or qb is not None):
                return ManipulationTrajectory(())
            return plan_typea(w, sigma, budget, start_config=qa, end_config=qb, rng=rng)
        except PlanningError as exc:
            last = exc
    raise CertificateError("TYPEA_FAILED", f"leg {leg}: {last}", leg) from last


def query_transforms(w: World, start: PlacementCoord, goal: PlacementCoord) -> tuple[Transform, Transform]:
    return placement_to_transform(w, start), placement_to_transform(w, goal)
