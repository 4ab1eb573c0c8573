from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimanip.certificate import (CertEntry, Certificate, CertificateError, UnionFind, compute_certificate,
                                 extract_placement_sequence, query_transforms, solve_query, verify_certificate)
from bimanip.kinematics import Box
from bimanip.trajectory import (JunctionError, ManipulationTrajectory, TransitSegment, compose,
                                validate_trajectory)
from bimanip.transforms import Transform
from bimanip.world import PlacementCoord

EMPTY = ManipulationTrajectory(())


def synthetic(n_classes, pairs):
    nodes = [(c, 0) for c in range(1, n_classes + 1)]
    entries = [CertEntry((a, 0), (b, 0), PlacementCoord(a, 0, 0, 0), PlacementCoord(b, 0, 0, 0), EMPTY)
               for a, b in pairs]
    return Certificate("x", nodes, entries)


def bfs_distance(n_classes, pairs, s, g):
    adj = {c: set() for c in range(1, n_classes + 1)}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    dist = {s: 0}
    dq = deque([s])
    while dq:
        u = dq.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                dq.append(v)
    return dist.get(g)


def lex_shortest_oracle(n_classes, pairs, s, g):
    # brute force: every simple path, keep the shortest, then the lexicographically smallest
    adj = {c: set() for c in range(1, n_classes + 1)}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    best = None
    stack = [[s]]
    while stack:
        p = stack.pop()
        if p[-1] == g:
            if best is None or (len(p), p) < (len(best), best):
                best = p
            continue
        stack.extend(p + [v] for v in adj[p[-1]] if v not in p)
    return best


def components_oracle(nodes, pairs):
    # connected components by repeated graph search
    adj = {n: set() for n in nodes}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    seen, out = set(), []
    for n in sorted(nodes):
        if n in seen:
            continue
        comp, dq = [], deque([n])
        seen.add(n)
        while dq:
            u = dq.popleft()
            comp.append(u)
            for v in adj[u] - seen:
                seen.add(v)
                dq.append(v)
        out.append(sorted(comp))
    return sorted(out)


def test_five_class_route_uses_three_transfers():
    # M1..M5 in order; the query from class 1 to class 5 runs M2, M3, M5
    edges = [(2, 4), (1, 2), (2, 3), (3, 4), (3, 5)]
    cert = synthetic(5, edges)
    route = extract_placement_sequence(cert, 1, 5)
    used = [cert.entries.index(e) + 1 for _, e in route]
    assert used == [2, 3, 5]
    assert [n[0] for n, _ in route] == [1, 2, 3]
    assert len(route) == bfs_distance(5, edges, 1, 5)


def test_same_class_route_is_empty():
    assert extract_placement_sequence(synthetic(3, [(1, 2)]), 2, 2) == []


def test_disconnected_route_raises():
    with pytest.raises(CertificateError) as ei:
        extract_placement_sequence(synthetic(3, [(1, 2)]), 1, 3)
    assert ei.value.kind == "NOT_CONNECTED"


edge_sets = st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)).filter(lambda p: p[0] != p[1]),
                     max_size=12, unique_by=lambda p: frozenset(p))


@settings(max_examples=300, deadline=None)
@given(edge_sets, st.integers(1, 6), st.integers(1, 6))
def test_route_is_lexicographic_shortest_path(pairs, s, g):
    cert = synthetic(6, pairs)
    ref = lex_shortest_oracle(6, pairs, s, g)
    if ref is None:
        with pytest.raises(CertificateError):
            extract_placement_sequence(cert, s, g)
        return
    route = extract_placement_sequence(cert, s, g)
    assert len(route) == bfs_distance(6, pairs, s, g)
    seq = [n[0] for n, _ in route] + [g]
    assert seq == ref
    # each entry joins consecutive classes of the route
    for (n, e), nxt in zip(route, seq[1:]):
        assert {e.a[0], e.b[0]} == {n[0], nxt}


@settings(max_examples=300, deadline=None)
@given(edge_sets)
def test_spanning_matches_union_find_oracle(pairs):
    cert = synthetic(6, pairs)
    ref = components_oracle(cert.nodes, [((a, 0), (b, 0)) for a, b in pairs])
    assert cert.components() == ref
    assert cert.spanning == (len(ref) == 1)


def test_union_find_groups():
    uf = UnionFind(range(6))
    uf.union(4, 1)
    uf.union(1, 3)
    uf.union(5, 2)
    assert uf.groups() == [[0], [1, 3, 4], [2, 5]]


def _transit(q0, q1, pose=None):
    pose = np.eye(4) if pose is None else pose
    q0, q1 = np.asarray(q0, float), np.asarray(q1, float)
    Q = q0 + np.linspace(0, 1, 3)[:, None] * (q1 - q0)
    return ManipulationTrajectory((TransitSegment(pose, Q, Q, np.linspace(0, 1, 3)),))


def test_compose_identity_and_associativity():
    A = _transit(np.zeros(6), np.full(6, 0.1))
    B = _transit(np.full(6, 0.1), np.full(6, 0.2))
    C = _transit(np.full(6, 0.2), np.full(6, 0.4))
    assert compose([A]) == A
    assert compose([A, compose([B, C])]) == compose([compose([A, B]), C])
    # adjacent transits merge into one segment
    abc = compose([A, B, C])
    assert len(abc.segments) == 1 and len(abc.segments[0]) == 7


def test_compose_rejects_mismatched_junction():
    A = _transit(np.zeros(6), np.full(6, 0.1))
    B = _transit(np.full(6, 0.1) + 1e-3, np.full(6, 0.2))
    with pytest.raises(JunctionError):
        compose([A, B])
    P = np.eye(4)
    P[0, 3] = 1e-3
    with pytest.raises(JunctionError):
        compose([A, _transit(np.full(6, 0.1), np.full(6, 0.2), P)])


def test_single_class_certificate_is_empty_and_spanning(box, box_grids):
    # one reachable class needs no transfer at all
    cert = compute_certificate(box, 0, grids={2: box_grids[2]})
    assert cert.entries == [] and cert.spanning and cert.nodes == [(2, 0)]


def test_box_certificate_spans(box, box_cert, box_grids):
    assert box_cert.spanning
    assert len(box_cert.entries) >= 5
    assert sorted(n[0] for n in box_cert.nodes) == list(range(6))
    assert verify_certificate(box, box_cert, box_grids) == []
    # only opposite faces are left out
    assert {frozenset(e.classes) for e in box_cert.entries}.isdisjoint(
        {frozenset(p) for p in ((0, 5), (1, 4), (2, 3))})
    for e in box_cert.entries:
        assert e.trajectory.n_typeb == 1


def test_certificate_rejects_edited_scene(box, box_cert):
    moved = box.with_obstacles([Box([0.01] * 3, Transform(None, [0.5, 0.5, 0.5]))])
    assert verify_certificate(moved, box_cert) != []
    T = query_transforms(box, PlacementCoord(2, 0, 0, 0), PlacementCoord(2, 0, 0, 0))
    with pytest.raises(CertificateError) as ei:
        solve_query(moved, box_cert, *T)
    assert ei.value.kind == "FINGERPRINT_MISMATCH"


def test_same_class_query_has_no_transfer_between_classes(box, box_cert, box_grids):
    Ts, Tg = query_transforms(box, PlacementCoord(2, -0.04, 0.0, 0.0), PlacementCoord(2, 0.04, 0.02, 0.5))
    traj = solve_query(box, box_cert, Ts, Tg, box_grids)
    assert traj.n_typeb == 0
    assert validate_trajectory(box, traj).ok
    assert np.abs(traj.start_state()[2] - Ts.matrix).max() < 1e-6
    assert np.abs(traj.end_state()[2] - Tg.matrix).max() < 1e-6


@pytest.fixture(scope="module")
def adjacent_solutions(box, box_cert, box_grids):
    out = []
    for s, g in (((3, -0.04, 0.02, 0.3), (0, 0.03, 0.0, 1.0)), ((3, 0.03, -0.02, 2.0), (0, -0.02, 0.02, 0.0))):
        Ts, Tg = query_transforms(box, PlacementCoord(*s), PlacementCoord(*g))
        out.append((Ts, Tg, solve_query(box, box_cert, Ts, Tg, box_grids, seed=1)))
    return out


def test_one_edge_query(box, adjacent_solutions):
    for Ts, Tg, traj in adjacent_solutions:
        assert traj.n_typeb == 1
        assert validate_trajectory(box, traj).ok
        assert np.abs(traj.start_state()[2] - Ts.matrix).max() < 1e-6
        assert np.abs(traj.end_state()[2] - Tg.matrix).max() < 1e-6
        assert traj.length >= 1


def test_queries_over_one_pair_reuse_the_same_transfer(adjacent_solutions):
    (_, _, a), (_, _, b) = adjacent_solutions
    ba = [s for s in a.transfers if s.kind == "typeb"]
    bb = [s for s in b.transfers if s.kind == "typeb"]
    assert len(ba) == len(bb) == 1
    assert ManipulationTrajectory((ba[0],)) == ManipulationTrajectory((bb[0],))
    assert ba[0].poses.tobytes() == bb[0].poses.tobytes()
    assert ba[0].q1.tobytes() == bb[0].q1.tobytes() and ba[0].q2.tobytes() == bb[0].q2.tobytes()
