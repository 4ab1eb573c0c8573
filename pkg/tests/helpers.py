"""Shared oracles for the test suite."""

import itertools
from collections import deque

import numpy as np
from scipy.optimize import linprog

from bimanip.grasps import gripper_offsets
from bimanip.kinematics import forward_kinematics, track_poses
from bimanip.trajectory import ManipulationTrajectory, TransferSegment
from bimanip.transforms import Transform, interpolate_pose_path, rot_log


def densify(w, seg: TransferSegment) -> TransferSegment:
    """The segment with a pose-path midpoint inserted between every pair of samples; the
    arms are tracked to each midpoint from the preceding sample. Raises when tracking fails
    or the joints jump."""
    G1, G2 = gripper_offsets(w, seg.grasp)
    P, Q1, Q2 = [], [], []
    n = len(seg)
    for i in range(n):
        P.append(seg.poses[i])
        Q1.append(seg.q1[i])
        Q2.append(seg.q2[i])
        if i == n - 1:
            break
        a = Transform.from_matrix(seg.poses[i], check=False)
        b = Transform.from_matrix(seg.poses[i + 1], check=False)
        mid = interpolate_pose_path(a, b).sample(np.array([0.5]))[0]
        qs = []
        for arm, q, G in ((w.arms[0], seg.q1[i], G1), (w.arms[1], seg.q2[i], G2)):
            st, _, Q, _ = track_poses(arm, q, np.stack([seg.poses[i] @ G, mid @ G]))
            assert st == 0, f"tracking to midpoint {i} failed"
            qs.append(Q[-1])
        for q, qa, qb in ((qs[0], seg.q1[i], seg.q1[i + 1]), (qs[1], seg.q2[i], seg.q2[i + 1])):
            assert np.max(np.abs(q - qa)) < 0.5 and np.max(np.abs(qb - q)) < 0.5
        P.append(mid)
        Q1.append(qs[0])
        Q2.append(qs[1])
    return TransferSegment(seg.grasp, np.array(P), np.array(Q1), np.array(Q2),
                           np.linspace(seg.s[0], seg.s[-1], len(P)), seg.kind, dict(seg.meta))


def densify_trajectory(w, traj: ManipulationTrajectory) -> ManipulationTrajectory:
    return ManipulationTrajectory(tuple(densify(w, s) if s.is_transfer else s for s in traj.segments))


def fd_jacobian(arm, q, h=1e-6):
    J = np.zeros((6, arm.dof))
    for i in range(arm.dof):
        dq = np.zeros(arm.dof)
        dq[i] = h
        Tp = forward_kinematics(arm, q + dq).matrix
        Tm = forward_kinematics(arm, q - dq).matrix
        J[:3, i] = (Tp[:3, 3] - Tm[:3, 3]) / (2 * h)
        J[3:, i] = rot_log(Tp[:3, :3] @ Tm[:3, :3].T) / (2 * h)
    return J


def flood_fill_oracle(occ):
    # breadth-first search in C order; x and y bounded, theta periodic
    nx, ny, nt = occ.shape
    labels = np.full(occ.shape, -1, dtype=np.int64)
    n = 0
    for start in np.ndindex(occ.shape):
        if not occ[start] or labels[start] >= 0:
            continue
        labels[start] = n
        todo = deque([start])
        while todo:
            i, j, k = todo.popleft()
            for nb in ((i + 1, j, k), (i - 1, j, k), (i, j + 1, k), (i, j - 1, k),
                       (i, j, (k + 1) % nt), (i, j, (k - 1) % nt)):
                if 0 <= nb[0] < nx and 0 <= nb[1] < ny and occ[nb] and labels[nb] < 0:
                    labels[nb] = n
                    todo.append(nb)
        n += 1
    return labels


def cone_oracle(obj, grasp, gripper, mu, gravity, R, edges=8):
    # contacts rebuilt from the link faces; tangents from an SVD null space; scipy LP
    cols = []
    for g in grasp:
        link = obj.links[g.l]
        h = link.half
        ia, ib = (g.a - 1) % 3, (g.b - 1) % 3
        il = 3 - ia - ib
        sa = 1.0 if g.a <= 3 else -1.0
        sb = 1.0 if g.b <= 3 else -1.0
        ea, eb, el = np.eye(3)[ia] * sa, np.eye(3)[ib] * sb, np.eye(3)[il]
        centre = ea * (h[ia] - 0.5 * gripper.pad_length) + eb * (g.delta - 0.5) * (2 * h[ib] - gripper.pad_width)
        for side in (1.0, -1.0):
            n = -side * el
            _, _, Vt = np.linalg.svd(n[None, :])
            t1, t2 = Vt[1], Vt[2]
            for da, db in itertools.product((-0.5, 0.5), repeat=2):
                p = centre + side * h[il] * el + da * gripper.pad_length * ea + db * gripper.pad_width * eb
                p = link.frame.apply(p)
                nn, u1, u2 = (link.frame.rotation @ v for v in (n, t1, t2))
                for k in range(edges):
                    ph = 2 * np.pi * (k + 0.5) / edges
                    f = nn + mu * (np.cos(ph) * u1 + np.sin(ph) * u2)
                    cols.append(np.concatenate([f, np.cross(p, f)]))
    A = np.array(cols).T
    fg = obj.mass * (R.T @ np.asarray(gravity, float))
    b = -np.concatenate([fg, np.cross(obj.center_of_mass, fg)])
    res = linprog(np.zeros(A.shape[1]), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    return res.status == 0
