"""Numba kernels for the inner loops: chain kinematics, OBB overlap, phase-1 simplex.

Everything here works on raw float64 arrays. The public modules wrap these
with validated types.
"""

import numpy as np
from numba import njit

TRACK_OK = 0
TRACK_SINGULAR = 1
TRACK_LIMIT = 2
TRACK_DIVERGED = 3

LP_FEASIBLE = 0
LP_INFEASIBLE = 1
LP_FAILED = 2


@njit(cache=True, nogil=True)
def mul44(a, b, out):
    for i in range(3):
        for j in range(4):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]
        out[i, 3] += a[i, 3]
    out[3, 0] = 0.0
    out[3, 1] = 0.0
    out[3, 2] = 0.0
    out[3, 3] = 1.0


@njit(cache=True, nogil=True)
def rodrigues44(axis, angle, out):
    c = np.cos(angle)
    s = np.sin(angle)
    v = 1.0 - c
    x = axis[0]
    y = axis[1]
    z = axis[2]
    out[0, 0] = c + x * x * v
    out[0, 1] = x * y * v - z * s
    out[0, 2] = x * z * v + y * s
    out[1, 0] = y * x * v + z * s
    out[1, 1] = c + y * y * v
    out[1, 2] = y * z * v - x * s
    out[2, 0] = z * x * v - y * s
    out[2, 1] = z * y * v + x * s
    out[2, 2] = c + z * z * v
    out[0, 3] = 0.0
    out[1, 3] = 0.0
    out[2, 3] = 0.0
    out[3, 0] = 0.0
    out[3, 1] = 0.0
    out[3, 2] = 0.0
    out[3, 3] = 1.0


@njit(cache=True, nogil=True)
def fk_frames(base, origins, axes, tool, q, frames):
    """frames[0] = base, frames[i + 1] = frame after joint i, frames[n + 1] = tool."""
    n = q.shape[0]
    tmp = np.empty((4, 4))
    rot = np.empty((4, 4))
    frames[0, :, :] = base
    for i in range(n):
        mul44(frames[i], origins[i], tmp)
        rodrigues44(axes[i], q[i], rot)
        mul44(tmp, rot, frames[i + 1])
    mul44(frames[n], tool, frames[n + 1])


@njit(cache=True, nogil=True)
def jacobian_from_frames(frames, axes, J):
    n = axes.shape[0]
    pe0 = frames[n + 1, 0, 3]
    pe1 = frames[n + 1, 1, 3]
    pe2 = frames[n + 1, 2, 3]
    for i in range(n):
        F = frames[i + 1]
        a = axes[i]
        z0 = F[0, 0] * a[0] + F[0, 1] * a[1] + F[0, 2] * a[2]
        z1 = F[1, 0] * a[0] + F[1, 1] * a[1] + F[1, 2] * a[2]
        z2 = F[2, 0] * a[0] + F[2, 1] * a[1] + F[2, 2] * a[2]
        d0 = pe0 - F[0, 3]
        d1 = pe1 - F[1, 3]
        d2 = pe2 - F[2, 3]
        J[0, i] = z1 * d2 - z2 * d1
        J[1, i] = z2 * d0 - z0 * d2
        J[2, i] = z0 * d1 - z1 * d0
        J[3, i] = z0
        J[4, i] = z1
        J[5, i] = z2


@njit(cache=True, nogil=True)
def rotvec_of(R):
    """Rotation vector of a 3x3 rotation matrix (axis * angle, angle in [0, pi])."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    c = (tr - 1.0) * 0.5
    if c > 1.0:
        c = 1.0
    if c < -1.0:
        c = -1.0
    ang = np.arccos(c)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if ang < 1e-7:
        w *= 0.5
        return w
    if np.pi - ang < 1e-4:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                B[i, j] = 0.5 * (R[i, j] + R[j, i])
            B[i, i] += 1.0
        k = 0
        if B[1, 1] > B[k, k]:
            k = 1
        if B[2, 2] > B[k, k]:
            k = 2
        u = B[:, k] / np.sqrt(B[k, k])
        nu = np.sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
        u = u / nu
        # sign from the (small) antisymmetric part when it is informative
        if u[0] * w[0] + u[1] * w[1] + u[2] * w[2] < 0.0:
            u = -u
        return u * ang
    w *= ang / (2.0 * np.sin(ang))
    return w


@njit(cache=True, nogil=True)
def pose_error(T, Tt, e):
    """e[:3] = position error, e[3:] = world-frame rotation vector of Rt R^T."""
    for i in range(3):
        e[i] = Tt[i, 3] - T[i, 3]
    Rd = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            Rd[i, j] = Tt[i, 0] * T[j, 0] + Tt[i, 1] * T[j, 1] + Tt[i, 2] * T[j, 2]
    w = rotvec_of(Rd)
    e[3] = w[0]
    e[4] = w[1]
    e[5] = w[2]


@njit(cache=True, nogil=True)
def sigma_min(J):
    s = np.linalg.svd(J)[1]
    if s.shape[0] < 6:
        return 0.0
    return s[-1]


@njit(cache=True, nogil=True)
def _wrap_into(q, lo, hi):
    n = q.shape[0]
    two_pi = 2.0 * np.pi
    for i in range(n):
        if hi[i] - lo[i] >= two_pi:
            while q[i] > hi[i]:
                q[i] -= two_pi
            while q[i] < lo[i]:
                q[i] += two_pi
        else:
            if q[i] > hi[i]:
                q[i] = hi[i]
            elif q[i] < lo[i]:
                q[i] = lo[i]


@njit(cache=True, nogil=True)
def newton_solve(base, origins, axes, tool, lo, hi, target, q, max_iter,
                 tol_p, tol_r, max_step, lam, project, frames, J):
    """Damped Newton on the pose error; updates q in place.

    Returns the number of iterations used, or -1 on non-convergence.
    """
    n = q.shape[0]
    e = np.empty(6)
    A = np.empty((6, 6))
    for it in range(max_iter + 1):
        fk_frames(base, origins, axes, tool, q, frames)
        pose_error(frames[n + 1], target, e)
        ep = np.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        er = np.sqrt(e[3] * e[3] + e[4] * e[4] + e[5] * e[5])
        if ep < tol_p and er < tol_r:
            return it
        if it == max_iter:
            break
        jacobian_from_frames(frames, axes, J)
        for i in range(6):
            for j in range(6):
                acc = 0.0
                for k in range(n):
                    acc += J[i, k] * J[j, k]
                A[i, j] = acc
            A[i, i] += lam * lam
        y = np.linalg.solve(A, e)
        dq = J.T @ y
        big = 0.0
        for k in range(n):
            if abs(dq[k]) > big:
                big = abs(dq[k])
        scale = 1.0
        if big > max_step:
            scale = max_step / big
        for k in range(n):
            q[k] += scale * dq[k]
        if project:
            _wrap_into(q, lo, hi)
    return -1


@njit(cache=True, nogil=True)
def branch_label(q, frames, kinds, ia, ib, ic, offs):
    lab = 0
    for p in range(kinds.shape[0]):
        if kinds[p] == 0:
            v = np.sin(q[ia[p]] + offs[p])
        else:
            Fa = frames[ia[p] + 1]
            Fb = frames[ib[p] + 1]
            c = ic[p]
            v = (Fb[0, c] * (Fa[0, 3] - Fb[0, 3]) + Fb[1, c] * (Fa[1, 3] - Fb[1, 3])
                 + Fb[2, c] * (Fa[2, 3] - Fb[2, 3])) - offs[p]
        if v > 0.0:
            lab |= 1 << p
    return lab


@njit(cache=True, nogil=True)
def track_path(base, origins, axes, tool, lo, hi, targets, q0, sing_tol, tol,
               max_iter, max_jump, kinds, ia, ib, ic, offs, out_q, out_frames):
    """Follow a sequence of target poses from q0.

    out_q[0] = q0; out_q[i] solves targets[i]. Returns (status, step) where step
    is the index of the failing sample (0 when OK).
    """
    n = q0.shape[0]
    N = targets.shape[0]
    J = np.empty((6, n))
    q = q0.copy()
    fk_frames(base, origins, axes, tool, q, out_frames[0])
    jacobian_from_frames(out_frames[0], axes, J)
    smin = sigma_min(J)
    label0 = branch_label(q, out_frames[0], kinds, ia, ib, ic, offs)
    out_q[0, :] = q
    for i in range(1, N):
        its = newton_solve(base, origins, axes, tool, lo, hi, targets[i], q,
                           max_iter, tol, tol, 10.0, 1e-3 * smin, False,
                           out_frames[i], J)
        jacobian_from_frames(out_frames[i], axes, J)
        smin = sigma_min(J)
        if smin < sing_tol:
            return TRACK_SINGULAR, i
        if its < 0:
            return TRACK_DIVERGED, i
        for k in range(n):
            if q[k] < lo[k] or q[k] > hi[k]:
                return TRACK_LIMIT, i
        jump = 0.0
        for k in range(n):
            d = abs(q[k] - out_q[i - 1, k])
            if d > jump:
                jump = d
        if jump > max_jump:
            return TRACK_DIVERGED, i
        if branch_label(q, out_frames[i], kinds, ia, ib, ic, offs) != label0:
            return TRACK_SINGULAR, i
        out_q[i, :] = q
    return TRACK_OK, 0


@njit(cache=True, nogil=True)
def obb_overlap(ca, Ra, ha, cb, Rb, hb, eps):
    """Separating-axis test for two oriented boxes; contact within eps is not overlap."""
    R = np.empty((3, 3))
    AR = np.empty((3, 3))
    d0 = cb[0] - ca[0]
    d1 = cb[1] - ca[1]
    d2 = cb[2] - ca[2]
    t = np.empty(3)
    for i in range(3):
        t[i] = Ra[0, i] * d0 + Ra[1, i] * d1 + Ra[2, i] * d2
        for j in range(3):
            R[i, j] = Ra[0, i] * Rb[0, j] + Ra[1, i] * Rb[1, j] + Ra[2, i] * Rb[2, j]
            AR[i, j] = abs(R[i, j]) + 1e-12
    for i in range(3):
        rb = hb[0] * AR[i, 0] + hb[1] * AR[i, 1] + hb[2] * AR[i, 2]
        if abs(t[i]) > ha[i] + rb - eps:
            return False
    for j in range(3):
        ra = ha[0] * AR[0, j] + ha[1] * AR[1, j] + ha[2] * AR[2, j]
        tj = t[0] * R[0, j] + t[1] * R[1, j] + t[2] * R[2, j]
        if abs(tj) > ra + hb[j] - eps:
            return False
    for i in range(3):
        i1 = (i + 1) % 3
        i2 = (i + 2) % 3
        for j in range(3):
            j1 = (j + 1) % 3
            j2 = (j + 2) % 3
            ra = ha[i1] * AR[i2, j] + ha[i2] * AR[i1, j]
            rb = hb[j1] * AR[i, j2] + hb[j2] * AR[i, j1]
            tl = t[i2] * R[i1, j] - t[i1] * R[i2, j]
            s2 = 1.0 - R[i, j] * R[i, j]
            if s2 < 1e-12:
                continue
            if abs(tl) > ra + rb - eps * np.sqrt(s2):
                return False
    return True


@njit(cache=True, nogil=True)
def place_boxes(frames1, frames2, objT, owner, frame_idx, local, centers, rots, tmp):
    m = owner.shape[0]
    for k in range(m):
        o = owner[k]
        if o == 0:
            mul44(frames1[frame_idx[k]], local[k], tmp)
        elif o == 1:
            mul44(frames2[frame_idx[k]], local[k], tmp)
        elif o == 2:
            mul44(objT, local[k], tmp)
        else:
            tmp[:, :] = local[k]
        for i in range(3):
            centers[k, i] = tmp[i, 3]
            for j in range(3):
                rots[k, i, j] = tmp[i, j]


@njit(cache=True, nogil=True)
def first_overlap(centers, rots, halves, pairs, eps):
    m = centers.shape[0]
    ext = np.empty((m, 3))
    for k in range(m):
        for i in range(3):
            ext[k, i] = (abs(rots[k, i, 0]) * halves[k, 0] + abs(rots[k, i, 1]) * halves[k, 1]
                         + abs(rots[k, i, 2]) * halves[k, 2])
    for p in range(pairs.shape[0]):
        a = pairs[p, 0]
        b = pairs[p, 1]
        sep = False
        for i in range(3):
            if abs(centers[a, i] - centers[b, i]) > ext[a, i] + ext[b, i] - eps:
                sep = True
                break
        if sep:
            continue
        if obb_overlap(centers[a], rots[a], halves[a], centers[b], rots[b], halves[b], eps):
            return p
    return -1


@njit(cache=True, nogil=True)
def first_colliding_step(frames1_all, frames2_all, objT_all, owner, frame_idx, local,
                         halves, pairs, eps):
    m = owner.shape[0]
    centers = np.empty((m, 3))
    rots = np.empty((m, 3, 3))
    tmp = np.empty((4, 4))
    for s in range(objT_all.shape[0]):
        place_boxes(frames1_all[s], frames2_all[s], objT_all[s], owner, frame_idx, local,
                    centers, rots, tmp)
        if first_overlap(centers, rots, halves, pairs, eps) >= 0:
            return s
    return -1


@njit(cache=True, nogil=True)
def simplex_phase1(A, b, tol, max_iter):
    """Find x >= 0 with A x = b by minimizing the artificial-variable sum.

    Returns (status, x, objective).
    """
    m, n = A.shape
    W = n + m + 1
    T = np.zeros((m + 1, W))
    basis = np.empty(m, dtype=np.int64)
    for i in range(m):
        sgn = 1.0 if b[i] >= 0.0 else -1.0
        for j in range(n):
            T[i, j] = sgn * A[i, j]
        T[i, n + i] = 1.0
        T[i, W - 1] = sgn * b[i]
        basis[i] = n + i
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += T[i, j]
        T[m, j] = -acc
    acc = 0.0
    for i in range(m):
        acc += T[i, W - 1]
    T[m, W - 1] = -acc
    status = LP_FAILED
    for it in range(max_iter):
        col = -1
        if it < 60:
            best = -tol
            for j in range(n + m):
                if T[m, j] < best:
                    best = T[m, j]
                    col = j
        else:
            for j in range(n + m):
                if T[m, j] < -tol:
                    col = j
                    break
        if col < 0:
            status = LP_FEASIBLE
            break
        row = -1
        best_ratio = np.inf
        for i in range(m):
            if T[i, col] > tol:
                r = T[i, W - 1] / T[i, col]
                if r < best_ratio - 1e-15 or (abs(r - best_ratio) <= 1e-15 and row >= 0
                                              and basis[i] < basis[row]):
                    best_ratio = r
                    row = i
        if row < 0:
            status = LP_FAILED
            break
        pv = T[row, col]
        for j in range(W):
            T[row, j] /= pv
        for i in range(m + 1):
            if i != row:
                f = T[i, col]
                if f != 0.0:
                    for j in range(W):
                        T[i, j] -= f * T[row, j]
        basis[row] = col
    x = np.zeros(n)
    obj = -T[m, W - 1]
    if status != LP_FEASIBLE:
        return LP_FAILED, x, obj
    for i in range(m):
        if basis[i] < n:
            x[basis[i]] = T[i, W - 1]
    return LP_FEASIBLE, x, obj


@njit(cache=True, nogil=True)
def first_unbalanced(A, W, gdir, tol, res_tol, max_iter):
    """First row i of W with no x >= 0 solving A x = W[i], or -1; -2 when the simplex
    breaks down. Rows whose gravity direction repeats the last checked one are skipped."""
    m, n = A.shape
    last = -1
    for i in range(W.shape[0]):
        if last >= 0:
            d = 0.0
            for k in range(3):
                d = max(d, abs(gdir[i, k] - gdir[last, k]))
            if d < 1e-12:
                continue
        scale = 0.0
        for k in range(m):
            scale = max(scale, abs(W[i, k]))
        if scale == 0.0:
            last = i
            continue
        status, x, obj = simplex_phase1(A, W[i] / scale, tol, max_iter)
        if status == LP_FAILED:
            return -2
        r = 0.0
        for k in range(m):
            acc = -W[i, k]
            for j in range(n):
                acc += A[k, j] * x[j] * scale
            r += acc * acc
        if np.sqrt(r) > res_tol:
            return i
        last = i
    return -1


@njit(cache=True, nogil=True)
def group_clear(mats_a, halves_a, group_a, skip_a, ngroups, mats_b, halves_b, tag_b, eps):
    """For boxes A (4x4 poses, grouped) against boxes B, flag each group free of overlap.

    A box in A ignores B boxes whose tag equals its skip value.
    """
    ok = np.ones(ngroups, dtype=np.bool_)
    ca = np.empty(3)
    cb = np.empty(3)
    for i in range(mats_a.shape[0]):
        g = group_a[i]
        if not ok[g]:
            continue
        for k in range(3):
            ca[k] = mats_a[i, k, 3]
        Ra = np.ascontiguousarray(mats_a[i, :3, :3])
        for j in range(mats_b.shape[0]):
            if tag_b[j] == skip_a[i]:
                continue
            for k in range(3):
                cb[k] = mats_b[j, k, 3]
            Rb = np.ascontiguousarray(mats_b[j, :3, :3])
            if obb_overlap(ca, Ra, halves_a[i], cb, Rb, halves_b[j], eps):
                ok[g] = False
                break
    return ok
