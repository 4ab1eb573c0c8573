"""In-placement reachability: occupancy grids over (x, y, theta) with their connected
components, and coverage intervals of a grasp along an object path."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .grasps import (BimanualGrasp, GraspFinder, equilibrium_along, gripper_clear, gripper_offsets,
                     validate_bimanual_grasp, GraspError)
from .kinematics import solve_ik, track_poses
from .transforms import Transform
from .world import World, placement_matrices

_GRID_CACHE: dict = {}


@dataclass
class PlacementGrid:
    class_id: int
    xs: np.ndarray
    ys: np.ndarray
    thetas: np.ndarray
    occupancy: np.ndarray
    labels: np.ndarray = field(repr=False)
    component_sizes: list = field(default_factory=list)
    witnesses: dict = field(default_factory=dict, repr=False)

    @property
    def resolution(self) -> tuple[float, float, float]:
        dx = float(self.xs[1] - self.xs[0]) if len(self.xs) > 1 else 0.0
        dy = float(self.ys[1] - self.ys[0]) if len(self.ys) > 1 else 0.0
        return dx, dy, 2 * np.pi / len(self.thetas)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def n_components(self) -> int:
        return len(self.component_sizes)

    def cell_of(self, x: float, y: float, theta: float) -> tuple[int, int, int]:
        """Nearest lattice cell; raises when (x, y) lies outside the grid by more than
        half a cell."""
        dx, dy, dt = self.resolution
        i = int(round((x - self.xs[0]) / dx)) if dx else 0
        j = int(round((y - self.ys[0]) / dy)) if dy else 0
        if not (0 <= i < len(self.xs) and 0 <= j < len(self.ys)):
            raise ValueError(f"({x:.4f}, {y:.4f}) is outside the placement grid")
        k = int(round(np.mod(theta, 2 * np.pi) / dt)) % len(self.thetas)
        return i, j, k

    def coord(self, cell) -> tuple[float, float, float]:
        i, j, k = cell
        return float(self.xs[i]), float(self.ys[j]), float(self.thetas[k])

    def label_at(self, x: float, y: float, theta: float) -> int:
        return int(self.labels[self.cell_of(x, y, theta)])


def _axis_points(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + 0.5 * ((hi - lo) - (n - 1) * step) + step * np.arange(n)


def label_components(occ: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """6-connected components with the last axis periodic. Labels are numbered by the
    first cell of each component in C order; empty cells get -1."""
    struct = ndimage.generate_binary_structure(3, 1)
    raw, n = ndimage.label(occ, structure=struct)
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    if occ.shape[2] > 1:
        a, b = raw[:, :, 0], raw[:, :, -1]
        for u, v in zip(a[(a > 0) & (b > 0)], b[(a > 0) & (b > 0)]):
            ru, rv = find(int(u)), find(int(v))
            if ru != rv:
                parent[max(ru, rv)] = min(ru, rv)
    roots = np.array([find(i) for i in range(n + 1)])
    merged = roots[raw]
    labels = np.full(occ.shape, -1, dtype=np.int64)
    flat = merged.ravel()
    order: dict[int, int] = {}
    for r in flat[flat > 0]:
        if r not in order:
            order[int(r)] = len(order)
    if order:
        lut = np.full(n + 1, -1, dtype=np.int64)
        for r, i in order.items():
            lut[r] = i
        labels = lut[merged]
        labels[~occ] = -1
    sizes = [int(np.sum(labels == i)) for i in range(len(order))]
    return labels, sizes


def _object_free(w: World, objT: np.ndarray) -> bool:
    owner, _, local, halves, _ = w._boxes
    for a in np.nonzero(owner == 2)[0]:
        A = objT @ local[a]
        for b in np.nonzero(owner == 3)[0]:
            B = local[b]
            if K.obb_overlap(A[:3, 3].copy(), np.ascontiguousarray(A[:3, :3]), halves[a],
                             B[:3, 3].copy(), np.ascontiguousarray(B[:3, :3]), halves[b], 1e-6):
                return False
    return True


def grid_axes(w: World, resolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx, dy, dth = resolution
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for s in w.surfaces:
        a, b = s.footprint()
        lo = np.minimum(lo, a)
        hi = np.maximum(hi, b)
    nt = int(round(2 * np.pi / dth))
    return _axis_points(lo[0], hi[0], dx), _axis_points(lo[1], hi[1], dy), 2 * np.pi * np.arange(nt) / nt


def serpentine(shape) -> list[tuple[int, int, int]]:
    """Visit order in which consecutive cells are lattice neighbours."""
    nx, ny, nt = shape
    out = []
    for k in range(nt):
        xs = range(nx) if k % 2 == 0 else range(nx - 1, -1, -1)
        for ii, i in enumerate(xs):
            flip = (ii + k * nx) % 2
            ys = range(ny) if flip == 0 else range(ny - 1, -1, -1)
            for j in ys:
                out.append((i, j, k))
    return out


def analyze_placement_connectivity(w: World, class_id: int, resolution=None,
                                   delta_samples: Sequence[float] | None = None,
                                   cache: bool = True, progress=None) -> PlacementGrid:
    """Mark each (x, y, theta) cell that is collision-free and graspable, then label the
    6-connected components (theta wraps around)."""
    p = w.params
    if resolution is None:
        resolution = (p.get("grid_dx", 0.02), p.get("grid_dx", 0.02), np.deg2rad(p.get("grid_dtheta_deg", 5.0)))
    if delta_samples is None:
        delta_samples = p.get("grid_deltas", (0.25, 0.5, 0.75))
    resolution = tuple(float(r) for r in resolution)
    if min(resolution) <= 0:
        raise ValueError("grid resolutions must be positive")
    key = (w.fingerprint, id(w), class_id, resolution, tuple(delta_samples))
    if cache and key in _GRID_CACHE:
        return _GRID_CACHE[key]
    xs, ys, ts = grid_axes(w, resolution)
    occ = np.zeros((len(xs), len(ys), len(ts)), dtype=bool)
    witnesses = {}
    finder = GraspFinder(w, delta_samples, n_seeds=int(p.get("ik_seeds", 8)))
    for cell in serpentine(occ.shape):
        i, j, k = cell
        M = placement_matrices(w, class_id, [[xs[i], ys[j], ts[k]]])[0]
        if not _object_free(w, M):
            continue
        found = finder.find(M)
        if found is not None:
            occ[cell] = True
            witnesses[cell] = found
        if progress is not None:
            progress(cell)
    labels, sizes = label_components(occ)
    grid = PlacementGrid(class_id, xs, ys, ts, occ, labels, sizes, witnesses)
    if cache:
        _GRID_CACHE[key] = grid
    return grid


def write_grid(grid: PlacementGrid, path) -> tuple[Path, Path]:
    """Flat uint8 occupancy dump (C order, x slowest, theta fastest) plus a text header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = path.with_suffix(".bin")
    hdr = path.with_suffix(".txt")
    dx, dy, dt = grid.resolution
    tmp = raw.with_suffix(".bin.tmp")
    grid.occupancy.astype(np.uint8).tofile(tmp)
    tmp.replace(raw)
    lines = [
        "format occupancy-uint8 order=x,y,theta (C order)",
        f"class_id {grid.class_id}",
        f"dims {grid.shape[0]} {grid.shape[1]} {grid.shape[2]}",
        f"resolution {dx:.9g} {dy:.9g} {dt:.9g}",
        f"origin {grid.xs[0]:.9g} {grid.ys[0]:.9g} 0",
        f"components {grid.n_components}",
        "sizes " + " ".join(str(s) for s in grid.component_sizes),
    ]
    tmp = hdr.with_suffix(".txt.tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(hdr)
    return raw, hdr


def read_grid(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = {}
    for line in path.with_suffix(".txt").read_text().splitlines():
        k, _, v = line.partition(" ")
        meta[k] = v
    dims = tuple(int(v) for v in meta["dims"].split())
    occ = np.fromfile(path.with_suffix(".bin"), dtype=np.uint8).reshape(dims).astype(bool)
    return occ, meta


# coverage of an object path by one grasp

@dataclass(frozen=True, eq=False)
class CoverageInterval:
    grasp: BimanualGrasp
    ik_class_pair: tuple[int, int]
    a: float
    b: float
    s: np.ndarray = field(repr=False, default=None)
    q1: np.ndarray = field(repr=False, default=None)
    q2: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("coverage interval needs a < b")

    def q_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Stored joint pair at the sample nearest s from below (within the interval)."""
        k = int(np.searchsorted(self.s, s, side="right")) - 1
        k = max(0, min(k, len(self.s) - 1))
        return self.q1[k], self.q2[k]


class _Checker:
    """Tracks both arms along object poses under a fixed grasp and reports the first
    sample where the composite configuration becomes invalid."""

    def __init__(self, w: World, g: BimanualGrasp, equilibrium: bool = True):
        self.w = w
        self.g = g
        self.G1, self.G2 = gripper_offsets(w, g)
        self.pairs = w.collision_pairs(g.g1.l, g.g2.l)
        self.equilibrium = equilibrium

    def run(self, objT: np.ndarray, q1, q2, check_first: bool = False):
        """Returns (number of valid leading samples, q1 array, q2 array)."""
        n = len(objT)
        st1, f1, Q1, F1 = track_poses(self.w.arms[0], q1, objT @ self.G1)
        st2, f2, Q2, F2 = track_poses(self.w.arms[1], q2, objT @ self.G2)
        good = n
        if st1 != K.TRACK_OK:
            good = min(good, f1)
        if st2 != K.TRACK_OK:
            good = min(good, f2)
        if good > 0:
            c = self.w.first_collision(F1[:good], F2[:good], objT[:good], self.pairs)
            if c >= 0:
                good = c
        if good > 0 and self.equilibrium:
            e = equilibrium_along(self.w, self.g, objT[:good])
            if e >= 0:
                good = e
        return good, Q1, Q2


def path_grasp_coverage(w: World, sigma, g: BimanualGrasp, seed_config=None, ds: float | None = None,
                        refine_tol: float = 1e-4, equilibrium: bool = True,
                        n_seeds: int | None = None) -> list[CoverageInterval]:
    """Maximal runs of the path parameter along which the grasp can be held, one scan per
    IK class pair found at the first feasible sample."""
    ds = float(ds or w.params.get("ds", 0.005))
    n_seeds = int(n_seeds or w.params.get("ik_seeds", 8))
    n = max(1, int(math.ceil(1.0 / ds)))
    S = np.linspace(0.0, 1.0, n + 1)
    poses = sigma.poses(S)
    chk = _Checker(w, g, equilibrium)

    def validate(k, classes=(None, None), hints=(None, None)):
        if not gripper_clear(w, poses[k], g):
            return None
        try:
            q1, q2 = validate_bimanual_grasp(w, Transform.from_matrix(poses[k], check=False), g, n_seeds,
                                             hints=hints, want_classes=classes)
        except GraspError:
            return None
        if chk.run(poses[k:k + 1], q1, q2)[0] < 1:
            return None
        return q1, q2

    first = None
    starts = []
    if seed_config is not None:
        q1, q2 = (np.asarray(v, dtype=float) for v in seed_config)
        if chk.run(poses[:1], q1, q2)[0] == 1:
            first = 0
            starts = [(q1, q2)]
    if first is None:
        for k in range(n + 1):
            v = validate(k)
            if v is not None:
                first = k
                break
        if first is None:
            return []
        starts = _class_variants(w, g, poses[first], v, n_seeds, chk)
    out = []
    for q1, q2 in starts:
        classes = (_label(w.arms[0], q1), _label(w.arms[1], q2))
        out.extend(_scan(w, chk, sigma, S, poses, first, q1, q2, classes, validate, refine_tol))
    return out


def _label(arm, q) -> int:
    return int(K.branch_label(q, arm.frames(q), *arm.predicate_args()))


def _class_variants(w, g, objT, v, n_seeds, chk):
    """Joint pairs at one pose, one per distinct (k1, k2) class pair, the given one first."""
    found = {(_label(w.arms[0], v[0]), _label(w.arms[1], v[1])): v}
    sols = [solve_ik(w.arms[i], objT @ G, n_seeds) for i, G in enumerate((chk.G1, chk.G2))]
    for q1 in sols[0]:
        for q2 in sols[1]:
            key = (_label(w.arms[0], q1), _label(w.arms[1], q2))
            if key in found:
                continue
            if chk.run(objT[None], q1, q2)[0] == 1:
                found[key] = (q1, q2)
    return list(found.values())


def _scan(w, chk, sigma, S, poses, first, q1, q2, classes, validate, tol):
    n = len(S) - 1
    out = []
    k = first
    cur = (q1, q2)
    while k <= n:
        good, Q1, Q2 = chk.run(poses[k:], cur[0], cur[1])
        last = k + good - 1
        a = _refine(chk, sigma, S[k - 1], S[k], Q1[0], Q2[0], tol) if k > 0 else 0.0
        if last >= n:
            b = 1.0
        else:
            b = _refine(chk, sigma, S[last + 1], S[last], Q1[good - 1], Q2[good - 1], tol)
        if b > a:
            out.append(CoverageInterval(chk.g, classes, float(a), float(b), S[k:last + 1].copy(),
                                        Q1[:good].copy(), Q2[:good].copy()))
        # look for the next sample where this class pair can be re-established
        k = last + 1
        cur = None
        while k <= n:
            v = validate(k, classes)
            if v is not None:
                cur = v
                break
            k += 1
        if cur is None:
            break
    return out


def _refine(chk, sigma, s_bad, s_good, q1, q2, tol) -> float:
    """Bisect between a valid parameter (with its joints) and an invalid one; returns the
    parameter nearest s_bad known to be reachable from s_good."""
    good = s_good
    bad = s_bad
    while abs(bad - good) > tol:
        mid = 0.5 * (good + bad)
        steps = np.linspace(good, mid, 3)
        P = sigma.poses(steps)
        n_ok, Q1, Q2 = chk.run(P, q1, q2)
        if n_ok == len(steps):
            good, q1, q2 = mid, Q1[-1], Q2[-1]
        else:
            bad = mid
    return float(good)
