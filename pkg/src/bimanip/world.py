"""Scene container, placement classes and box-based collision checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _kernels as K
from .kinematics import Box, SerialArm
from .transforms import CompositeConfig, MetricWeights, Transform, rot_z

HULL_NORMAL_TOL = 1e-6
STABILITY_MARGIN = 1e-4
FLUSH_ANGLE_TOL = 1e-4
CONTACT_TOL = 1e-4
COLLISION_EPS = 1e-6

OWNER_ARM1, OWNER_ARM2, OWNER_OBJECT, OWNER_STATIC = 0, 1, 2, 3


class PlacementError(ValueError):
    """kind is NO_CONTACT, TILTED or UNKNOWN_CLASS."""

    def __init__(self, kind: str, msg: str = ""):
        super().__init__(f"{kind}: {msg}" if msg else kind)
        self.kind = kind


@dataclass(frozen=True)
class ObjectModel:
    links: tuple[Box, ...]
    mass: float
    center_of_mass: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if not self.links:
            raise ValueError("object needs at least one link")
        if not self.mass > 0:
            raise ValueError("object mass must be positive")
        c = np.array(self.center_of_mass, dtype=float)
        c.flags.writeable = False
        object.__setattr__(self, "center_of_mass", c)

    @cached_property
    def vertices(self) -> np.ndarray:
        return np.concatenate([b.vertices() for b in self.links])

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)))


@dataclass(frozen=True)
class Gripper:
    """Parallel-jaw gripper. In the gripper frame z is the approach direction (out of
    the palm), y the sliding direction and x the closing direction; the origin sits at
    the center of the finger pads."""

    stroke: float = 0.085
    finger_depth: float = 0.04
    pad_length: float = 0.02
    pad_width: float = 0.02
    finger_thickness: float = 0.01
    palm_half: tuple = (0.055, 0.02, 0.02)
    flange_offset: float = 0.16

    @cached_property
    def finger_boxes(self) -> tuple[Box, Box]:
        hz = 0.5 * self.finger_depth
        cz = 0.5 * self.pad_length - hz
        cx = 0.5 * self.stroke + 0.5 * self.finger_thickness
        half = (0.5 * self.finger_thickness, 0.5 * self.pad_width, hz)
        return (Box(half, Transform(None, (cx, 0.0, cz))), Box(half, Transform(None, (-cx, 0.0, cz))))

    @cached_property
    def body_boxes(self) -> tuple[Box, ...]:
        top = 0.5 * self.pad_length - self.finger_depth
        px, py, pz = self.palm_half
        palm = Box((px, py, pz), Transform(None, (0.0, 0.0, top - pz)))
        rest = self.flange_offset + top - 2 * pz
        if rest <= 1e-6:
            return (palm,)
        adapter = Box((0.02, 0.02, 0.5 * rest), Transform(None, (0.0, 0.0, -self.flange_offset + 0.5 * rest)))
        return (palm, adapter)


@dataclass(frozen=True)
class SupportSurface:
    """Horizontal rectangle; frame z is the upward normal, half_extents along frame x, y."""

    frame: Transform
    half_extents: tuple
    thickness: float = 0.02

    def __post_init__(self):
        if abs(self.frame.rotation[2, 2] - 1.0) > 1e-9:
            raise ValueError("support surfaces must be horizontal with +z normal")

    @property
    def height(self) -> float:
        return float(self.frame.translation[2])

    def contains_xy(self, x: float, y: float, margin: float = 0.0) -> bool:
        local = self.frame.inverse().apply([x, y, self.height])
        return bool(abs(local[0]) <= self.half_extents[0] + margin
                    and abs(local[1]) <= self.half_extents[1] + margin)

    def slab(self) -> Box:
        hx, hy = self.half_extents
        return Box((hx, hy, 0.5 * self.thickness),
                   self.frame @ Transform(None, (0.0, 0.0, -0.5 * self.thickness)))

    def footprint(self) -> tuple[np.ndarray, np.ndarray]:
        """World-frame (x, y) bounding box of the rectangle."""
        hx, hy = self.half_extents
        c = self.frame.apply(np.array([[sx * hx, sy * hy, 0.0] for sx in (-1, 1) for sy in (-1, 1)]))
        return c[:, :2].min(axis=0), c[:, :2].max(axis=0)


@dataclass(frozen=True)
class PlacementClass:
    id: int
    normal: np.ndarray
    offset: float
    contact_polygon: np.ndarray
    stable: bool
    face_frame: np.ndarray = field(repr=False)
    ref_point: np.ndarray = field(repr=False)

    @cached_property
    def canonical_rotation(self) -> np.ndarray:
        """Rotation putting this face down with face axes (e1, e2) on world (x, -y)."""
        W = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        return W @ self.face_frame.T


@dataclass(frozen=True)
class PlacementCoord:
    class_id: int
    x: float
    y: float
    theta: float

    def __post_init__(self):
        t = float(np.mod(self.theta, 2 * np.pi))
        # tiny negative angles round up to exactly 2 pi; keep the range half-open so that
        # normalizing twice changes nothing
        object.__setattr__(self, "theta", 0.0 if t >= 2 * np.pi else t)
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))


def _face_frame(n: np.ndarray) -> np.ndarray:
    """Columns e1, e2, e3 with e3 = n and e1 the object x axis projected on the face."""
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return np.column_stack([e1, e2, n])


def _polygon_2d(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex polygon through 2D points (duplicates dropped)."""
    hull = ConvexHull(points)
    return points[hull.vertices]


def _inside_shrunk(poly: np.ndarray, p: np.ndarray, margin: float) -> bool:
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        e = b - a
        d = (e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0])) / np.linalg.norm(e)
        if d <= margin:
            return False
    return True


def convex_hull_placements(obj: ObjectModel) -> list[PlacementClass]:
    pts = obj.vertices
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise ValueError("degenerate hull: object vertices are coplanar") from exc
    faces: list[list] = []
    for eq in hull.equations:
        n, off = eq[:3], -eq[3]
        for f in faces:
            if np.linalg.norm(f[0] - n) < HULL_NORMAL_TOL:
                break
        else:
            faces.append([n / np.linalg.norm(n), off])
    # deterministic order: by normal, descending lexicographic on rounded components
    faces.sort(key=lambda f: tuple(-np.round(f[0], 9)))
    out = []
    for cid, (n, _) in enumerate(faces):
        off = float(np.max(pts @ n))
        on = pts[np.abs(pts @ n - off) < 1e-9]
        E = _face_frame(n)
        uv = on @ E[:, :2]
        poly = _polygon_2d(uv)
        com = obj.center_of_mass
        com_uv = com @ E[:, :2]
        stable = _inside_shrunk(poly, com_uv, STABILITY_MARGIN)
        ref = com + (off - com @ n) * n
        out.append(PlacementClass(cid, n, off, poly, stable, E, ref))
    return out


class World:
    """Two arms, their grippers, one movable object, support surfaces and obstacles."""

    def __init__(self, arms: Sequence[SerialArm], gripper: Gripper, obj: ObjectModel,
                 surfaces: Sequence[SupportSurface], obstacles: Sequence[Box] = (),
                 gravity=(0.0, 0.0, -9.81), weights: MetricWeights = MetricWeights(),
                 mu: float = 0.5, cone_edges: int = 8, manipulation_point=(0.0, 0.0),
                 center_line=(1.0, 0.0), fingerprint: str = "", params: dict | None = None):
        if len(arms) != 2:
            raise ValueError("a world has exactly two arms")
        if not surfaces:
            raise ValueError("a world needs at least one support surface")
        self.arms = tuple(arms)
        self.gripper = gripper
        self.object = obj
        self.surfaces = tuple(surfaces)
        self.obstacles = tuple(obstacles)
        self.gravity = np.array(gravity, dtype=float)
        self.weights = weights
        self.mu = float(mu)
        self.cone_edges = int(cone_edges)
        self.manipulation_point = np.array(manipulation_point, dtype=float)
        cl = np.array(center_line, dtype=float)
        self.center_line = cl / np.linalg.norm(cl)
        self.fingerprint = fingerprint
        self.params = dict(params or {})
        self._pairs: dict = {}

    def with_obstacles(self, obstacles: Sequence[Box]) -> "World":
        return World(self.arms, self.gripper, self.object, self.surfaces, obstacles, self.gravity,
                     self.weights, self.mu, self.cone_edges, self.manipulation_point,
                     self.center_line, self.fingerprint + "+edit", self.params)

    @cached_property
    def placement_classes(self) -> list[PlacementClass]:
        return convex_hull_placements(self.object)

    @cached_property
    def stable_classes(self) -> list[int]:
        return [c.id for c in self.placement_classes if c.stable]

    def placement_class(self, cid: int) -> PlacementClass:
        if not 0 <= cid < len(self.placement_classes):
            raise PlacementError("UNKNOWN_CLASS", f"no placement class {cid}")
        return self.placement_classes[cid]

    def surface_at(self, x: float, y: float) -> SupportSurface:
        for s in self.surfaces:
            if s.contains_xy(x, y):
                return s
        raise PlacementError("NO_CONTACT", f"({x:.4f}, {y:.4f}) is not over a support surface")

    def translation_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        dia = self.object.diameter
        for s in self.surfaces:
            a, b = s.footprint()
            lo = np.minimum(lo, np.array([a[0] - dia, a[1] - dia, s.height]))
            hi = np.maximum(hi, np.array([b[0] + dia, b[1] + dia, s.height + 2 * dia]))
        return lo, hi

    # collision geometry: boxes with an owner and the frame they ride on
    @cached_property
    def _boxes(self):
        owner, fidx, local, halves, tag = [], [], [], [], []
        for ai, arm in enumerate(self.arms):
            for li, shapes in enumerate(arm.link_shapes):
                for b in shapes:
                    owner.append(ai)
                    fidx.append(li)
                    local.append(b.frame.matrix)
                    halves.append(b.half)
                    tag.append(("link", li))
            tool = arm.dof + 1
            for b in self.gripper.body_boxes:
                owner.append(ai)
                fidx.append(tool)
                local.append(b.frame.matrix)
                halves.append(b.half)
                tag.append(("palm", tool))
            for b in self.gripper.finger_boxes:
                owner.append(ai)
                fidx.append(tool)
                local.append(b.frame.matrix)
                halves.append(b.half)
                tag.append(("finger", tool))
        for li, b in enumerate(self.object.links):
            owner.append(OWNER_OBJECT)
            fidx.append(li)
            local.append(b.frame.matrix)
            halves.append(b.half)
            tag.append(("object", li))
        for b in list(self.obstacles) + [s.slab() for s in self.surfaces]:
            owner.append(OWNER_STATIC)
            fidx.append(0)
            local.append(b.frame.matrix)
            halves.append(b.half)
            tag.append(("static", 0))
        return (np.array(owner, dtype=np.int64), np.array(fidx, dtype=np.int64),
                np.ascontiguousarray(np.stack(local)), np.ascontiguousarray(np.stack(halves)), tag)

    def collision_pairs(self, held1=None, held2=None, arms=(True, True), obj: bool = True) -> np.ndarray:
        """Box pairs to test. heldN is the object link grasped by arm N (-1 for any link,
        None when that arm is not grasping); its fingers may touch that link."""
        key = (held1, held2, arms, obj)
        if key in self._pairs:
            return self._pairs[key]
        owner, fidx, _, _, tag = self._boxes
        held = (held1, held2)
        pairs = []
        m = len(owner)
        for a in range(m):
            for b in range(a + 1, m):
                oa, ob = owner[a], owner[b]
                if oa == OWNER_STATIC and ob == OWNER_STATIC:
                    continue
                if oa == OWNER_OBJECT and ob == OWNER_OBJECT:
                    continue
                if not obj and OWNER_OBJECT in (oa, ob):
                    continue
                if oa < 2 and not arms[oa] and ob >= 2:
                    continue
                if oa < 2 and ob < 2 and not (arms[oa] or arms[ob]):
                    continue
                if oa == ob and oa < 2 and abs(int(fidx[a]) - int(fidx[b])) <= 1:
                    continue
                if oa < 2 and ob == OWNER_OBJECT and tag[a][0] == "finger":
                    h = held[oa]
                    if h is not None and (h == -1 or h == tag[b][1]):
                        continue
                pairs.append((a, b))
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self._pairs[key] = arr
        return arr

    def first_collision(self, frames1: np.ndarray, frames2: np.ndarray, objT: np.ndarray,
                        pairs: np.ndarray) -> int:
        """Index of the first colliding sample in stacked frames, or -1."""
        owner, fidx, local, halves, _ = self._boxes
        return int(K.first_colliding_step(np.ascontiguousarray(frames1), np.ascontiguousarray(frames2),
                                          np.ascontiguousarray(objT), owner, fidx, local, halves,
                                          pairs, COLLISION_EPS))

    def colliding_pairs(self, c: CompositeConfig, pairs: np.ndarray) -> list[tuple]:
        """Every overlapping pair for one configuration (diagnostics and oracles)."""
        owner, fidx, local, halves, tag = self._boxes
        f1 = self.arms[0].frames(c.q1)
        f2 = self.arms[1].frames(c.q2)
        centers = np.empty((len(owner), 3))
        rots = np.empty((len(owner), 3, 3))
        K.place_boxes(f1, f2, c.T.matrix, owner, fidx, local, centers, rots, np.empty((4, 4)))
        hits = []
        for a, b in pairs:
            if K.obb_overlap(centers[a], rots[a], halves[a], centers[b], rots[b], halves[b], COLLISION_EPS):
                hits.append((tag[a], int(owner[a]), tag[b], int(owner[b])))
        return hits

    def placed_boxes(self, c: CompositeConfig):
        """World-frame centers, rotations and half-extents of every box."""
        owner, fidx, local, halves, tag = self._boxes
        f1 = self.arms[0].frames(c.q1)
        f2 = self.arms[1].frames(c.q2)
        centers = np.empty((len(owner), 3))
        rots = np.empty((len(owner), 3, 3))
        K.place_boxes(f1, f2, c.T.matrix, owner, fidx, local, centers, rots, np.empty((4, 4)))
        return centers, rots, halves.copy(), owner.copy(), list(tag)


def _held(grasp_active, grasp, arm: int):
    active = grasp_active[arm] if isinstance(grasp_active, (tuple, list)) else grasp_active
    if not active:
        return None
    if grasp is None:
        return -1
    return int((grasp.g1, grasp.g2)[arm].l)


def check_collision_free(w: World, c: CompositeConfig, grasp_active=False, grasp=None) -> bool:
    """True when no checked box pair overlaps. grasp_active may be per arm; with a grasp
    given only the fingers touching the grasped link are exempt."""
    pairs = w.collision_pairs(_held(grasp_active, grasp, 0), _held(grasp_active, grasp, 1))
    f1 = w.arms[0].frames(c.q1)[None]
    f2 = w.arms[1].frames(c.q2)[None]
    return w.first_collision(f1, f2, c.T.matrix[None], pairs) < 0


def placement_to_transform(w: World, p: PlacementCoord) -> Transform:
    pc = w.placement_class(p.class_id)
    surf = w.surface_at(p.x, p.y)
    R = rot_z(p.theta) @ pc.canonical_rotation
    t = np.array([p.x, p.y, surf.height]) - R @ pc.ref_point
    return Transform(R, t, check=False)


def placement_matrices(w: World, class_id: int, xyt: np.ndarray) -> np.ndarray:
    """Vectorized placement_to_transform over rows (x, y, theta); surface height taken
    per row."""
    pc = w.placement_class(class_id)
    xyt = np.atleast_2d(np.asarray(xyt, dtype=float))
    out = np.zeros((len(xyt), 4, 4))
    out[:, 3, 3] = 1.0
    Rc = pc.canonical_rotation
    for i, (x, y, th) in enumerate(xyt):
        R = rot_z(th) @ Rc
        out[i, :3, :3] = R
        out[i, :3, 3] = np.array([x, y, w.surface_at(x, y).height]) - R @ pc.ref_point
    return out


def classify_placement(w: World, T: Transform) -> PlacementCoord:
    R, t = T.rotation, T.translation
    verts = T.apply(w.object.vertices)
    zmin = float(verts[:, 2].min())
    low = verts[verts[:, 2] < zmin + CONTACT_TOL]
    cx, cy = low[:, 0].mean(), low[:, 1].mean()
    touching = [s for s in w.surfaces if abs(zmin - s.height) <= CONTACT_TOL
                and s.contains_xy(cx, cy, CONTACT_TOL)]
    if not touching:
        raise PlacementError("NO_CONTACT", "object is not resting on a support surface")
    for pc in w.placement_classes:
        nw = R @ pc.normal
        if np.arccos(np.clip(-nw[2], -1.0, 1.0)) <= FLUSH_ANGLE_TOL:
            M = R @ pc.canonical_rotation.T
            theta = float(np.arctan2(M[1, 0], M[0, 0]))
            ref = R @ pc.ref_point + t
            return PlacementCoord(pc.id, ref[0], ref[1], theta)
    raise PlacementError("TILTED", "no hull face is flush with the surface")
