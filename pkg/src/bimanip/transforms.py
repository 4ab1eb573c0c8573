"""Rigid transforms, the composite-configuration metric, SE(3) sampling and pose paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9


class InvalidRotation(ValueError):
    pass


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rot_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    th = float(np.linalg.norm(w))
    if th < 1e-12:
        return np.eye(3) + hat(w)
    k = hat(w / th)
    return np.eye(3) + np.sin(th) * k + (1.0 - np.cos(th)) * (k @ k)


def rot_axis_angle(R: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Axis and angle of R; the flag is set when the angle is pi and the axis was
    picked from the symmetric part."""
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(v))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    th = float(np.arctan2(s, c))
    if th < 1e-12:
        return np.array([0.0, 0.0, 1.0]), th, False
    if np.pi - th > 1e-6:
        return v / s, th, False
    B = 0.5 * (0.5 * (R + R.T) + np.eye(3))
    k = int(np.argmax(np.abs(np.diag(B))))
    u = B[:, k] / np.linalg.norm(B[:, k])
    degenerate = s < 1e-12
    if not degenerate and float(u @ v) < 0.0:
        u = -u
    elif degenerate and u[k] < 0.0:
        u = -u
    return u, th, degenerate


def rot_log(R: np.ndarray) -> np.ndarray:
    u, th, _ = rot_axis_angle(R)
    return u * th


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    tr = float(np.trace(R))
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotation("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise InvalidRotation("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidRotation("rotation determinant is not +1")


class Transform:
    """Immutable rigid transform stored as a homogeneous 4x4 matrix."""

    __slots__ = ("_m",)

    def __init__(self, rotation=None, translation=None, *, check: bool = True):
        m = np.eye(4)
        if rotation is not None:
            m[:3, :3] = np.asarray(rotation, dtype=float)
        if translation is not None:
            m[:3, 3] = np.asarray(translation, dtype=float)
        if check:
            check_rotation(m[:3, :3])
            if not np.all(np.isfinite(m[:3, 3])):
                raise ValueError("translation must be finite")
        m.flags.writeable = False
        self._m = m

    @classmethod
    def from_matrix(cls, m, check: bool = True) -> "Transform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3], check=check)

    @classmethod
    def identity(cls) -> "Transform":
        return cls(check=False)

    @classmethod
    def from_rotvec(cls, w, translation=None) -> "Transform":
        return cls(rot_exp(np.asarray(w, dtype=float)), translation, check=False)

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def rotation(self) -> np.ndarray:
        return self._m[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self._m[:3, 3]

    def __matmul__(self, other: "Transform") -> "Transform":
        return Transform.from_matrix(self._m @ other._m, check=False)

    def inverse(self) -> "Transform":
        R = self.rotation
        return Transform(R.T, -R.T @ self.translation, check=False)

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def __eq__(self, other) -> bool:
        return isinstance(other, Transform) and np.array_equal(self._m, other._m)

    def __hash__(self) -> int:
        return hash(self._m.tobytes())

    def __repr__(self) -> str:
        return f"Transform(t={self.translation.tolist()}, rotvec={rot_log(self.rotation).tolist()})"


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodesic_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of Ra^T Rb in [0, pi]."""
    Rd = np.asarray(Ra).T @ np.asarray(Rb)
    v = 0.5 * np.array([Rd[2, 1] - Rd[1, 2], Rd[0, 2] - Rd[2, 0], Rd[1, 0] - Rd[0, 1]])
    c = 0.5 * (float(np.trace(Rd)) - 1.0)
    # atan2 keeps full precision near 0 and pi where arccos does not
    return float(np.clip(np.arctan2(np.linalg.norm(v), c), 0.0, np.pi))


@dataclass(frozen=True)
class MetricWeights:
    alpha: float = 0.5
    rot_weight: float = 1.0
    trans_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.rot_weight < 0 or self.trans_weight < 0:
            raise ValueError("metric weights must be nonnegative")


@dataclass(frozen=True, eq=False)
class CompositeConfig:
    """Both arms' joint vectors plus the object pose."""

    q1: np.ndarray
    q2: np.ndarray
    T: Transform

    def __post_init__(self):
        for name in ("q1", "q2"):
            v = np.array(getattr(self, name), dtype=float)
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CompositeConfig) and np.array_equal(self.q1, other.q1)
                and np.array_equal(self.q2, other.q2) and self.T == other.T)


def pose_distance(Ta: Transform, Tb: Transform, w: MetricWeights = MetricWeights()) -> float:
    """Object part of the composite metric, without the (1 - alpha) factor."""
    return (w.rot_weight * geodesic_distance(Ta.rotation, Tb.rotation)
            + w.trans_weight * float(np.linalg.norm(Ta.translation - Tb.translation)))


def composite_distance(ca: CompositeConfig, cb: CompositeConfig,
                       w: MetricWeights = MetricWeights()) -> float:
    if ca.q1.shape != cb.q1.shape or ca.q2.shape != cb.q2.shape:
        raise ValueError("joint vector dimensions differ")
    arms = float(np.linalg.norm(ca.q1 - cb.q1) + np.linalg.norm(ca.q2 - cb.q2))
    return w.alpha * arms + (1.0 - w.alpha) * pose_distance(ca.T, cb.T, w)


def sample_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a uniform unit quaternion (Shoemake's method)."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.array([b * np.cos(2 * np.pi * u3), a * np.sin(2 * np.pi * u2),
                  a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3)])
    return quat_to_matrix(q)


def sample_se3(bounds, rng: np.random.Generator) -> Transform:
    """bounds = (lo, hi), each a 3-vector."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo):
        raise ValueError("bounds must be a nonempty axis-aligned box")
    R = sample_rotation(rng)
    t = lo + (hi - lo) * rng.random(3)
    return Transform(R, t, check=False)


def smoothstep(s):
    return 3.0 * s * s - 2.0 * s * s * s


@dataclass(frozen=True)
class PosePath:
    """Geodesic rotation plus cubic translation between two poses."""

    start: Transform
    end: Transform
    axis: np.ndarray = field(repr=False)
    angle: float = 0.0
    degenerate_axis: bool = False

    def __call__(self, s: float) -> Transform:
        return Transform.from_matrix(self.sample(np.array([s]))[0], check=False)

    def sample(self, s: np.ndarray) -> np.ndarray:
        """Poses at the parameters s, shape (len(s), 4, 4)."""
        s = np.asarray(s, dtype=float)
        out = np.zeros((len(s), 4, 4))
        out[:, 3, 3] = 1.0
        R0 = self.start.rotation
        k = hat(self.axis)
        kk = k @ k
        for i, si in enumerate(s):
            if si == 1.0:
                out[i, :3, :3] = self.end.rotation
            else:
                a = si * self.angle
                out[i, :3, :3] = R0 @ (np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * kk)
        h = smoothstep(s)
        out[:, :3, 3] = (self.start.translation[None, :]
                         + h[:, None] * (self.end.translation - self.start.translation)[None, :])
        return out

    def length(self, w: MetricWeights = MetricWeights()) -> float:
        return pose_distance(self.start, self.end, w)


def interpolate_pose_path(T0: Transform, T1: Transform) -> PosePath:
    axis, angle, degenerate = rot_axis_angle(T0.rotation.T @ T1.rotation)
    return PosePath(T0, T1, axis, angle, degenerate)


def stack_poses(poses: Sequence[Transform]) -> np.ndarray:
    return np.stack([p.matrix for p in poses])
