"""Frame-aware rigid transforms and point clouds.

Poses are SE(3) elements stored as a unit quaternion (w, x, y, z) plus a
translation vector, tagged with a parent and a child frame name.  A pose
``T`` with parent ``M`` and child ``B`` maps coordinates of a point from
frame ``B`` into frame ``M``: ``p_M = R p_B + t``.

Frame names are checked at every operation boundary, so composing or
applying transforms across mismatched frames fails loudly instead of
silently producing garbage coordinates.  All types in this module are
immutable values and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FrameMismatchError",
    "DegenerateGeometryError",
    "Pose",
    "PointCloud3",
    "compose",
    "inverse",
    "apply",
    "yaw_difference",
    "quat_multiply",
    "quat_to_matrix",
    "matrix_to_quat",
]


class FrameMismatchError(ValueError):
    """Operation attempted across incompatible coordinate frames."""


class DegenerateGeometryError(ValueError):
    """Geometric quantity is undefined for the given configuration."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit (w, x, y, z) quaternion."""
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit (w, x, y, z) quaternion of a rotation matrix.

    Uses Shepperd's branch selection for numerical robustness near
    180-degree rotations.
    """
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def _canonical_unit_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError(f"quaternion must be a finite 4-vector, got {q!r}")
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("quaternion norm is numerically zero")
    q = q / n
    # Canonical sign (w >= 0) keeps long composition chains bit-reproducible.
    if q[0] < 0.0 or (q[0] == 0.0 and (q[1] < 0.0 or (q[1] == 0.0 and (q[2] < 0.0 or (q[2] == 0.0 and q[3] < 0.0))))):
        q = -q
    return q


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping child-frame coordinates into the parent frame."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # meters
    parent_frame: str = "map"
    child_frame: str = "body"

    def __post_init__(self):
        q = _canonical_unit_quat(self.rotation)
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError(f"translation must be a finite 3-vector, got {t!r}")
        object.__setattr__(self, "rotation", _freeze(q))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls, frame: str = "map") -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), frame, frame)

    @classmethod
    def from_matrix(cls, R, t, parent_frame: str = "map", child_frame: str = "body") -> "Pose":
        return cls(matrix_to_quat(np.asarray(R)), np.asarray(t, dtype=float), parent_frame, child_frame)

    @classmethod
    def from_yaw(cls, yaw_rad: float, t=(0.0, 0.0, 0.0), parent_frame: str = "map",
                 child_frame: str = "body") -> "Pose":
        """Pose rotated about +z by ``yaw_rad`` with translation ``t``."""
        half = 0.5 * yaw_rad
        return cls(np.array([np.cos(half), 0.0, 0.0, np.sin(half)]), np.asarray(t, dtype=float),
                   parent_frame, child_frame)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.rotation)
        M[:3, 3] = self.translation
        return M

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def yaw(self) -> float:
        """Heading of the body x-axis in the parent-frame ground plane, radians."""
        ex = quat_to_matrix(self.rotation)[:, 0]
        if np.hypot(ex[0], ex[1]) < 1e-9:
            raise DegenerateGeometryError("body x-axis is vertical; yaw undefined")
        return float(np.arctan2(ex[1], ex[0]))

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6, suppress_small=True)
        t = np.array2string(self.translation, precision=6, suppress_small=True)
        return f"Pose({self.parent_frame}<-{self.child_frame}, q={q}, t={t})"


@dataclass(frozen=True)
class PointCloud3:
    """Ordered set of 3D points tagged with the frame they are expressed in."""

    points: np.ndarray  # (n, 3) meters
    frame: str = "body"

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.size == 0:
            p = np.zeros((0, 3))
        p = p.reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _freeze(p))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, frame: str = "body") -> "PointCloud3":
        return cls(np.zeros((0, 3)), frame)


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition ``a . b``; requires ``a.child_frame == b.parent_frame``."""
    if a.child_frame != b.parent_frame:
        raise FrameMismatchError(
            f"cannot compose: child frame {a.child_frame!r} != parent frame {b.parent_frame!r}"
        )
    q = quat_multiply(a.rotation, b.rotation)
    t = quat_to_matrix(a.rotation) @ b.translation + a.translation
    return Pose(q, t, a.parent_frame, b.child_frame)


def inverse(p: Pose) -> Pose:
    """Inverse transform; parent and child frames swap."""
    q_inv = np.array([p.rotation[0], -p.rotation[1], -p.rotation[2], -p.rotation[3]])
    t_inv = -(quat_to_matrix(q_inv) @ p.translation)
    return Pose(q_inv, t_inv, p.child_frame, p.parent_frame)


def apply(T: Pose, c: PointCloud3) -> PointCloud3:
    """Transform every point of ``c`` into the parent frame of ``T``."""
    if c.frame != T.child_frame:
        raise FrameMismatchError(
            f"cloud is in frame {c.frame!r} but transform expects {T.child_frame!r}"
        )
    pts = c.points @ quat_to_matrix(T.rotation).T + T.translation
    return PointCloud3(pts, T.parent_frame)


def transform_points(T: Pose, pts: np.ndarray) -> np.ndarray:
    """Frame-unchecked point transform for inner loops."""
    return np.asarray(pts, dtype=float) @ quat_to_matrix(T.rotation).T + T.translation


def yaw_difference(a: Pose, b: Pose) -> float:
    """Absolute ground-plane heading difference in degrees, in [0, 180].

    Both poses must share a parent frame.  Raises
    :class:`DegenerateGeometryError` when either body x-axis is vertical.
    """
    if a.parent_frame != b.parent_frame:
        raise FrameMismatchError(
            f"poses live in different parent frames: {a.parent_frame!r} vs {b.parent_frame!r}"
        )
    d = np.degrees(abs(a.yaw() - b.yaw())) % 360.0
    return float(min(d, 360.0 - d))
