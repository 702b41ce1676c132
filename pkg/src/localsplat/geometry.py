"""Cameras, rigid transforms, quaternions, ray maps and neighbor graphs.

Conventions fixed across the package:

* Poses map world points into the camera frame: ``x_cam = R @ x_world + t``.
* Quaternions are (w, x, y, z) with canonical sign: w >= 0, ties broken
  by the first nonzero of (x, y, z) being nonnegative.
* Pixel (u, v) has its center at (u + 0.5, v + 0.5); u indexes columns.
* Camera frame: x right, y down, z forward (z > 0 in front of camera).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonOrthonormal", "EmptyViewSet",
    "CameraIntrinsics", "RigidPose", "Camera", "NeighborGraph",
    "quat_canonical", "quat_normalize", "quat_multiply",
    "quat_from_rotation", "rotation_from_quat",
    "pose_identity", "pose_compose", "pose_inverse", "relative_pose",
    "pose_to_matrix", "pose_from_matrix", "camera_center",
    "local_ray_map", "build_neighbor_graph",
]


class NonOrthonormal(ValueError):
    """Matrix is not a proper rotation within tolerance."""


class EmptyViewSet(ValueError):
    """Operation requires at least one camera."""


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_canonical(q):
    """Flip sign so w >= 0; on w == 0 the first nonzero of (x,y,z) is >= 0."""
    q = np.asarray(q, dtype=np.float64)
    w = q[0]
    if w > 0:
        return q.copy()
    if w < 0:
        return -q
    for comp in q[1:]:
        if comp > 0:
            return q.copy()
        if comp < 0:
            return -q
    return q.copy()


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return quat_canonical(q / np.linalg.norm(q))


def quat_multiply(a, b):
    """Hamilton product a*b; composing rotations R(a) @ R(b)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rotation_from_quat(q):
    """Unit quaternion -> 3x3 rotation matrix (input normalized first)."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotation(R, tol=1e-6):
    """Proper rotation matrix -> canonical unit quaternion.

    Uses the symmetric-eigenvector method: the quaternion is the
    eigenvector of a 4x4 matrix built from R for its largest eigenvalue,
    which is stable for all rotation angles.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise NonOrthonormal(f"expected 3x3 matrix, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise NonOrthonormal(f"max |R^T R - I| = {err:.3e} > {tol:.1e}")
    if np.linalg.det(R) < 0:
        raise NonOrthonormal("det(R) < 0 (improper rotation)")

    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    K = np.array([
        [m00 + m11 + m22, m21 - m12, m02 - m20, m10 - m01],
        [m21 - m12, m00 - m11 - m22, m01 + m10, m02 + m20],
        [m02 - m20, m01 + m10, m11 - m00 - m22, m12 + m21],
        [m10 - m01, m02 + m20, m12 + m21, m22 - m00 - m11],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[:, np.argmax(vals)]
    return quat_canonical(q / np.linalg.norm(q))


# ---------------------------------------------------------------------------
# rigid poses (world -> camera)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if R.shape != (3, 3) or err > 1e-6:
            raise NonOrthonormal(f"rotation not orthonormal (err {err:.3e})")
        if np.linalg.det(R) < 0:
            raise NonOrthonormal("det(rotation) < 0")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points):
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def pose_identity() -> RigidPose:
    return RigidPose(np.eye(3), np.zeros(3))


def pose_compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """(a o b): apply b first, then a."""
    return RigidPose(a.rotation @ b.rotation,
                     a.rotation @ b.translation + a.translation)


def pose_inverse(p: RigidPose) -> RigidPose:
    return RigidPose(p.rotation.T, -p.rotation.T @ p.translation)


def relative_pose(p_j: RigidPose, p_jp: RigidPose) -> RigidPose:
    """Map camera-j' frame points into the camera-j frame (P_j o P_j'^-1)."""
    return pose_compose(p_j, pose_inverse(p_jp))


def pose_to_matrix(p: RigidPose):
    M = np.eye(4)
    M[:3, :3] = p.rotation
    M[:3, 3] = p.translation
    return M


def pose_from_matrix(M) -> RigidPose:
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (4, 4) or not np.allclose(M[3], [0, 0, 0, 1], atol=1e-9):
        raise NonOrthonormal("not a rigid 4x4 matrix")
    return RigidPose(M[:3, :3], M[:3, 3])


def camera_center(p: RigidPose):
    """Camera position in world coordinates: -R^T t."""
    return -p.rotation.T @ p.translation


# ---------------------------------------------------------------------------
# cameras and ray maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx],
                         [0, self.fy, self.cy],
                         [0, 0, 1.0]])


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: RigidPose
    id: int

    def center(self):
        return camera_center(self.pose)


def local_ray_map(K: CameraIntrinsics):
    """Per-pixel unit ray directions in the camera frame, shape (H, W, 3).

    Depends only on intrinsics: d(u,v) = normalize(((u+0.5-cx)/fx,
    (v+0.5-cy)/fy, 1)). Every direction has z > 0.
    """
    u = (np.arange(K.width) + 0.5 - K.cx) / K.fx
    v = (np.arange(K.height) + 0.5 - K.cy) / K.fy
    x, y = np.meshgrid(u, v)
    dirs = np.stack([x, y, np.ones_like(x)], axis=-1)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# neighbor graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NeighborGraph:
    """Ordered neighbor id lists per view; the view itself is always first."""
    neighbors: dict
    window: int
    dilation: int
    strategy: str
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for j, ns in self.neighbors.items():
            if len(ns) == 0 or ns[0] != j:
                raise ValueError(f"view {j} must head its own neighbor list")
            if len(set(ns)) != len(ns):
                raise ValueError(f"duplicate neighbors for view {j}")
            if len(ns) > self.window:
                raise ValueError(f"view {j} exceeds window {self.window}")

    def ids(self):
        return sorted(self.neighbors)

    def of(self, j):
        return self.neighbors[j]


def _candidate_order(cameras, j, strategy):
    cams = {c.id: c for c in cameras}
    if strategy == "spatial":
        cj = cams[j].center()
        return sorted(cams, key=lambda i: (float(np.linalg.norm(cams[i].center() - cj)), i))
    if strategy == "sequential":
        return sorted(cams, key=lambda i: (abs(i - j), i))
    raise ValueError(f"unknown strategy {strategy!r}")


def build_neighbor_graph(cameras, window, dilation=1, strategy="spatial") -> NeighborGraph:
    """Select <= window neighbors per view by striding the sorted candidates.

    Candidates are all views sorted by closeness to the query view
    (strategy 'spatial': Euclidean distance between camera centers;
    'sequential': |id difference|), ties broken by ascending id. The query
    view sits at stride index 0 by construction (distance zero), so it is
    always first. The stride picks candidate indices 0, dilation,
    2*dilation, ... until `window` views are collected or the candidates
    run out (the set is clamped short in that case).
    """
    if len(cameras) == 0:
        raise EmptyViewSet("need at least one camera")
    if window < 1 or dilation < 1:
        raise ValueError("window and dilation must be >= 1")
    ids = [c.id for c in cameras]
    if len(set(ids)) != len(ids):
        raise ValueError("camera ids must be unique")

    neighbors = {}
    for j in ids:
        order = _candidate_order(cameras, j, strategy)
        picked = order[::dilation][:window]
        if picked[0] != j:
            # Another view shares this camera center and a smaller id.
            picked = [j] + [i for i in picked if i != j][:window - 1]
        neighbors[j] = tuple(picked)
    return NeighborGraph(neighbors, window, dilation, strategy)
