"""Geometric primitives shared by every stage of the pipeline.

Conventions used throughout the package:

* Pixels are addressed as ``(u, v) = (column, row)``; pixel centers sit on
  integer coordinates and the origin is the top-left pixel.
* Cameras follow the OpenCV frame: x right, y down, z forward.
* A camera's :class:`PoseSE3` is its *extrinsic*: it maps world
  coordinates into the camera frame (``x_cam = R @ x_world + T``).
  Trajectory files store the inverse (camera-to-world), see ``evalkit``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROT_TOL = 1e-9


class GeometryError(ValueError):
    """Raised on a domain violation such as projecting a point behind the camera."""


@dataclass(frozen=True)
class ImageSize:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.height, self.width))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with a single focal length (square pixels)."""

    focal: float
    size: ImageSize
    principal_point: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.principal_point is None:
            center = ((self.size.width - 1) / 2.0, (self.size.height - 1) / 2.0)
            object.__setattr__(self, "principal_point", center)

    @property
    def cx(self) -> float:
        return float(self.principal_point[0])

    @property
    def cy(self) -> float:
        return float(self.principal_point[1])

    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def with_focal(self, focal: float) -> "Intrinsics":
        return Intrinsics(float(focal), self.size, self.principal_point)


def _check_rotation(rot: np.ndarray, tol: float = ROT_TOL) -> None:
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tol, rtol=0):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValueError("rotation determinant is not 1")


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3)."""
    u, _, vt = np.linalg.svd(rot)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot)
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "PoseSE3":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_wxyz, translation) -> "PoseSE3":
        return cls(quat_to_rotmat(quat_wxyz), translation)

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def quaternion(self) -> np.ndarray:
        return rotmat_to_quat(self.rotation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return PoseSE3(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates when the pose is an extrinsic."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        _check_rotation(rot)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Sim3":
        rt = self.rotation.T
        return Sim3(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)


def _grid_check(arr: np.ndarray, size: ImageSize, trailing: tuple = ()) -> None:
    if arr.shape != size.shape + trailing:
        raise ValueError(f"expected shape {size.shape + trailing}, got {arr.shape}")


@dataclass(frozen=True)
class Pointmap:
    points: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"pointmap must be HxWx3, got {pts.shape}")
        valid = np.isfinite(pts).all(axis=-1)
        if self.valid is not None:
            valid &= np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @property
    def size(self) -> ImageSize:
        return ImageSize(*self.points.shape[:2])


@dataclass(frozen=True)
class ConfidenceMap:
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("confidence must be HxW")
        if not (np.isfinite(vals).all() and (vals >= 0).all()):
            raise ValueError("confidence must be finite and non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def size(self) -> ImageSize:
        return ImageSize(*self.values.shape)


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be HxW")
        valid = np.isfinite(d) & (d > 0)
        if self.valid is not None:
            valid &= np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", valid)

    @property
    def size(self) -> ImageSize:
        return ImageSize(*self.depth.shape)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel 2D displacement ``(du, dv)``; invalid entries carry no correspondence."""

    flow: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        f = np.asarray(self.flow, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got {f.shape}")
        valid = np.isfinite(f).all(axis=-1)
        if self.valid is not None:
            valid &= np.asarray(self.valid, dtype=bool)
        f = np.where(valid[..., None], f, 0.0)
        object.__setattr__(self, "flow", f)
        object.__setattr__(self, "valid", valid)

    @property
    def size(self) -> ImageSize:
        return ImageSize(*self.flow.shape[:2])


@dataclass(frozen=True)
class StaticMask:
    is_static: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "is_static", np.asarray(self.is_static, dtype=bool))

    @property
    def size(self) -> ImageSize:
        return ImageSize(*self.is_static.shape)

    @property
    def is_dynamic(self) -> np.ndarray:
        return ~self.is_static


# -- rotations ---------------------------------------------------------------

def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix; the input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    cos = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_rotmat(q)


# -- projection ---------------------------------------------------------------

def pixel_grid(size: ImageSize) -> np.ndarray:
    """HxWx2 array of ``(u, v)`` pixel-center coordinates."""
    v, u = np.mgrid[0:size.height, 0:size.width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def project(point, k: Intrinsics) -> np.ndarray:
    """Project camera-frame point(s) ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise GeometryError("cannot project a point with non-positive depth")
    return np.stack([k.focal * p[..., 0] / z + k.cx, k.focal * p[..., 1] / z + k.cy], axis=-1)


def backproject(pixel, depth, k: Intrinsics) -> np.ndarray:
    """Lift pixel(s) ``(..., 2)`` at the given depth(s) to camera-frame points ``(..., 3)``."""
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise GeometryError("depth must be positive")
    x = (px[..., 0] - k.cx) / k.focal * d
    y = (px[..., 1] - k.cy) / k.focal * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def apply_pose(pose: PoseSE3, point) -> np.ndarray:
    return pose.apply(point)


def pointmap_from_depth(depth: DepthMap, k: Intrinsics, pose: PoseSE3) -> Pointmap:
    """World pointmap of a depth map seen by a camera with extrinsic ``pose``."""
    if depth.size != k.size:
        raise ValueError("depth and intrinsics disagree on image size")
    d = np.where(depth.valid, depth.depth, 1.0)
    cam = backproject(pixel_grid(depth.size), d, k)
    world = pose.inverse().apply(cam)
    world[~depth.valid] = np.nan
    return Pointmap(world, depth.valid)


def depth_from_pointmap(pm: Pointmap, pose: PoseSE3) -> DepthMap:
    """Depth of each point in the camera frame given by extrinsic ``pose``."""
    pts = np.where(pm.valid[..., None], pm.points, 0.0)
    z = pose.apply(pts)[..., 2]
    valid = pm.valid & (z > 0)
    return DepthMap(np.where(valid, z, np.nan), valid)


def camera_points(depth: DepthMap, k: Intrinsics) -> np.ndarray:
    """Camera-frame points for a depth map; invalid pixels become NaN."""
    d = np.where(depth.valid, depth.depth, 1.0)
    cam = backproject(pixel_grid(depth.size), d, k)
    cam[~depth.valid] = np.nan
    return cam
