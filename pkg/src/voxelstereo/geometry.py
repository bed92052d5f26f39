"""Pinhole cameras and metric voxel grids.

Conventions, fixed once for the whole package:

World frame:
  - Right handed. Generated scenes treat +y as up, but nothing here depends
    on that choice.

Camera frame (standard computer vision):
  - x right, y down, z forward; the camera looks down +z.
  - Extrinsics are world -> camera: X_cam = R @ X_world + t.
  - The camera center in world coordinates is -R.T @ t.

Pixels:
  - (u, v) = (column, row). Integer coordinates sit at sample centers;
    (0, 0) is the center of the top-left pixel, (width-1, height-1) the
    center of the bottom-right pixel.
  - u = fx * x_cam / z_cam + cx,  v = fy * y_cam / z_cam + cy.

Depth is camera-frame z in world length units. Points with z <= Z_EPS are
behind (or numerically on) the camera plane and project invalidly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Behind-camera rejection threshold, world units.
Z_EPS = 1e-6

# Orthonormality tolerance for rotation matrices.
_ROT_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        """3x3 intrinsic matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """World -> camera rigid transform: X_cam = rotation @ X_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ROT_TOL):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=_ROT_TOL):
            raise ValueError(f"rotation determinant {np.linalg.det(r)} != 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class VoxelGridSpec:
    """Axis-aligned cube of resolution^3 voxels.

    Voxel (i, j, k) indexes (x, y, z); its center is
    center + side * ((index + 0.5) / resolution - 0.5) per axis.
    """

    resolution: int = 32
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    side: float = 1.0

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        if self.side <= 0:
            raise ValueError(f"side must be positive, got {self.side}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def voxel_size(self) -> float:
        return self.side / self.resolution

    def axis_centers(self, axis: int) -> np.ndarray:
        v = self.resolution
        return self.center[axis] + self.side * ((np.arange(v) + 0.5) / v - 0.5)

    def corners(self) -> np.ndarray:
        """The 8 cube corners, shape (8, 3)."""
        h = 0.5 * self.side
        offs = np.array(
            [[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)]
        )
        return np.asarray(self.center) + offs

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        """Continuous grid coordinates: voxel center i maps exactly to i."""
        p = np.asarray(points, dtype=np.float64)
        return ((p - np.asarray(self.center)) / self.side + 0.5) * self.resolution - 0.5

    def grid_to_world(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return ((c + 0.5) / self.resolution - 0.5) * self.side + np.asarray(self.center)


@dataclass(frozen=True)
class PixelProjection:
    """Result of projecting a single world point."""

    u: float
    v: float
    z: float
    valid: bool


def project_points(
    points: np.ndarray, cam: Intrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points (N, 3) -> pixel coords (N, 2), depths (N,), valid (N,).

    valid is True iff z > Z_EPS and (u, v) lies inside
    [0, width-1] x [0, height-1]. For z <= Z_EPS the (u, v) entries are
    computed against a clamped depth and carry no meaning.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x_cam = pose.transform(pts)
    z = x_cam[:, 2]
    in_front = z > Z_EPS
    z_safe = np.where(in_front, z, 1.0)
    u = cam.fx * x_cam[:, 0] / z_safe + cam.cx
    v = cam.fy * x_cam[:, 1] / z_safe + cam.cy
    in_image = (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    valid = in_front & in_image
    return np.stack([u, v], axis=1), z, valid


def project_point(point: np.ndarray, cam: Intrinsics, pose: Pose) -> PixelProjection:
    """Single-point convenience wrapper around project_points."""
    uv, z, valid = project_points(np.asarray(point).reshape(1, 3), cam, pose)
    return PixelProjection(float(uv[0, 0]), float(uv[0, 1]), float(z[0]), bool(valid[0]))


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """Centers of all voxels, shape (V^3, 3), index i slowest (row-major)."""
    xs = spec.axis_centers(0)
    ys = spec.axis_centers(1)
    zs = spec.axis_centers(2)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def rays_through_pixels(
    uv: np.ndarray, cam: Intrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """World-frame rays for pixel coords (N, 2).

    Returns (origin (3,), directions (N, 3)); directions are unit length and
    the origin is the camera center shared by all rays.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    d_cam = np.stack(
        [
            (uv[:, 0] - cam.cx) / cam.fx,
            (uv[:, 1] - cam.cy) / cam.fy,
            np.ones(len(uv)),
        ],
        axis=1,
    )
    d_world = d_cam @ pose.rotation  # R.T applied to each row
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return pose.camera_center, d_world


def ray_through_pixel(
    u: float, v: float, cam: Intrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """World-frame (origin, unit direction) of the ray through pixel (u, v)."""
    origin, dirs = rays_through_pixels(np.array([[u, v]]), cam, pose)
    return origin, dirs[0]


def camera_z_range(spec: VoxelGridSpec, cam: Intrinsics, pose: Pose) -> tuple[float, float]:
    """Camera-frame depth interval covering the grid cube.

    z_near = max(Z_EPS, min corner depth), z_far = max corner depth; z_far is
    clamped so z_near <= z_far even for a cube entirely behind the camera.
    """
    z = pose.transform(spec.corners())[:, 2]
    z_near = max(Z_EPS, float(z.min()))
    z_far = max(z_near, float(z.max()))
    return z_near, z_far


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Pose of a camera at `position` looking toward `target`.

    Uses the y-down camera convention above; `up` picks the image's "up"
    in world space, with an automatic fallback when it is parallel to the
    viewing direction.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("camera position coincides with target")
    z_c = forward / n
    up = np.asarray(up, dtype=np.float64)
    x_c = np.cross(z_c, up)
    if np.linalg.norm(x_c) < 1e-8:  # looking straight along up
        up = np.array([0.0, 0.0, 1.0]) if abs(z_c[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        x_c = np.cross(z_c, up)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    r = np.stack([x_c, y_c, z_c], axis=0)
    return Pose(rotation=r, translation=-r @ position)


def scale_intrinsics(cam: Intrinsics, width: int, height: int) -> Intrinsics:
    """Intrinsics for the same camera resampled to width x height.

    Respects the pixel-center convention: continuous coordinate u maps to
    (u + 0.5) * scale - 0.5.
    """
    sx = width / cam.width
    sy = height / cam.height
    return Intrinsics(
        fx=cam.fx * sx,
        fy=cam.fy * sy,
        cx=(cam.cx + 0.5) * sx - 0.5,
        cy=(cam.cy + 0.5) * sy - 0.5,
        width=width,
        height=height,
    )
