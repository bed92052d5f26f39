"""Differentiable transfer of features between image space and the voxel grid.

Three linear (in the feature values) operators, each with an explicit
vector-Jacobian product:

  bilinear_sample   gather from a 2D map at continuous pixel coordinates
  unproject         replicate image features along viewing rays into the grid
                    by projecting every voxel center into the image
  project           sample the grid on equally spaced depth planes along each
                    pixel's ray and stack the samples in ascending-z channel
                    blocks

Feature maps are (H, W, C) arrays, feature grids (V, V, V, C) arrays indexed
like voxel_centers (axis 0 = x). Samples that fall outside the image or the
grid cube contribute zeros; gradients are taken with respect to feature
values only, never camera parameters or sample coordinates.

Nearest-neighbor grid lookup rounds half-down (floor(x + 0.5 - eps)) so that
tie-breaking is identical on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, VoxelGridSpec, camera_z_range, project_points

# Tie-break nudge for nearest-neighbor rounding; half-integer coordinates
# round down.
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class GeomFeatureConfig:
    """Geometric channels appended during unprojection."""

    append_depth: bool = False
    append_ray_dir: bool = False

    def out_channels(self, c_in: int) -> int:
        return c_in + int(self.append_depth) + 3 * int(self.append_ray_dir)


def _bilinear_weights(fmap_shape, pts):
    """Corner indices, weights and inside-ness for bilinear interpolation.

    Returns (idx_v, idx_u, weights, in_range, valid): each of the first four
    has a leading axis of 4 for the corners (v0u0, v0u1, v1u0, v1u1);
    in_range marks corners inside the image, valid marks points fully inside
    [0, W-1] x [0, H-1].
    """
    h, w = fmap_shape[0], fmap_shape[1]
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    u, v = pts[:, 0], pts[:, 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    du = u - u0
    dv = v - v0
    idx_u = np.stack([u0, u0 + 1, u0, u0 + 1])
    idx_v = np.stack([v0, v0, v0 + 1, v0 + 1])
    weights = np.stack([(1 - du) * (1 - dv), du * (1 - dv), (1 - du) * dv, du * dv])
    in_range = (idx_u >= 0) & (idx_u < w) & (idx_v >= 0) & (idx_v < h)
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    return idx_v, idx_u, weights, in_range, valid


def bilinear_sample(fmap: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample (H, W, C) at continuous (u, v) points (N, 2).

    Out-of-image corners contribute zeros; valid[n] is True iff pts[n] lies
    fully inside the sample rectangle.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    idx_v, idx_u, weights, in_range, valid = _bilinear_weights(fmap.shape, pts)
    out = np.zeros((idx_u.shape[1], fmap.shape[2]))
    for c in range(4):
        ok = in_range[c]
        if ok.any():
            out[ok] += weights[c, ok, None] * fmap[idx_v[c, ok], idx_u[c, ok]]
    return out, valid


def bilinear_sample_vjp(fmap: np.ndarray, pts: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <bilinear_sample(fmap, pts), upstream> w.r.t. fmap."""
    fmap = np.asarray(fmap)
    upstream = np.asarray(upstream, dtype=np.float64)
    idx_v, idx_u, weights, in_range, _ = _bilinear_weights(fmap.shape, pts)
    grad = np.zeros(fmap.shape)
    for c in range(4):
        ok = in_range[c]
        if ok.any():
            np.add.at(grad, (idx_v[c, ok], idx_u[c, ok]),
                      weights[c, ok, None] * upstream[ok])
    return grad


def _unproject_geometry(cam: Intrinsics, pose: Pose, spec: VoxelGridSpec):
    from .geometry import voxel_centers

    centers = voxel_centers(spec)
    uv, z, valid = project_points(centers, cam, pose)
    return centers, uv, z, valid


def unproject(
    fmap: np.ndarray,
    cam: Intrinsics,
    pose: Pose,
    spec: VoxelGridSpec,
    gcfg: GeomFeatureConfig = GeomFeatureConfig(),
) -> np.ndarray:
    """Lift a (H, W, C) map into a (V, V, V, C') grid along viewing rays.

    Every voxel center is projected into the image and bilinearly sampled;
    invalid projections (behind the camera or out of frame) get zero
    features. Geometric channels (camera depth, unit world ray direction)
    are filled for every voxel regardless of projection validity.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    v = spec.resolution
    centers, uv, z, valid = _unproject_geometry(cam, pose, spec)
    vals, _ = bilinear_sample(fmap, uv)
    vals[~valid] = 0.0
    parts = [vals]
    if gcfg.append_depth:
        parts.append(z[:, None])
    if gcfg.append_ray_dir:
        rays = centers - pose.camera_center
        norms = np.linalg.norm(rays, axis=1, keepdims=True)
        parts.append(np.divide(rays, norms, out=np.zeros_like(rays), where=norms > 0))
    return np.concatenate(parts, axis=1).reshape(v, v, v, -1)


def unproject_vjp(
    fmap: np.ndarray,
    cam: Intrinsics,
    pose: Pose,
    spec: VoxelGridSpec,
    gcfg: GeomFeatureConfig,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of <unproject(fmap, ...), upstream> w.r.t. fmap.

    Geometric channels do not touch fmap and contribute nothing.
    """
    fmap = np.asarray(fmap)
    c_in = fmap.shape[2]
    _, uv, _, valid = _unproject_geometry(cam, pose, spec)
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, gcfg.out_channels(c_in))
    up_feat = up[:, :c_in] * valid[:, None]
    return bilinear_sample_vjp(fmap, uv, up_feat)


def plane_depths(
    spec: VoxelGridSpec, cam: Intrinsics, pose: Pose, n_planes: int
) -> tuple[np.ndarray, float]:
    """Midpoint depth samples of [z_near, z_far] and their spacing."""
    z_near, z_far = camera_z_range(spec, cam, pose)
    spacing = (z_far - z_near) / n_planes
    return z_near + (np.arange(n_planes) + 0.5) * spacing, spacing


def _sweep_points(cam: Intrinsics, pose: Pose, z_values: np.ndarray) -> np.ndarray:
    """World points on every pixel's ray at each camera depth.

    Returns (N_z, H, W, 3) for the full pixel raster of `cam`.
    """
    us = np.arange(cam.width, dtype=np.float64)
    vs = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)  # (H, W)
    x_over_z = (uu - cam.cx) / cam.fx
    y_over_z = (vv - cam.cy) / cam.fy
    zk = z_values.reshape(-1, 1, 1)
    x_cam = np.stack(
        [x_over_z * zk, y_over_z * zk, np.broadcast_to(zk, (len(z_values),) + uu.shape)],
        axis=-1,
    )
    return (x_cam - pose.translation) @ pose.rotation  # R.T @ (x_cam - t), row form


def _grid_sample_indices(spec: VoxelGridSpec, points: np.ndarray, interp: str):
    """Voxel indices and weights for sampling the grid at world points.

    Returns (idx, weights, n_corners): idx has shape (n_corners, N, 3) and
    out-of-grid corners are marked by weight 0 with idx clamped to 0.
    """
    v = spec.resolution
    g = spec.world_to_grid(points.reshape(-1, 3))
    if interp == "nearest":
        idx = np.floor(g + 0.5 - _TIE_EPS).astype(np.int64)[None]
        weights = np.ones((1, len(g)))
    elif interp == "trilinear":
        g0 = np.floor(g).astype(np.int64)
        frac = g - g0
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        idx = g0[None] + corners[:, None, :]
        w = np.where(corners[:, None, :] == 1, frac[None], 1.0 - frac[None])
        weights = w.prod(axis=2)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    inside = ((idx >= 0) & (idx < v)).all(axis=2)
    weights = np.where(inside, weights, 0.0)
    idx = np.where(inside[..., None], idx, 0)
    return idx, weights


def project(
    grid: np.ndarray,
    spec: VoxelGridSpec,
    cam: Intrinsics,
    pose: Pose,
    n_planes: int = 32,
    interp: str = "nearest",
) -> np.ndarray:
    """Sample a (V, V, V, C) grid along each pixel's ray at n_planes depths.

    Returns (H, W, n_planes * C) with plane k's channels at
    [k*C, (k+1)*C), ascending in z. Samples outside the grid cube are zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    c = grid.shape[3]
    z_values, _ = plane_depths(spec, cam, pose, n_planes)
    pts = _sweep_points(cam, pose, z_values)
    idx, weights = _grid_sample_indices(spec, pts, interp)
    flat = grid.reshape(-1, c)
    v = spec.resolution
    lin = (idx[..., 0] * v + idx[..., 1]) * v + idx[..., 2]
    out = np.einsum("kn,knc->nc", weights, flat[lin])
    # (N_z, H, W, C) -> (H, W, N_z * C)
    return out.reshape(n_planes, cam.height, cam.width, c).transpose(1, 2, 0, 3).reshape(
        cam.height, cam.width, n_planes * c
    )


def project_vjp(
    grid: np.ndarray,
    spec: VoxelGridSpec,
    cam: Intrinsics,
    pose: Pose,
    n_planes: int,
    interp: str,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of <project(grid, ...), upstream> w.r.t. grid values."""
    grid = np.asarray(grid)
    c = grid.shape[3]
    z_values, _ = plane_depths(spec, cam, pose, n_planes)
    pts = _sweep_points(cam, pose, z_values)
    idx, weights = _grid_sample_indices(spec, pts, interp)
    up = np.asarray(upstream, dtype=np.float64).reshape(
        cam.height, cam.width, n_planes, c
    ).transpose(2, 0, 1, 3).reshape(-1, c)
    v = spec.resolution
    lin = (idx[..., 0] * v + idx[..., 1]) * v + idx[..., 2]
    grad = np.zeros((v * v * v, c))
    for corner in range(len(lin)):
        np.add.at(grad, lin[corner], weights[corner, :, None] * up)
    return grad.reshape(grid.shape)
