"""Pinhole camera model and differentiable view synthesis.

Poses map target-camera coordinates into source-camera coordinates
(``p_src = R p_tgt + t``), which is what sampling the source image at the
reprojected target pixels needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import Tensor, clip, concat, matmul, reshape, stack, tensor, transpose

NEAR_Z = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def for_image(cls, h, w, hfov_deg=90.0):
        """Square pixels, principal point at the image centre."""
        f = (w / 2) / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (w - 1) / 2, (h - 1) / 2)

    def scaled(self, sy, sx):
        """Intrinsics after resizing the image by (sy, sx), pixel-centre aligned."""
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5
        )

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class Pose:
    """Axis-angle rotation and translation; fields may be arrays or Tensors
    with a leading batch axis."""

    rotation: object
    translation: object

    @classmethod
    def identity(cls, batch=1, dtype=np.float64):
        return cls(np.zeros((batch, 3), dtype), np.zeros((batch, 3), dtype))

    def inverse(self):
        """Exact inverse for array-valued poses."""
        r = np.atleast_2d(_arr(self.rotation))
        t = np.atleast_2d(_arr(self.translation))
        rot = ops.rodrigues(Tensor(r)).data
        t_inv = -np.einsum("nji,nj->ni", rot, t)
        return Pose(-r, t_inv)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def disp_to_depth(disp, d_min=0.1, d_max=12.0):
    """Bounded inverse map from sigmoid disparity in (0,1) to depth in [d_min, d_max]."""
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    lo, hi = 1.0 / d_max, 1.0 / d_min
    if isinstance(disp, Tensor):
        return 1.0 / (disp * (hi - lo) + lo)
    return 1.0 / (lo + (hi - lo) * np.asarray(disp))


def pixel_grid(h, w, dtype=np.float64):
    v, u = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return u, v


def backproject(depth, K):
    """Camera-frame points (..., H, W, 3) from a depth map (..., H, W)."""
    depth = tensor(depth)
    h, w = depth.shape[-2:]
    u, v = pixel_grid(h, w, depth.dtype)
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    return reshape(depth, depth.shape + (1,)) * Tensor(rays.astype(depth.dtype))


def project(points, pose, K):
    """Transform target-frame points by ``pose`` and project them.

    Returns pixel coordinates (N,H,W,2), the transformed depth (N,H,W) and a
    boolean mask that is False where the depth is at or behind the near plane.
    """
    points = tensor(points)
    if points.ndim == 3:
        points = reshape(points, (1,) + points.shape)
    n, h, w, _ = points.shape
    rot = tensor(pose.rotation)
    trans = tensor(pose.translation)
    if rot.ndim == 1:
        rot = reshape(rot, (1, 3))
    if trans.ndim == 1:
        trans = reshape(trans, (1, 3))
    R = ops.rodrigues(rot)
    flat = reshape(points, (n, h * w, 3))
    moved = matmul(flat, transpose(R, (0, 2, 1))) + reshape(trans, (trans.shape[0], 1, 3))
    moved = reshape(moved, (n, h, w, 3))
    x, y, z = moved[..., 0], moved[..., 1], moved[..., 2]
    valid = z.data > NEAR_Z
    zc = clip(z, NEAR_Z, None)
    u = x / zc * K.fx + K.cx
    v = y / zc * K.fy + K.cy
    return stack([u, v], axis=-1), z, valid


def inverse_warp(source, target_depth, pose, K):
    """Synthesize the target view by sampling ``source`` (N,C,H,W).

    Returns the warped image and a mask of pixels whose reprojection is in
    front of the camera and inside the source frame.
    """
    source = tensor(source)
    target_depth = tensor(target_depth)
    if target_depth.ndim == 4:
        target_depth = reshape(target_depth, (target_depth.shape[0],) + target_depth.shape[2:])
    pix, _, front = project(backproject(target_depth, K), pose, K)
    warped, inside = ops.grid_sample(source, pix)
    return warped, front & inside


def invert_pose(pose):
    """Differentiable inverse of a batched pose: rotation -r, translation -R^T t."""
    rot, trans = tensor(pose.rotation), tensor(pose.translation)
    n = trans.shape[0]
    R = ops.rodrigues(rot)
    t_inv = reshape(matmul(reshape(trans, (n, 1, 3)), R), (n, 3)) * -1.0
    return Pose(rot * -1.0, t_inv)


def rotation_matrix(rotation):
    return ops.rodrigues(Tensor(np.asarray(rotation, dtype=np.float64))).data


__all__ = [
    "CameraIntrinsics",
    "Pose",
    "disp_to_depth",
    "backproject",
    "project",
    "inverse_warp",
    "invert_pose",
    "pixel_grid",
    "rotation_matrix",
    "concat",
]
