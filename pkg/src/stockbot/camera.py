"""Pinhole depth/instance camera over analytic ray-box casting.

Depth images use the z-depth convention (value = distance along the
optical axis, not along the ray), so a fronto-parallel plane at 1 m reads
1.0 everywhere. Pixels with no surface inside [near, far] carry +inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Transform, rot_z

NO_RETURN = np.inf


@dataclass
class CameraModel:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480
    depth_range: tuple = (0.15, 6.0)
    # Mount relative to the robot head frame (head pans about base z).
    mount_offset: np.ndarray = field(default_factory=lambda: np.array([0.06, 0.0, 0.05]))
    tilt: float = math.radians(25.0)   # downward pitch of the optical axis

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        near, far = self.depth_range
        if not near < far:
            raise ValueError("depth_range must satisfy near < far")

    @staticmethod
    def scaled(width: int, height: int, **kwargs) -> "CameraModel":
        """Default intrinsics rescaled to another resolution."""
        sx = width / 640.0
        sy = height / 480.0
        return CameraModel(
            fx=525.0 * sx,
            fy=525.0 * sy,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
            **kwargs,
        )

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized camera-frame ray directions, z component 1, (H, W, 3)."""
        us = np.arange(self.width, dtype=float)
        vs = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(us, vs)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)

    def back_project(self, us, vs, depths) -> np.ndarray:
        """Camera-frame points for pixel coords and z-depths."""
        us = np.asarray(us, dtype=float)
        vs = np.asarray(vs, dtype=float)
        depths = np.asarray(depths, dtype=float)
        x = (us - self.cx) / self.fx * depths
        y = (vs - self.cy) / self.fy * depths
        return np.stack([x, y, depths], axis=-1)

    def project(self, points_cam: np.ndarray):
        """Pixel coords (u, v) and depth of camera-frame points."""
        pts = np.asarray(points_cam, dtype=float)
        z = pts[..., 2]
        u = pts[..., 0] / z * self.fx + self.cx
        v = pts[..., 1] / z * self.fy + self.cy
        return u, v, z


def camera_pose(base_pose, head_angle: float, camera: CameraModel,
                head_offset=np.array([0.05, 0.0, 1.30])) -> Transform:
    """World pose of the optical frame given the base SE(2) pose and head pan.

    Optical frame convention: +z forward along the view axis, +x image
    right, +y image down.
    """
    x, y, yaw = base_pose
    base = Transform.from_xyz_yaw(x, y, 0.0, yaw)
    head = base @ Transform(rot_z(head_angle), np.asarray(head_offset, dtype=float))
    cam_origin = head @ Transform(np.eye(3), camera.mount_offset)
    ct, st = math.cos(camera.tilt), math.sin(camera.tilt)
    forward = np.array([ct, 0.0, -st])       # head frame
    right = np.array([0.0, -1.0, 0.0])
    down = np.cross(forward, right)
    R_opt = np.column_stack([right, down, forward])
    return Transform(cam_origin.R @ R_opt, cam_origin.t)


def render_depth(boxes, instance_ids, cam_pose: Transform, camera: CameraModel,
                 depth_sigma: float = 0.0, rng: np.random.Generator | None = None):
    """Ray-cast every pixel against a list of posed boxes.

    Returns (depth (H, W) float64, instance (H, W) int32). Depth holds the
    nearest z-depth within the camera's depth range (NO_RETURN otherwise);
    instance holds the hit box's id (0 where no return). Gaussian depth
    noise is added per valid pixel when depth_sigma > 0.
    """
    rays_cam = camera.pixel_rays().reshape(-1, 3)
    dirs_world = cam_pose.rotate(rays_cam)
    origin = cam_pose.t
    near, far = camera.depth_range

    depth = np.full(rays_cam.shape[0], NO_RETURN)
    inst = np.zeros(rays_cam.shape[0], dtype=np.int32)
    from .geometry import ray_box_hits

    for box, ident in zip(boxes, instance_ids):
        t_enter, hit = ray_box_hits(origin, dirs_world, box)
        ok = hit & (t_enter >= near) & (t_enter <= far) & (t_enter < depth)
        depth[ok] = t_enter[ok]
        inst[ok] = ident

    if depth_sigma > 0.0:
        if rng is None:
            raise ValueError("depth noise requested without rng")
        valid = np.isfinite(depth)
        noise = rng.normal(0.0, depth_sigma, size=int(valid.sum()))
        depth[valid] = np.maximum(depth[valid] + noise, 1e-6)

    H, W = camera.height, camera.width
    return depth.reshape(H, W), inst.reshape(H, W)
