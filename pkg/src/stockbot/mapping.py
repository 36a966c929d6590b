"""Voxel workspace map: projective TSDF integration from depth images and
an exact Euclidean distance field for clearance queries.

The ESDF is unsigned (distance outside obstacles, 0 on occupied voxels,
capped at d_cap); the planner keeps all spheres at positive clearance so
the interior sign is never needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import CameraModel
from .geometry import Transform

DEFAULT_VOXEL = 0.02
D_CAP = 1.0


@dataclass
class VoxelField:
    origin: np.ndarray
    voxel: float = DEFAULT_VOXEL
    dims: tuple = (32, 32, 32)
    d_cap: float = D_CAP

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        nx, ny, nz = self.dims
        self.tsdf = np.zeros((nx, ny, nz))
        self.weight = np.zeros((nx, ny, nz))
        self.esdf: np.ndarray | None = None
        self.truncation = 4.0 * self.voxel

    @property
    def occupied(self) -> np.ndarray:
        return (self.tsdf < 0.0) & (self.weight > 0.0)

    def voxel_centers(self) -> np.ndarray:
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + (idx + 0.5) * self.voxel

    def integrate_depth(self, depth: np.ndarray, cam_pose: Transform, camera: CameraModel,
                        drop_frac: float = 0.0, rng=None) -> None:
        """Projective TSDF update over every voxel in the camera frustum.

        Truncation is 4 voxels; observations accumulate with a weighted
        running average. `drop_frac` discards that fraction of depth pixels
        first (the voxel-registration fault injector).
        """
        if drop_frac > 0.0:
            if rng is None:
                raise ValueError("drop_frac needs an rng")
            depth = depth.copy()
            drop = rng.random(depth.shape) < drop_frac
            depth[drop] = np.inf

        centers = self.voxel_centers()
        cam_inv = cam_pose.inverse()
        pts_cam = cam_inv.apply(centers)
        z = pts_cam[:, 2]
        near, far = camera.depth_range
        u = pts_cam[:, 0] / np.where(z > 0, z, 1.0) * camera.fx + camera.cx
        v = pts_cam[:, 1] / np.where(z > 0, z, 1.0) * camera.fy + camera.cy
        in_frustum = (z > near) & (z < far) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        if not in_frustum.any():
            return

        ui = np.clip(u[in_frustum].astype(int), 0, camera.width - 1)
        vi = np.clip(v[in_frustum].astype(int), 0, camera.height - 1)
        meas = depth[vi, ui]
        valid = np.isfinite(meas)

        sdf = meas[valid] - z[in_frustum][valid]
        tau = self.truncation
        # Voxels far behind the measured surface stay unobserved.
        observable = sdf >= -tau
        sdf = np.minimum(sdf[observable], tau)

        flat_idx = np.nonzero(in_frustum)[0][valid][observable]
        w_old = self.weight.reshape(-1)[flat_idx]
        t_old = self.tsdf.reshape(-1)[flat_idx]
        w_new = w_old + 1.0
        self.tsdf.reshape(-1)[flat_idx] = (t_old * w_old + sdf) / w_new
        self.weight.reshape(-1)[flat_idx] = w_new
        self.esdf = None

    def integrate_boxes(self, boxes, weight: float = 1.0) -> None:
        """Mark voxels whose centers lie inside any box as occupied.

        Used to seed the field with the known static room layout (the
        camera's blind cone would otherwise read as free space) and by
        tests that want the analytic scene. A high weight makes the prior
        robust against later depth updates.
        """
        centers = self.voxel_centers()
        occupied = np.zeros(centers.shape[0], dtype=bool)
        for box in boxes:
            local = box.pose.inverse().apply(centers)
            occupied |= np.all(np.abs(local) <= box.half, axis=1)
        self.tsdf.reshape(-1)[occupied] = -self.voxel
        self.weight.reshape(-1)[occupied] = np.maximum(self.weight.reshape(-1)[occupied], weight)
        self.esdf = None

    def compute_esdf(self) -> np.ndarray:
        """Exact Euclidean distance to the occupied set, meters, capped.

        Distances are computed on the index lattice and scaled by the voxel
        size, which keeps them bit-identical to a brute-force oracle using
        the same expression.
        """
        occ = self.occupied
        if not occ.any():
            self.esdf = np.full(self.dims, self.d_cap)
            return self.esdf
        dist_idx = ndimage.distance_transform_edt(~occ)
        self.esdf = np.minimum(dist_idx * self.voxel, self.d_cap)
        return self.esdf

    # -- queries -------------------------------------------------------------

    def _ensure_esdf(self):
        if self.esdf is None:
            self.compute_esdf()
        return self.esdf

    def query_distance(self, point, interpolate: bool = False):
        """(distance, out_of_bounds) at a world point; out of bounds reads d_cap."""
        esdf = self._ensure_esdf()
        rel = (np.asarray(point, dtype=float) - self.origin) / self.voxel - 0.5
        if interpolate:
            idx = np.floor(rel).astype(int)
            frac = rel - idx
            if np.any(idx < 0) or np.any(idx + 1 >= np.array(self.dims)):
                return self.d_cap, True
            c = esdf[idx[0] : idx[0] + 2, idx[1] : idx[1] + 2, idx[2] : idx[2] + 2]
            fx, fy, fz = frac
            c00 = c[0, 0, 0] * (1 - fx) + c[1, 0, 0] * fx
            c01 = c[0, 0, 1] * (1 - fx) + c[1, 0, 1] * fx
            c10 = c[0, 1, 0] * (1 - fx) + c[1, 1, 0] * fx
            c11 = c[0, 1, 1] * (1 - fx) + c[1, 1, 1] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            return float(c0 * (1 - fz) + c1 * fz), False
        idx = np.round(rel).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.dims)):
            return self.d_cap, True
        return float(esdf[idx[0], idx[1], idx[2]]), False

    def query_many(self, points: np.ndarray) -> np.ndarray:
        """Nearest-voxel distances for (N, 3) points; out of bounds -> d_cap."""
        esdf = self._ensure_esdf()
        rel = (np.asarray(points, dtype=float) - self.origin) / self.voxel - 0.5
        idx = np.round(rel).astype(int)
        dims = np.array(self.dims)
        oob = np.any(idx < 0, axis=1) | np.any(idx >= dims, axis=1)
        idx_c = np.clip(idx, 0, dims - 1)
        out = esdf[idx_c[:, 0], idx_c[:, 1], idx_c[:, 2]].copy()
        out[oob] = self.d_cap
        return out

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        """Flat binary grid with a one-line text header."""
        header = (
            f"voxelfield v1 dims={self.dims[0]}x{self.dims[1]}x{self.dims[2]} "
            f"origin={self.origin[0]:.6f},{self.origin[1]:.6f},{self.origin[2]:.6f} "
            f"voxel={self.voxel:.6f}\n"
        )
        with open(path, "wb") as fh:
            fh.write(header.encode())
            fh.write(self.tsdf.astype("<f4").tobytes())
            fh.write(self.weight.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "VoxelField":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = raw[:nl].decode()
        parts = dict(p.split("=", 1) for p in header.split()[2:])
        dims = tuple(int(v) for v in parts["dims"].split("x"))
        origin = np.array([float(v) for v in parts["origin"].split(",")])
        voxel = float(parts["voxel"])
        field = VoxelField(origin=origin, voxel=voxel, dims=dims)
        n = dims[0] * dims[1] * dims[2]
        body = raw[nl + 1 :]
        field.tsdf = np.frombuffer(body[: 4 * n], dtype="<f4").astype(float).reshape(dims)
        field.weight = np.frombuffer(body[4 * n : 8 * n], dtype="<f4").astype(float).reshape(dims)
        return field


def field_around(center, extents, voxel: float = DEFAULT_VOXEL, d_cap: float = D_CAP) -> VoxelField:
    """Field whose grid covers center +- extents/2."""
    center = np.asarray(center, dtype=float)
    extents = np.asarray(extents, dtype=float)
    origin = center - extents / 2.0
    dims = tuple(int(np.ceil(e / voxel)) for e in extents)
    return VoxelField(origin=origin, voxel=voxel, dims=dims, d_cap=d_cap)
