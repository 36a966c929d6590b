"""Rigid-body transforms, oriented boxes, and the analytic queries the
simulator and planner share: ray casting, closest points, penetration,
and sphere coverings.

All rotations are 3x3 matrices, all points are metric, dtype float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.eye(3)
    x, y, z = axis / n
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis * angle vector of a rotation matrix (inverse of axis_angle)."""
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-9:
        return np.zeros(3)
    if theta > math.pi - 1e-6:
        # Near pi the off-diagonal formula degenerates; recover axis from R + I.
        A = R + np.eye(3)
        axis = A[:, int(np.argmax(np.diag(A)))]
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (theta / (2.0 * math.sin(theta)))


def rotation_angle_between(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, radians."""
    return float(np.linalg.norm(rotation_log(Ra.T @ Rb)))


def angle_between(u, v) -> float:
    """Angle between two vectors, radians."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom < 1e-15:
        return 0.0
    return math.acos(float(np.clip(np.dot(u, v) / denom, -1.0, 1.0)))


@dataclass
class Transform:
    """SE(3) pose: rotation matrix R and translation t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Transform":
        return Transform()

    @staticmethod
    def from_xyz_yaw(x: float, y: float, z: float, yaw: float = 0.0) -> "Transform":
        return Transform(rot_z(yaw), np.array([x, y, z], dtype=float))

    def compose(self, other: "Transform") -> "Transform":
        return Transform(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Transform") -> "Transform":
        return self.compose(other)

    def inverse(self) -> "Transform":
        Rt = self.R.T
        return Transform(Rt, -Rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.R.T

    def almost_equal(self, other: "Transform", tol_t: float = 1e-9, tol_r: float = 1e-9) -> bool:
        return (
            np.linalg.norm(self.t - other.t) <= tol_t
            and rotation_angle_between(self.R, other.R) <= tol_r
        )

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M


@dataclass
class Box:
    """Oriented box: half extents in its own frame, posed by `pose`."""

    half: np.ndarray
    pose: Transform = field(default_factory=Transform.identity)

    def __post_init__(self):
        self.half = np.asarray(self.half, dtype=float).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return self.pose.t

    def contains(self, point) -> bool:
        local = self.pose.inverse().apply(point)
        return bool(np.all(np.abs(local) <= self.half + 1e-12))

    def closest_point(self, point):
        """Closest surface/volume point to `point`.

        Returns (point_world, distance, outward_normal_world). For a query
        inside the box the distance is 0 and the normal is that of the
        nearest face.
        """
        inv = self.pose.inverse()
        local = inv.apply(point)
        clamped = np.clip(local, -self.half, self.half)
        delta = local - clamped
        dist = float(np.linalg.norm(delta))
        if dist > 1e-12:
            normal_local = delta / dist
        else:
            # Inside (or on the surface): pick the face with least slack.
            slack = self.half - np.abs(local)
            axis = int(np.argmin(slack))
            normal_local = np.zeros(3)
            normal_local[axis] = math.copysign(1.0, local[axis]) if local[axis] != 0 else 1.0
            clamped = local.copy()
            clamped[axis] = math.copysign(self.half[axis], normal_local[axis])
        return self.pose.apply(clamped), dist, self.pose.rotate(normal_local)

    def face_center(self, axis: int, sign: int):
        """World-frame center and outward normal of one face."""
        offs = np.zeros(3)
        offs[axis] = sign * self.half[axis]
        normal = np.zeros(3)
        normal[axis] = float(sign)
        return self.pose.apply(offs), self.pose.rotate(normal)

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
        )
        return self.pose.apply(signs * self.half)


def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, box: Box):
    """Slab intersection of many rays against one box.

    `dirs` need not be normalized; the returned parameter t is in units of
    the supplied direction vectors (the renderer exploits this to read t
    directly as pinhole z-depth). Returns (t_enter, hit_mask); t_enter for
    rays starting inside the box is clamped to 0.
    """
    inv = box.pose.inverse()
    o = inv.apply(origin)
    d = inv.rotate(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-box.half - o) / d
        t2 = (box.half - o) / d
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Parallel rays: slab imposes no bound if origin inside it, else no hit.
    parallel = np.abs(d) < 1e-12
    inside_slab = np.abs(o) <= box.half
    near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
    t_enter = near.max(axis=-1)
    t_exit = far.min(axis=-1)
    hit = (t_exit >= t_enter) & (t_exit >= 0.0)
    return np.maximum(t_enter, 0.0), hit


def point_box_distances(points: np.ndarray, box: Box) -> np.ndarray:
    """Unsigned distance from each point (N, 3) to the box surface (0 inside)."""
    local = box.pose.inverse().apply(points)
    delta = np.abs(local) - box.half
    outside = np.maximum(delta, 0.0)
    return np.linalg.norm(outside, axis=-1)


def obb_penetration(a: Box, b: Box) -> float:
    """Penetration depth between two oriented boxes (0 when separated).

    Separating-axis test over the 15 candidate axes; returns the minimal
    translation distance needed to separate overlapping boxes.
    """
    Ra, Rb = a.pose.R, b.pose.R
    axes = [Ra[:, i] for i in range(3)] + [Rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            cross = np.cross(Ra[:, i], Rb[:, j])
            n = np.linalg.norm(cross)
            if n > 1e-9:
                axes.append(cross / n)
    ca, cb = a.center, b.center
    min_overlap = np.inf
    for axis in axes:
        ra = float(np.abs(axis @ Ra) @ a.half)
        rb = float(np.abs(axis @ Rb) @ b.half)
        gap = abs(float(axis @ (cb - ca))) - (ra + rb)
        if gap >= 0.0:
            return 0.0
        min_overlap = min(min_overlap, -gap)
    return float(min_overlap)


def box_cover_spheres(half, max_protrusion: float = 0.015):
    """Cover a box with spheres whose surfaces protrude at most
    `max_protrusion` beyond each face.

    Returns a list of (center_local (3,), radius) pairs. The covering grid
    is refined until the per-cell half diagonal exceeds the cell half size
    by no more than the protrusion budget, capped at 4 cells per axis.
    """
    half = np.asarray(half, dtype=float)
    counts = np.ones(3, dtype=int)
    for _ in range(12):
        cell = half / counts
        radius = float(np.linalg.norm(cell))
        if radius - cell.min() <= max_protrusion or np.all(counts >= 4):
            break
        # Shrink the largest contributor to the diagonal.
        grow = int(np.argmax(np.where(counts < 4, cell, -np.inf)))
        counts[grow] += 1
    cell = half / counts
    radius = float(np.linalg.norm(cell))
    centers = []
    xs = [-half[0] + cell[0] * (2 * k + 1) for k in range(counts[0])]
    ys = [-half[1] + cell[1] * (2 * k + 1) for k in range(counts[1])]
    zs = [-half[2] + cell[2] * (2 * k + 1) for k in range(counts[2])]
    for x in xs:
        for y in ys:
            for z in zs:
                centers.append((np.array([x, y, z]), radius))
    return centers


def look_at_rotation(forward, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation whose +x axis points along `forward`; +z as close to up_hint
    as orthogonality allows. Used to build tool frames from approach axes."""
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    up = np.asarray(up_hint, dtype=float)
    if abs(float(np.dot(f, up))) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
        if abs(float(np.dot(f, up))) > 0.99:
            up = np.array([0.0, 1.0, 0.0])
    y = np.cross(up, f)
    y = y / np.linalg.norm(y)
    z = np.cross(f, y)
    return np.column_stack([f, y, z])
