"""Perception pipeline: surface normals from depth, the flatness /
centerness heatmaps, suction pose extraction, and the simulated object
detector and fiducial reader with their configured failure modes.

All operations are pure functions of their inputs; the stochastic ones
(detector, fiducials) draw from generators owned by the caller's world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import CameraModel
from .geometry import Transform, angle_between


class PerceptionError(Exception):
    def __init__(self, tag: str, msg: str = ""):
        super().__init__(msg or tag)
        self.tag = tag


@dataclass
class NormalMap:
    """Per-pixel unit normals in the camera frame, oriented toward the
    camera (n . ray < 0), with a validity mask."""

    normals: np.ndarray          # (H, W, 3)
    valid: np.ndarray            # (H, W) bool


@dataclass
class Heatmap:
    values: np.ndarray           # (H, W), zero outside mask
    mask: np.ndarray             # (H, W) bool
    window: int = 0


@dataclass
class CenternessMap:
    values: np.ndarray
    mask: np.ndarray
    center: tuple = (0, 0)       # (row, col)
    d_max: float = 0.0


@dataclass
class SuctionPose:
    contact_cam: np.ndarray
    normal_cam: np.ndarray       # mean surface normal at the top-K pixels
    contact_world: np.ndarray | None
    approach_world: np.ndarray | None   # direction INTO the surface
    score: float
    pixels: np.ndarray           # (K, 2) row, col of the top-K set
    used_k: int


@dataclass
class Detection:
    sku: str
    mask: np.ndarray
    source: str = "simulated-detector"
    merged: bool = False


@dataclass
class FiducialObservation:
    fiducial_id: int
    pose_cam: Transform
    pixel_footprint: tuple = (0, 0)


# ---------------------------------------------------------------------------
# Normals


def estimate_normals(depth: np.ndarray, camera: CameraModel) -> NormalMap:
    """Central-difference surface normals of a z-depth image.

    Tangents come from the back-projected point grid; the normal is their
    normalized cross product, flipped toward the camera. Border pixels and
    pixels whose 4-neighborhood touches a no-return are invalid.
    """
    valid_depth = np.isfinite(depth)
    if int(valid_depth.sum()) < 9:
        raise PerceptionError("degenerate-depth", "need at least 3x3 valid depth pixels")

    H, W = depth.shape
    us = np.arange(W, dtype=float)
    vs = np.arange(H, dtype=float)
    uu, vv = np.meshgrid(us, vs)
    z = np.where(valid_depth, depth, np.nan)
    pts = np.stack([(uu - camera.cx) / camera.fx * z, (vv - camera.cy) / camera.fy * z, z], axis=-1)

    tu = np.full_like(pts, np.nan)
    tv = np.full_like(pts, np.nan)
    tu[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) * 0.5
    tv[1:-1, :] = (pts[2:, :] - pts[:-2, :]) * 0.5

    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1)
    ok = valid_depth & np.isfinite(norm) & (norm > 1e-12)
    n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], 0.0)

    # Orient toward the camera: rays point into the scene, normals against.
    rays = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1)
    flip = np.sum(n * rays, axis=-1) > 0.0
    n[flip] = -n[flip]
    return NormalMap(normals=n, valid=ok)


# ---------------------------------------------------------------------------
# Heatmaps


def normal_std_heatmap(normals: NormalMap, mask: np.ndarray, window: int) -> Heatmap:
    """Windowed standard deviation of normals, mapped to a flatness score.

    sigma(p) = sqrt(mean over the w x w valid window of |n(q) - n_bar|^2);
    the heatmap value is 1 / (1 + sigma) so flat regions score HIGH.
    Pixels whose window holds no valid normal leave the mask.
    """
    if window < 3 or window % 2 == 0:
        raise PerceptionError("bad-window", "window must be odd and >= 3")
    mask = mask.astype(bool)
    valid = normals.valid
    n = np.where(valid[..., None], normals.normals, 0.0)

    kernel = np.ones((window, window))
    counts = ndimage.convolve(valid.astype(float), kernel, mode="constant", cval=0.0)
    sums = np.stack(
        [ndimage.convolve(n[..., i], kernel, mode="constant", cval=0.0) for i in range(3)],
        axis=-1,
    )
    sq_sums = ndimage.convolve((n * n).sum(axis=-1), kernel, mode="constant", cval=0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        mean = sums / counts[..., None]
        mean_sq = sq_sums / counts
        var = mean_sq - (mean * mean).sum(axis=-1)
    var = np.maximum(var, 0.0)
    sigma = np.sqrt(var)

    ok = mask & (counts > 0)
    values = np.zeros_like(sigma)
    values[ok] = 1.0 / (1.0 + sigma[ok])
    return Heatmap(values=values, mask=ok, window=window)


def centerness(mask: np.ndarray) -> CenternessMap:
    """Linear falloff from the mask centroid: C = 1 - d / d_max."""
    mask = mask.astype(bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise PerceptionError("empty-mask")
    cr = int(round(float(rows.mean())))
    cc = int(round(float(cols.mean())))
    d = np.sqrt((rows - cr) ** 2.0 + (cols - cc) ** 2.0)
    d_max = float(d.max())
    values = np.zeros(mask.shape, dtype=float)
    if d_max <= 0.0:
        values[mask] = 1.0
    else:
        values[rows, cols] = 1.0 - d / d_max
    return CenternessMap(values=values, mask=mask, center=(cr, cc), d_max=d_max)


def center_weighted_heatmap(flatness: Heatmap, center: CenternessMap, epsilon: float = 1.0) -> Heatmap:
    """Combine flatness and centerness, each normalized by its mask mean:

        H''(p) = (H(p) / H_bar) * (C(p) / C_bar * epsilon)
    """
    mask = flatness.mask & center.mask
    if not mask.any():
        raise PerceptionError("empty-mask")
    h_bar = float(flatness.values[mask].mean())
    c_bar = float(center.values[mask].mean())
    if h_bar <= 0.0 or c_bar <= 0.0:
        raise PerceptionError("degenerate-normalization")
    values = np.zeros_like(flatness.values)
    values[mask] = (flatness.values[mask] / h_bar) * (center.values[mask] / c_bar * epsilon)
    return Heatmap(values=values, mask=mask, window=flatness.window)


def extract_suction_pose(
    weighted: Heatmap,
    normals: NormalMap,
    depth: np.ndarray,
    camera: CameraModel,
    k: int,
    cam_pose: Transform | None = None,
    events: list | None = None,
) -> SuctionPose:
    """Top-K pose extraction.

    The K highest-scoring pixels (ties broken in row-major order) vote with
    their normals; the contact point back-projects the single argmax pixel.
    If fewer than K pixels are available K shrinks with a warning event.
    """
    mask = weighted.mask & normals.valid & np.isfinite(depth)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise PerceptionError("empty-mask")
    avail = rows.size
    used_k = min(k, avail)
    if used_k < k and events is not None:
        events.append({"kind": "suction-k-shrunk", "requested": k, "available": avail})

    scores = weighted.values[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    top = order[:used_k]
    top_rows, top_cols = rows[top], cols[top]

    n_mean = normals.normals[top_rows, top_cols].mean(axis=0)
    n_norm = np.linalg.norm(n_mean)
    if n_norm < 1e-12:
        raise PerceptionError("degenerate-normals")
    n_star = n_mean / n_norm

    r0, c0 = int(top_rows[0]), int(top_cols[0])
    contact = camera.back_project(c0, r0, depth[r0, c0])

    contact_world = approach_world = None
    if cam_pose is not None:
        contact_world = cam_pose.apply(contact)
        approach_world = cam_pose.rotate(-n_star)
    return SuctionPose(
        contact_cam=np.asarray(contact, dtype=float),
        normal_cam=n_star,
        contact_world=contact_world,
        approach_world=approach_world,
        score=float(weighted.values[r0, c0]),
        pixels=np.stack([top_rows, top_cols], axis=1),
        used_k=used_k,
    )


def face_submask(normals: NormalMap, mask: np.ndarray, direction_cam, max_angle_deg: float = 35.0) -> np.ndarray:
    """Restrict a detection mask to the face whose normals point along
    `direction_cam` (camera frame). A detection of a box seen at an angle
    covers several faces; grasp planning wants exactly one. Falls back to
    the original mask when nothing qualifies."""
    d = np.asarray(direction_cam, dtype=float)
    d = d / np.linalg.norm(d)
    cos_lim = math.cos(math.radians(max_angle_deg))
    dots = normals.normals @ d
    sub = mask.astype(bool) & normals.valid & (dots >= cos_lim)
    return sub if sub.any() else mask.astype(bool)


def suction_pipeline(depth, mask, camera, window: int = 9, epsilon: float = 1.0,
                     k: int = 10, cam_pose=None, events=None,
                     prefer_normal_cam=None) -> SuctionPose:
    """Depth + object mask -> suction pose, end to end.

    `prefer_normal_cam` restricts scoring to the face whose normals point
    that way (camera frame) before the centerness/heatmap math runs.
    """
    normals = estimate_normals(depth, camera)
    if prefer_normal_cam is not None:
        mask = face_submask(normals, mask, prefer_normal_cam)
    flat = normal_std_heatmap(normals, mask, window)
    cen = centerness(mask)
    weighted = center_weighted_heatmap(flat, cen, epsilon)
    return extract_suction_pose(weighted, normals, depth, camera, k, cam_pose=cam_pose, events=events)


# ---------------------------------------------------------------------------
# Simulated detector


def detect_objects(world, instance_mask: np.ndarray, rng=None, events=None) -> list:
    """Ground-truth detector with the observed failure modes injected.

    Every visible item yields its true pixel mask with probability
    1 - detector_miss_prob; with merged_mask_prob two adjacent item masks
    fuse into one detection; mask edges get a +-2 px jitter.
    """
    rng = rng if rng is not None else world.rng_detector
    noise = world.noise
    visible = []
    for inst_id in np.unique(instance_mask):
        idx = world.item_index_of_instance(int(inst_id))
        if idx is not None:
            visible.append((idx, instance_mask == inst_id))

    detections = []
    taken = set()
    for pos, (idx, mask) in enumerate(visible):
        if idx in taken:
            continue
        if rng.random() < noise.detector_miss_prob:
            if events is not None:
                events.append({"kind": "detector-miss", "sku": world.scene.items[idx].sku})
            continue
        merged = False
        mask_out = mask
        if rng.random() < noise.merged_mask_prob:
            partner = _adjacent_item(visible, pos, taken)
            if partner is not None:
                p_idx, p_mask = partner
                mask_out = mask | p_mask
                taken.add(p_idx)
                merged = True
        mask_out = _jitter_mask(mask_out, rng)
        if not mask_out.any():
            mask_out = mask
        detections.append(
            Detection(sku=world.scene.items[idx].sku, mask=mask_out, merged=merged)
        )
        taken.add(idx)
    return detections


def _adjacent_item(visible, pos, taken):
    """The nearest other visible item whose mask dilates into this one."""
    idx, mask = visible[pos]
    grown = ndimage.binary_dilation(mask, iterations=6)
    for other_idx, other_mask in visible:
        if other_idx == idx or other_idx in taken:
            continue
        if (grown & other_mask).any():
            return other_idx, other_mask
    return None


def _jitter_mask(mask: np.ndarray, rng) -> np.ndarray:
    amount = int(rng.integers(-2, 3))
    if amount > 0:
        return ndimage.binary_dilation(mask, iterations=amount)
    if amount < 0:
        eroded = ndimage.binary_erosion(mask, iterations=-amount)
        return eroded if eroded.any() else mask
    return mask


# ---------------------------------------------------------------------------
# Fiducials


MARKER_RANGE = 2.5
MARKER_HALF_SIZE = 0.03


def detect_fiducials(world, rng=None, events=None) -> list:
    """Read every front-facing, in-frustum bin marker within range.

    Misses, pose noise, and id swaps follow the world's NoiseConfig. Poses
    are reported in the camera frame.
    """
    rng = rng if rng is not None else world.rng_marker
    noise = world.noise
    cam_pose = world.camera_pose()
    cam_inv = cam_pose.inverse()
    camera = world.camera

    bins = world.scene.bins()
    ids = [b.fiducial_id for b in bins]
    out = []
    for b in bins:
        marker = b.marker_pose()
        p_cam = cam_inv.apply(marker.t)
        z = p_cam[2]
        if z <= camera.depth_range[0] or z > MARKER_RANGE:
            continue
        u, v, _ = camera.project(p_cam)
        if not (0 <= u < camera.width and 0 <= v < camera.height):
            continue
        outward = marker.R[:, 0]
        to_cam = cam_pose.t - marker.t
        if float(np.dot(outward, to_cam)) <= 0.0:
            continue  # back-facing
        if rng.random() < noise.marker_miss_prob:
            if events is not None:
                events.append({"kind": "marker-miss", "fiducial_id": b.fiducial_id})
            continue

        pose_cam = cam_inv @ marker
        sig_t, sig_r = noise.marker_pose_sigma
        if sig_t > 0:
            pose_cam = Transform(pose_cam.R, pose_cam.t + rng.normal(0.0, sig_t, 3))
        if sig_r > 0:
            from .geometry import axis_angle

            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            pose_cam = Transform(axis_angle(axis, rng.normal(0.0, sig_r)) @ pose_cam.R, pose_cam.t)

        fid = b.fiducial_id
        if len(ids) > 1 and rng.random() < noise.marker_misid_prob:
            others = [i for i in ids if i != fid]
            fid = int(others[int(rng.integers(0, len(others)))])
            if events is not None:
                events.append({"kind": "marker-misid", "true": b.fiducial_id, "reported": fid})
        out.append(FiducialObservation(fiducial_id=fid, pose_cam=pose_cam, pixel_footprint=(int(u), int(v))))
    return out


# ---------------------------------------------------------------------------
# Debug artifact dump


def save_pgm(path, array: np.ndarray) -> None:
    """Write a float array as a portable 16-bit grayscale PGM."""
    a = np.asarray(array, dtype=float)
    finite = np.isfinite(a)
    lo = float(a[finite].min()) if finite.any() else 0.0
    hi = float(a[finite].max()) if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    scaled = np.zeros_like(a)
    scaled[finite] = (a[finite] - lo) / span
    img = (scaled * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode())
        fh.write(img.tobytes())
