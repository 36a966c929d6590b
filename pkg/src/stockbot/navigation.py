"""2-D base navigation: inflated occupancy grid, A* with line-of-sight
smoothing, pure-pursuit execution against the believed pose, and the
marker-driven correction loop that recovers manipulation-grade alignment
after localization drift.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .perception import detect_fiducials
from .world import BaseVel, HeadPan, World, ROBOT_RADIUS

DEFAULT_CELL = 0.05
INFLATION_MARGIN = 0.05          # beyond the robot radius
NOISE_MARGIN = 0.15              # extra planning-time inflation for drift
CORRECTION_MAX_ITERS = 60
CORRECTION_V_MAX = 0.1
CORRECTION_W_MAX = 0.3


class NavigationError(Exception):
    def __init__(self, tag: str, msg: str = ""):
        super().__init__(msg or tag)
        self.tag = tag


@dataclass
class NavGoal:
    target: np.ndarray               # (x, y, yaw)
    tolerance_pos: float = 0.05
    tolerance_yaw: float = math.radians(5.0)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        if self.tolerance_pos <= 0 or self.tolerance_yaw <= 0:
            raise NavigationError("bad-goal", "tolerances must be positive")


@dataclass
class Path:
    points: np.ndarray               # smoothed waypoints (M, 2), world frame
    cells: list                      # raw A* cell path [(i, j)]
    cost: float                      # optimal grid cost, meters


@dataclass
class OccupancyGrid2D:
    origin: np.ndarray
    cell: float
    occupied: np.ndarray             # (W, H) bool, raw obstacles

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self._inflated_cache: dict = {}

    @staticmethod
    def from_scene(scene, cell: float = DEFAULT_CELL, max_height: float = 0.40) -> "OccupancyGrid2D":
        """Project every static box overlapping the base height band."""
        (x0, y0), (x1, y1) = scene.bounds
        pad = 0.5
        origin = np.array([x0 - pad, y0 - pad])
        W = int(math.ceil((x1 - x0 + 2 * pad) / cell))
        H = int(math.ceil((y1 - y0 + 2 * pad) / cell))
        xs = origin[0] + (np.arange(W) + 0.5) * cell
        ys = origin[1] + (np.arange(H) + 0.5) * cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        occ = np.zeros(pts.shape[0], dtype=bool)
        for box in scene.static_boxes():
            zs = box.corners()[:, 2]
            if zs.min() > max_height:
                continue
            inv = box.pose.inverse()
            local = np.stack([pts[:, 0], pts[:, 1], np.full(pts.shape[0], min(max(zs.min() + 0.01, 0.0), max_height))], axis=-1)
            local = local @ inv.R.T + inv.t
            occ |= np.all(np.abs(local[:, :2]) <= box.half[:2] + cell * 0.0, axis=1) & (
                np.abs(local[:, 2]) <= box.half[2] + 1e-9
            )
        return OccupancyGrid2D(origin=origin, cell=cell, occupied=occ.reshape(W, H))

    def inflated(self, radius: float | None = None) -> np.ndarray:
        radius = radius if radius is not None else ROBOT_RADIUS + INFLATION_MARGIN
        key = round(radius, 6)
        if key not in self._inflated_cache:
            from scipy import ndimage

            r_cells = int(math.ceil(radius / self.cell))
            yy, xx = np.ogrid[-r_cells : r_cells + 1, -r_cells : r_cells + 1]
            disc = (xx * xx + yy * yy) * (self.cell ** 2) <= radius ** 2
            self._inflated_cache[key] = ndimage.binary_dilation(self.occupied, structure=disc)
        return self._inflated_cache[key]

    def world_to_cell(self, xy) -> tuple:
        rel = (np.asarray(xy, dtype=float)[:2] - self.origin) / self.cell
        return int(rel[0]), int(rel[1])

    def cell_to_world(self, ij) -> np.ndarray:
        return self.origin + (np.asarray(ij, dtype=float) + 0.5) * self.cell

    def save(self, path_prefix: str) -> None:
        """Portable grayscale image + metadata sidecar."""
        from .perception import save_pgm

        save_pgm(str(path_prefix) + ".pgm", self.occupied.astype(float).T)
        meta = f"origin={self.origin[0]:.6f},{self.origin[1]:.6f} cell={self.cell:.6f}\n"
        with open(str(path_prefix) + ".meta", "w") as fh:
            fh.write(meta)


# ---------------------------------------------------------------------------
# A*


_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def plan_path(grid: OccupancyGrid2D, start, goal, inflation: float | None = None,
              smooth: bool = True, allow_start_escape: bool = True) -> Path:
    """8-connected A* on the inflated grid, then line-of-sight smoothing.

    `cost` is the optimal raw grid cost (Euclidean steps, diagonals sqrt 2);
    smoothing only rewrites the waypoint geometry.
    """
    blocked = grid.inflated(inflation).copy()
    si, sj = grid.world_to_cell(start)
    gi, gj = grid.world_to_cell(goal)
    W, H = blocked.shape
    if not (0 <= si < W and 0 <= sj < H and 0 <= gi < W and 0 <= gj < H):
        raise NavigationError("unreachable", "start or goal outside the grid")
    if blocked[gi, gj]:
        raise NavigationError("unreachable", "goal cell occupied after inflation")
    if blocked[si, sj]:
        base_blocked = grid.inflated()
        if allow_start_escape and not base_blocked[si, sj]:
            # Drift can leave the robot inside the extra-margin ring; free a
            # small escape disc around the start.
            r = int(math.ceil(NOISE_MARGIN / grid.cell)) + 1
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    i, j = si + di, sj + dj
                    if 0 <= i < W and 0 <= j < H and not base_blocked[i, j]:
                        blocked[i, j] = False
        else:
            raise NavigationError("unreachable", "start cell occupied after inflation")

    costs = {(si, sj): 0.0}
    parent = {}
    pq = [(0.0, (si, sj))]
    closed = set()
    found = False
    while pq:
        f, cur = heapq.heappop(pq)
        if cur in closed:
            continue
        closed.add(cur)
        if cur == (gi, gj):
            found = True
            break
        ci, cj = cur
        for di, dj in _NEIGHBORS:
            ni, nj = ci + di, cj + dj
            if not (0 <= ni < W and 0 <= nj < H) or blocked[ni, nj]:
                continue
            step = math.sqrt(2.0) if di and dj else 1.0
            g = costs[cur] + step
            if g < costs.get((ni, nj), math.inf):
                costs[(ni, nj)] = g
                parent[(ni, nj)] = cur
                h = math.hypot(gi - ni, gj - nj)
                heapq.heappush(pq, (g + h, (ni, nj)))
    if not found:
        raise NavigationError("unreachable", "no path on the inflated grid")

    cells = [(gi, gj)]
    while cells[-1] != (si, sj):
        cells.append(parent[cells[-1]])
    cells.reverse()
    cost = costs[(gi, gj)] * grid.cell

    pts = [grid.cell_to_world(c) for c in cells]
    pts[0] = np.asarray(start, dtype=float)[:2].copy()
    pts[-1] = np.asarray(goal, dtype=float)[:2].copy()
    if smooth and len(pts) > 2:
        pts = _los_smooth(pts, blocked, grid)
    return Path(points=np.array(pts), cells=cells, cost=cost)


def _los_smooth(pts, blocked, grid: OccupancyGrid2D):
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1:
            if _line_free(pts[i], pts[j], blocked, grid):
                break
            j -= 1
        out.append(pts[j])
        i = j
    return out


def _line_free(a, b, blocked, grid: OccupancyGrid2D) -> bool:
    dist = float(np.linalg.norm(np.asarray(b) - np.asarray(a)))
    n = max(2, int(dist / (grid.cell * 0.5)) + 1)
    W, H = blocked.shape
    for alpha in np.linspace(0.0, 1.0, n):
        p = np.asarray(a) + alpha * (np.asarray(b) - np.asarray(a))
        i, j = grid.world_to_cell(p)
        if not (0 <= i < W and 0 <= j < H) or blocked[i, j]:
            return False
    return True


# ---------------------------------------------------------------------------
# Pure-pursuit execution


def execute_path(world: World, path: Path, goal: NavGoal, lookahead: float = 0.30,
                 v_max: float = 0.4, w_max: float = 1.2, stuck_ticks: int = 100,
                 max_ticks: int = 4000, tick_slice: int | None = None):
    """Track the path with pure pursuit against the believed pose.

    Returns (believed_pose, true_pose) on arrival; raises
    NavigationError("stuck") after `stuck_ticks` without progress. Pass
    `tick_slice` to advance at most that many sim ticks (resumable).
    """
    pts = path.points
    best_remaining = math.inf
    since_progress = 0
    ticks = 0
    while True:
        believed = world.believed_base_pose()
        err = np.linalg.norm(believed[:2] - goal.target[:2])
        if err <= goal.tolerance_pos:
            yaw_err = wrap_angle(goal.target[2] - believed[2])
            if abs(yaw_err) <= goal.tolerance_yaw:
                world.step(BaseVel(0.0, 0.0))
                return world.believed_base_pose(), world.robot.base_pose.copy()
            world.step(BaseVel(0.0, float(np.clip(2.0 * yaw_err, -w_max, w_max))))
        else:
            target = _lookahead_point(pts, believed[:2], lookahead)
            heading = math.atan2(target[1] - believed[1], target[0] - believed[0])
            hdg_err = wrap_angle(heading - believed[2])
            w = float(np.clip(2.5 * hdg_err, -w_max, w_max))
            v = v_max * max(0.0, math.cos(hdg_err)) if abs(hdg_err) < math.pi / 2 else 0.0
            v = min(v, max(0.10, 1.2 * err))
            world.step(BaseVel(v, w))
        ticks += 1

        remaining = np.linalg.norm(world.believed_base_pose()[:2] - goal.target[:2])
        if remaining < best_remaining - 1e-4:
            best_remaining = remaining
            since_progress = 0
        else:
            since_progress += 1
        if since_progress > stuck_ticks:
            raise NavigationError("stuck", "no progress toward the goal")
        if ticks >= max_ticks:
            raise NavigationError("stuck", "tick budget exhausted")
        if tick_slice is not None and ticks >= tick_slice:
            return None   # caller resumes on the next BT tick


def _lookahead_point(pts: np.ndarray, pos: np.ndarray, lookahead: float) -> np.ndarray:
    # Closest segment projection, then advance by the lookahead distance.
    best_d, best_seg, best_t = math.inf, 0, 0.0
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom < 1e-12 else float(np.clip((pos - a) @ ab / denom, 0.0, 1.0))
        p = a + t * ab
        d = float(np.linalg.norm(pos - p))
        if d < best_d:
            best_d, best_seg, best_t = d, i, t
    remaining = lookahead
    i, t = best_seg, best_t
    while i < len(pts) - 1:
        a, b = pts[i], pts[i + 1]
        seg_len = float(np.linalg.norm(b - a))
        left = (1.0 - t) * seg_len
        if left >= remaining and seg_len > 1e-12:
            return a + (t + remaining / seg_len) * (b - a)
        remaining -= left
        i += 1
        t = 0.0
    return pts[-1]


# ---------------------------------------------------------------------------
# Marker-based correction


@dataclass
class CorrectionResult:
    converged: bool
    iterations: int
    final_error: float
    error_tag: str = ""


def fiducial_correct(world: World, goal: NavGoal, expected_fiducial: int,
                     max_iters: int = CORRECTION_MAX_ITERS,
                     ticks_per_iter: int = 4) -> CorrectionResult:
    """Closed-loop velocity correction from bin-marker observations.

    Each iteration reads the expected marker, recovers the robot's true
    pose relative to the goal from the marker's known map pose, and issues
    clamped proportional (v, w) commands. Succeeds when the marker-derived
    pose error is inside the goal tolerance; gives up after `max_iters`.
    """
    target_bin = world.scene.bin_by_fiducial(expected_fiducial)
    if target_bin is None:
        raise NavigationError("no-marker", f"fiducial {expected_fiducial} not in the map")
    marker_map = target_bin.marker_pose()
    seen = False
    frozen_obs = None
    freeze = bool(world.faults.get("freeze_marker_feedback"))

    for it in range(max_iters):
        # Pan the head toward where the map says the marker should be.
        believed = world.believed_base_pose()
        bearing = math.atan2(marker_map.t[1] - believed[1], marker_map.t[0] - believed[0])
        world.step(HeadPan(float(np.clip(wrap_angle(bearing - believed[2]), -math.pi / 2, math.pi / 2))))

        obs = None
        if frozen_obs is not None:
            obs = frozen_obs
        else:
            for o in detect_fiducials(world, events=None):
                if o.fiducial_id == expected_fiducial:
                    obs = o
                    break
        if obs is None:
            for _ in range(ticks_per_iter - 1):
                world.step(BaseVel(0.0, 0.0))
            continue
        seen = True
        if freeze and frozen_obs is None:
            frozen_obs = obs

        # Robot pose implied by the observation: camera = robot * mount,
        # marker_map = camera * pose_cam  =>  robot = marker_map * pose_cam^-1 * mount^-1.
        cam_from_robot = world.camera_pose().inverse() @ world.base_transform()
        robot_T = marker_map @ obs.pose_cam.inverse() @ cam_from_robot
        yaw = math.atan2(robot_T.R[1, 0], robot_T.R[0, 0])
        est = np.array([robot_T.t[0], robot_T.t[1], yaw])

        dx = goal.target[0] - est[0]
        dy = goal.target[1] - est[1]
        dist = math.hypot(dx, dy)
        yaw_err = wrap_angle(goal.target[2] - est[2])
        if dist <= goal.tolerance_pos and abs(yaw_err) <= goal.tolerance_yaw:
            return CorrectionResult(True, it + 1, dist)

        # Rotate-drive-rotate: a blended proportional law orbits the goal
        # at these velocity caps, so translate only when roughly aligned
        # (forward or backward, whichever needs less turning).
        bearing_err = wrap_angle(math.atan2(dy, dx) - est[2])
        back_err = wrap_angle(bearing_err + math.pi)
        if dist > goal.tolerance_pos:
            use_back = abs(back_err) < abs(bearing_err)
            steer = back_err if use_back else bearing_err
            if abs(steer) > 0.35:
                v = 0.0
            else:
                v = min(CORRECTION_V_MAX, 1.0 * dist)
                if use_back:
                    v = -v
            w = float(np.clip(2.0 * steer, -CORRECTION_W_MAX, CORRECTION_W_MAX))
        else:
            v = 0.0
            w = float(np.clip(2.0 * yaw_err, -CORRECTION_W_MAX, CORRECTION_W_MAX))
        for _ in range(ticks_per_iter):
            world.step(BaseVel(v, w))

    if not seen:
        raise NavigationError("no-marker", "marker never observed")
    return CorrectionResult(False, max_iters, math.inf, error_tag="timeout")
