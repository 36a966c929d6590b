"""Task orchestration: the job queue with retrieval priority, the
high-level task-selection tree, and the retrieval / restocking strategies
wired from perception, mapping, planning and navigation leaves.

Every failable leaf is wrapped in a FallbackSubtree with per-leaf (n, m)
from TaskConfig; recoveries are head re-scans (scene understanding),
marker-based base correction (navigation) and perturbed-posture replans
(constrained planning). Ablation flags disable each recovery type to
reproduce the (-R) experiment arms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import navigation
from .bt import Action, Blackboard, Condition, Fallback, Node, ReactiveFallback, Sequence, Status, build_fallback_subtree
from .geometry import Transform, box_cover_spheres, wrap_angle
from .kinematics import suction_target_pose
from .mapping import field_around
from .navigation import NavGoal, NavigationError, OccupancyGrid2D, fiducial_correct, plan_path
from .perception import detect_fiducials, detect_objects, suction_pipeline, PerceptionError
from .planning import (
    PlanningError,
    execute_with_feedback,
    plan_home,
    plan_place,
    plan_reach_goal,
    plan_reverse,
)
from .world import ArmTo, BT_PERIOD_TICKS, HeadPan, Idle, Suction, World

SCAN_COMPUTE_TICKS = 4          # sim ticks charged per rendered view
PLAN_TICK_CHARGE = True


class JobError(Exception):
    def __init__(self, tag: str, msg: str = ""):
        super().__init__(msg or tag)
        self.tag = tag


@dataclass
class Job:
    id: int
    kind: str                    # retrieve | restock
    sku: str
    state: str = "queued"        # queued -> active -> done | failed
    enqueue_tick: int = 0
    failure_tag: str = ""


class JobQueue:
    """FIFO per class; retrievals preempt queued restocks."""

    def __init__(self, world: World):
        self.world = world
        self.jobs: list[Job] = []
        self._next_id = 1

    def submit(self, kind: str, sku: str) -> Job:
        if kind not in ("retrieve", "restock"):
            raise JobError("bad-kind", f"unknown job kind {kind!r}")
        if sku not in self.world.scene.catalog():
            raise JobError("unknown-item", f"sku {sku!r} not in the catalog")
        job = Job(id=self._next_id, kind=kind, sku=sku, enqueue_tick=self.world.tick)
        self._next_id += 1
        self.jobs.append(job)
        self.world.emit("job-submitted", job=job.id, job_kind=kind, sku=sku)
        return job

    def queued(self, kind: str | None = None) -> list:
        out = [j for j in self.jobs if j.state == "queued"]
        if kind is not None:
            out = [j for j in out if j.kind == kind]
        return out

    def next_job(self) -> Job | None:
        """Highest-priority queued job: retrieve first, FIFO within class."""
        for kind in ("retrieve", "restock"):
            queue = self.queued(kind)
            if queue:
                return min(queue, key=lambda j: (j.enqueue_tick, j.id))
        return None

    def activate(self, job: Job):
        job.state = "active"
        self.world.emit("job-active", job=job.id, job_kind=job.kind, sku=job.sku)

    def finish(self, job: Job, success: bool, tag: str = ""):
        job.state = "done" if success else "failed"
        job.failure_tag = "" if success else tag
        self.world.emit("job-done" if success else "job-failed", job=job.id, sku=job.sku, error=tag)

    def active(self) -> Job | None:
        for j in self.jobs:
            if j.state == "active":
                return j
        return None

    def snapshot(self) -> list:
        order = []
        nxt = sorted(
            self.queued(), key=lambda j: (0 if j.kind == "retrieve" else 1, j.enqueue_tick, j.id)
        )
        active = self.active()
        if active:
            order.append(active)
        order.extend(nxt)
        return [
            {"id": j.id, "kind": j.kind, "sku": j.sku, "state": j.state, "enqueue_tick": j.enqueue_tick}
            for j in order
        ]


@dataclass
class TaskConfig:
    """Per-leaf retry budgets, recovery switches, and workspace standoffs."""

    n_m_navigation: tuple = (1, 3)
    n_m_planning: tuple = (2, 2)
    n_m_scene: tuple = (1, 3)
    n_m_grasp: tuple = (2, 1)
    enable_nav_correction: bool = True
    enable_plan_recovery: bool = True
    enable_rescan: bool = True
    shelf_standoff: float = 0.82
    bin_standoff: float = 0.77
    cart_standoff: float = 0.55
    align_tol: float = 0.06
    nav_tol: float = 0.05
    suction_window: int = 9
    suction_k: int = 10
    suction_epsilon: float = 1.0
    plan_margin: float = 0.02
    plan_budget_iters: int = 4000
    voxel: float = 0.02
    drop_gap: float = 0.03


class Services:
    """Shared context every leaf reads: world, grids, config, job queue."""

    def __init__(self, world: World, config: TaskConfig | None = None):
        self.world = world
        self.config = config or TaskConfig()
        self.grid = OccupancyGrid2D.from_scene(world.scene)
        self.queue = JobQueue(world)
        self.seed_counter = 0

    def next_seed(self) -> int:
        self.seed_counter += 1
        return self.world.noise.seed * 100003 + self.seed_counter

    # -- docks ----------------------------------------------------------------

    def shelf_dock(self, sku: str):
        item = self.world.scene.item_by_sku(sku)
        shelf = self.world.scene.shelves[0]
        out = shelf.pose.R[:, 0]
        lateral = shelf.pose.R[:, 1]
        anchor = item.pose.t if item is not None else shelf.pose.t
        # A slightly off-axis stance keeps the elbow clear of the board
        # edges; dead-center approaches fold the forearm onto them.
        pos = anchor[:2] + out[:2] * self.config.shelf_standoff + lateral[:2] * 0.06
        yaw = math.atan2(-out[1], -out[0])
        return np.array([pos[0], pos[1], yaw])

    def bin_dock(self, sku: str):
        b = self.world.scene.bin_for_sku(sku)
        out = b.pose.R[:, 0]
        pos = b.pose.t[:2] + out[:2] * self.config.bin_standoff
        yaw = math.atan2(-out[1], -out[0])
        return np.array([pos[0], pos[1], yaw])

    def cart_dock(self):
        cart = self.world.scene.cart
        face = cart.pose.t[1] - cart.top_extents[1] / 2
        return np.array([cart.pose.t[0], face - self.config.cart_standoff, math.pi / 2])

    def requester_dock(self):
        rp = self.world.scene.requester_pose
        yaw = math.atan2(rp.R[1, 0], rp.R[0, 0])
        return np.array([rp.t[0], rp.t[1], yaw])

    # -- mapping ---------------------------------------------------------------

    def build_field(self, center, extents, exclude_item_indices=(), views=(-0.4, 0.0, 0.4)):
        """Static-layout prior + fresh depth integration from head pans.

        The prior covers the camera's blind cone; depth registers items.
        The voxel-drop fault (NoiseConfig.voxel_drop_frac) degrades item
        registration exactly as a sensing dropout would.
        """
        world = self.world
        fld = field_around(center, extents, voxel=self.config.voxel)
        fld.integrate_boxes(world.scene.static_boxes(), weight=10.0)
        held = {world._held_index} if world._held_index is not None else set()
        for pan in views:
            world.step(HeadPan(pan))
            depth, _ = world.render_view(exclude_item_indices=set(exclude_item_indices) | held)
            fld.integrate_depth(
                depth, world.camera_pose(), world.camera,
                drop_frac=world.noise.voxel_drop_frac, rng=world.rng_depth,
            )
        fld.compute_esdf()
        return fld

    def manipulation_field(self, center_xy, exclude_item_indices=(), views=(-0.4, 0.0, 0.4)):
        center = [center_xy[0], center_xy[1], 0.85]
        return self.build_field(center, [1.6, 1.8, 1.7], exclude_item_indices, views)


# ---------------------------------------------------------------------------
# Leaves


class Leaf(Node):
    """Stateful leaf with a per-activation lifecycle."""

    def __init__(self, name: str, services: Services):
        super().__init__(name)
        self.sv = services
        self._started = False

    def _tick(self, bb):
        try:
            if not self._started:
                self._started = True
                self.on_start(bb)
            status = self.on_tick(bb)
        except (PlanningError, NavigationError, PerceptionError, JobError) as exc:
            bb.set("last_error", exc.tag)
            bb.emit("bt", node=self.name, status="error", error=exc.tag)
            status = Status.FAILURE
        if status != Status.RUNNING:
            self._started = False
        return status

    def on_start(self, bb):
        pass

    def on_tick(self, bb) -> Status:
        raise NotImplementedError

    def reset(self):
        self._started = False


class NavigateLeaf(Leaf):
    """Plan on the inflated grid once, then track with pure pursuit,
    advancing at most one BT period of sim ticks per tick."""

    def __init__(self, name, services, dock_fn):
        super().__init__(name, services)
        self.dock_fn = dock_fn
        self._path = None
        self._goal = None
        self._best = math.inf
        self._stall = 0

    def on_start(self, bb):
        world = self.sv.world
        target = self.dock_fn(bb)
        self._goal = NavGoal(target=target, tolerance_pos=self.sv.config.nav_tol)
        start = world.believed_base_pose()
        self._path = plan_path(
            self.sv.grid, start, target,
            inflation=navigation.ROBOT_RADIUS + navigation.INFLATION_MARGIN + navigation.NOISE_MARGIN,
        )
        self._best = math.inf
        self._stall = 0
        bb.set("nav_goal", self._goal)

    def on_tick(self, bb):
        world = self.sv.world
        goal = self._goal
        for _ in range(BT_PERIOD_TICKS):
            believed = world.believed_base_pose()
            err = float(np.linalg.norm(believed[:2] - goal.target[:2]))
            yaw_err = wrap_angle(goal.target[2] - believed[2])
            if err <= goal.tolerance_pos and abs(yaw_err) <= goal.tolerance_yaw:
                world.step(Idle())
                return Status.SUCCESS
            if err <= goal.tolerance_pos:
                world.step(navigation.BaseVel(0.0, float(np.clip(2.0 * yaw_err, -1.2, 1.2))))
            else:
                target = navigation._lookahead_point(self._path.points, believed[:2], 0.30)
                heading = math.atan2(target[1] - believed[1], target[0] - believed[0])
                hdg_err = wrap_angle(heading - believed[2])
                w = float(np.clip(2.5 * hdg_err, -1.2, 1.2))
                v = 0.4 * max(0.0, math.cos(hdg_err)) if abs(hdg_err) < math.pi / 2 else 0.0
                v = min(v, max(0.10, 1.2 * err))
                world.step(navigation.BaseVel(v, w))
            remaining = float(np.linalg.norm(world.believed_base_pose()[:2] - goal.target[:2]))
            if remaining < self._best - 1e-4:
                self._best = remaining
                self._stall = 0
            else:
                self._stall += 1
                if self._stall > 400:
                    raise NavigationError("stuck", "no progress toward the dock")
        return Status.RUNNING


class AlignLeaf(Leaf):
    """Marker-derived alignment check at a dock; the recovery (velocity
    correction from the same markers) runs when this fails."""

    def __init__(self, name, services, fiducial_fn):
        super().__init__(name, services)
        self.fiducial_fn = fiducial_fn

    def on_tick(self, bb):
        world = self.sv.world
        fid = self.fiducial_fn(bb)
        goal = bb.get("nav_goal")
        if goal is None or fid is None:
            return Status.SUCCESS
        target_bin = world.scene.bin_by_fiducial(fid)
        marker_map = target_bin.marker_pose()
        believed = world.believed_base_pose()
        bearing = math.atan2(marker_map.t[1] - believed[1], marker_map.t[0] - believed[0])
        world.step(HeadPan(float(np.clip(wrap_angle(bearing - believed[2]), -math.pi / 2, math.pi / 2))))
        obs = None
        for o in detect_fiducials(world, events=None):
            if o.fiducial_id == fid:
                obs = o
                break
        for _ in range(BT_PERIOD_TICKS - 1):
            world.step(Idle())
        if obs is None:
            bb.set("last_error", "no-marker")
            return Status.FAILURE
        cam_from_robot = world.camera_pose().inverse() @ world.base_transform()
        robot_T = marker_map @ obs.pose_cam.inverse() @ cam_from_robot
        yaw = math.atan2(robot_T.R[1, 0], robot_T.R[0, 0])
        est = np.array([robot_T.t[0], robot_T.t[1], yaw])
        err = float(np.linalg.norm(est[:2] - goal.target[:2]))
        yaw_err = abs(wrap_angle(goal.target[2] - est[2]))
        bb.set("marker_pose_estimate", est)
        if err <= self.sv.config.align_tol and yaw_err <= goal.tolerance_yaw:
            return Status.SUCCESS
        bb.set("last_error", "misaligned")
        return Status.FAILURE


class NavCorrectionLeaf(Leaf):
    """Recovery: closed-loop marker correction toward the current nav goal."""

    def __init__(self, name, services, fiducial_fn):
        super().__init__(name, services)
        self.fiducial_fn = fiducial_fn

    def on_tick(self, bb):
        world = self.sv.world
        goal = bb.get("nav_goal")
        fid = self.fiducial_fn(bb)
        if goal is None or fid is None:
            return Status.SUCCESS
        tol = NavGoal(target=goal.target, tolerance_pos=self.sv.config.align_tol)
        try:
            result = fiducial_correct(world, tol, fid)
        except NavigationError as exc:
            bb.set("last_error", exc.tag)
            return Status.FAILURE
        bb.emit("nav-correction", converged=result.converged, iterations=result.iterations)
        return Status.SUCCESS if result.converged else Status.FAILURE


class ScanLeaf(Leaf):
    """Render, build the local field, and detect the wanted sku."""

    def __init__(self, name, services, sku_fn, center_fn, prefer_fn):
        super().__init__(name, services)
        self.sku_fn = sku_fn
        self.center_fn = center_fn
        self.prefer_fn = prefer_fn
        self._charge = 0

    def on_start(self, bb):
        self._charge = SCAN_COMPUTE_TICKS

    def on_tick(self, bb):
        world = self.sv.world
        while self._charge > 0:
            world.step(Idle())
            self._charge -= 1
            if self._charge % BT_PERIOD_TICKS == 0 and self._charge > 0:
                return Status.RUNNING
        sku = self.sku_fn(bb)
        center = np.asarray(self.center_fn(bb), dtype=float)
        pans = bb.pop("rescan_pans", None) or (world.robot.head_angle,)
        detection = None
        depth = inst = None
        for pan in pans:
            world.step(HeadPan(pan))
            depth, inst = world.render_view()
            dets = detect_objects(world, inst, events=None)
            best = None
            for d in dets:
                if d.sku != sku:
                    continue
                # Gate to the expected workspace: a matching sku elsewhere in
                # the room (e.g. already delivered) is not this job's target.
                ys, xs = np.nonzero(d.mask & np.isfinite(depth))
                if ys.size == 0:
                    continue
                pts = world.camera.back_project(xs, ys, depth[ys, xs])
                centroid = world.camera_pose().apply(pts).mean(axis=0)
                dist = float(np.linalg.norm(centroid[:2] - center[:2]))
                if dist <= 1.0 and (best is None or dist < best[0]):
                    best = (dist, d)
            if best is not None:
                detection = best[1]
                break
        if detection is None:
            bb.set("last_error", "not-found")
            return Status.FAILURE
        bb.set("detection", detection)
        bb.set("scan_depth", depth)
        bb.set("scan_instances", inst)
        bb.set("scan_cam_pose", world.camera_pose())
        bb.set("prefer_normal_world", self.prefer_fn(bb))
        # Field excludes the grasp target so its surface voxels never veto
        # the approach.
        target_idx = self._target_index(world, inst, detection)
        bb.set("target_item_index", target_idx)
        exclude = {target_idx} if target_idx is not None else set()
        field = self.sv.manipulation_field(self.center_fn(bb), exclude_item_indices=exclude)
        bb.set("field", field)
        return Status.SUCCESS

    def _target_index(self, world, inst, detection):
        ids, counts = np.unique(inst[detection.mask], return_counts=True)
        best = None
        for ident, cnt in zip(ids, counts):
            idx = world.item_index_of_instance(int(ident))
            if idx is not None and (best is None or cnt > best[1]):
                best = (idx, cnt)
        return best[0] if best else None


class RescanLeaf(Leaf):
    """Recovery: queue alternate head pans for the next scan attempt."""

    def __init__(self, name, services):
        super().__init__(name, services)
        self._round = 0

    def on_tick(self, bb):
        world = self.sv.world
        pans_cycle = [(-0.35, 0.0, 0.35), (0.5, -0.5, 0.0), (0.2, -0.2, 0.0)]
        pans = pans_cycle[self._round % len(pans_cycle)]
        self._round += 1
        bb.set("rescan_pans", pans)
        bb.emit("head-rescan", pans=list(pans))
        for _ in range(BT_PERIOD_TICKS):
            world.step(Idle())
        return Status.SUCCESS


class SuctionPoseLeaf(Leaf):
    def on_tick(self, bb):
        world = self.sv.world
        detection = bb.get("detection")
        depth = bb.get("scan_depth")
        cam_pose = bb.get("scan_cam_pose")
        if detection is None or depth is None:
            bb.set("last_error", "no-detection")
            return Status.FAILURE
        prefer_world = bb.get("prefer_normal_world")
        prefer_cam = cam_pose.R.T @ prefer_world if prefer_world is not None else None
        cfg = self.sv.config
        events = []
        pose = suction_pipeline(
            depth, detection.mask, world.camera, window=cfg.suction_window,
            epsilon=cfg.suction_epsilon, k=cfg.suction_k, cam_pose=cam_pose,
            events=events, prefer_normal_cam=prefer_cam,
        )
        for e in events:
            bb.emit(**e)
        if prefer_world is not None:
            angle = math.degrees(
                math.acos(float(np.clip(-pose.approach_world @ prefer_world, -1.0, 1.0)))
            )
            if angle > 40.0:
                bb.set("last_error", "bad-approach")
                return Status.FAILURE
        bb.set("suction_pose", pose)
        world.step(Idle())
        return Status.SUCCESS


class PlanReachLeaf(Leaf):
    """Constrained reach plan; charges simulated compute while Running."""

    def __init__(self, name, services):
        super().__init__(name, services)
        self._charge = 0
        self._traj = None

    def on_start(self, bb):
        world = self.sv.world
        pose = bb.get("suction_pose")
        field = bb.get("field")
        if pose is None or field is None:
            raise PlanningError("no-path", "no suction pose or field on the blackboard")
        target = suction_target_pose(pose.contact_world, pose.approach_world)
        cfg = self.sv.config
        self._traj = plan_reach_goal(
            world.chain, world.robot.arm_config, target, field,
            base=world.base_transform(), margin=cfg.plan_margin,
            seed=self.sv.next_seed(), budget_iters=bb.pop("plan_budget_override", None) or cfg.plan_budget_iters,
        )
        self._charge = max(1, int(round(self._traj.planning_time / 0.05)))

    def on_tick(self, bb):
        world = self.sv.world
        while self._charge > 0:
            world.step(Idle())
            self._charge -= 1
            if self._charge % BT_PERIOD_TICKS == 0 and self._charge > 0:
                return Status.RUNNING
        bb.set("reach_traj", self._traj)
        return Status.SUCCESS


class PerturbPostureLeaf(Leaf):
    """Recovery for planning: move the arm to a nearby collision-checked
    posture so the next plan starts from a different basin (and seed)."""

    def on_tick(self, bb):
        world = self.sv.world
        rng = world.rng_misc
        q = world.robot.arm_config.copy()
        field = bb.get("field")
        grasp = bb.get("grasp")
        attached = grasp["attached"] if (grasp and world._held_index is not None) else None
        q_new = None
        if field is not None:
            from .planning import SphereChecker

            checker = SphereChecker(world.chain, field, world.base_transform(),
                                    self.sv.config.plan_margin, attached)
            for _ in range(8):
                cand = world.chain.clamp(q + rng.normal(0.0, 0.08, q.shape[0]))
                if checker.config_valid(cand) and checker.edge_valid(q, cand):
                    q_new = cand
                    break
        if q_new is not None:
            world.step(ArmTo(q_new))
        else:
            world.step(Idle())
        for _ in range(BT_PERIOD_TICKS - 1):
            world.step(Idle())
        bb.emit("plan-recovery-posture", moved=q_new is not None)
        return Status.SUCCESS


class GraspExecuteLeaf(Leaf):
    """Suction on, run the reach trajectory one waypoint per tick; preempt
    on seal; attach on success; sliced retreat on a failed seal."""

    def __init__(self, name, services):
        super().__init__(name, services)
        self._i = 0
        self._traj = None
        self._retreating = False

    def on_start(self, bb):
        world = self.sv.world
        self._traj = bb.get("reach_traj")
        self._i = 0
        self._retreating = False
        if self._traj is None:
            # Retry round after a failed seal: replan from here.
            pose = bb.get("suction_pose")
            field = bb.get("field")
            if pose is None or field is None:
                raise PlanningError("no-path", "nothing to grasp")
            target = suction_target_pose(pose.contact_world, pose.approach_world)
            cfg = self.sv.config
            self._traj = plan_reach_goal(
                world.chain, world.robot.arm_config, target, field,
                base=world.base_transform(), margin=cfg.plan_margin,
                seed=self.sv.next_seed(), budget_iters=cfg.plan_budget_iters,
            )
        world.step(Suction(True))

    def on_tick(self, bb):
        world = self.sv.world
        traj = self._traj
        sku = bb.get("job").sku if bb.get("job") else bb.get("detection").sku
        if self._retreating:
            for _ in range(BT_PERIOD_TICKS):
                if self._i <= 0:
                    break
                self._i -= 1
                world.step(ArmTo(traj.waypoints[self._i]))
            if self._i <= 0:
                bb.set("reach_traj", None)
                bb.set("last_error", "no-seal")
                return Status.FAILURE
            return Status.RUNNING
        for _ in range(BT_PERIOD_TICKS):
            if self._i >= len(traj.waypoints):
                break
            world.step(ArmTo(traj.waypoints[self._i]))
            self._i += 1
            if world.robot.gripper.sealed:
                break
        g = world.robot.gripper
        if g.sealed:
            try:
                world.attach_item(sku)
            except Exception:
                bb.set("last_error", "no-seal")
                return Status.FAILURE
            executed = traj.truncated(self._i)
            bb.set("executed_traj", executed)
            bb.set("reach_traj", None)
            item_idx = world._held_index
            item = world.scene.items[item_idx]
            ee = world.ee_pose()
            grasp_off = ee.inverse() @ world.item_pose(item_idx)
            attached = [
                (grasp_off.apply(c), r)
                for c, r in box_cover_spheres(np.asarray(item.box_extents) / 2.0)
            ]
            bb.set("grasp", {
                "item_index": item_idx,
                "attached": attached,
                "R_grasp": ee.R.copy(),
                "hold_height": float(ee.t[2] - (world.item_pose(item_idx).t[2] - item.box_extents[2] / 2)),
                "item_extents": tuple(item.box_extents),
            })
            bb.emit("grasped", sku=item.sku)
            return Status.SUCCESS
        if self._i >= len(traj.waypoints):
            # Completed the approach without a seal: back out, then fail.
            world.step(Suction(False))
            self._retreating = True
        return Status.RUNNING


class ReverseLeaf(Leaf):
    """Plan and run the reverse retreat with the held item attached."""

    def __init__(self, name, services):
        super().__init__(name, services)
        self._traj = None
        self._i = 0
        self._charge = 0

    def on_start(self, bb):
        world = self.sv.world
        grasp = bb.get("grasp")
        executed = bb.get("executed_traj")
        field = bb.get("field")
        if grasp is None or executed is None or field is None:
            raise PlanningError("no-path", "nothing to reverse")
        self._traj = plan_reverse(
            world.chain, executed, grasp["attached"], field,
            base=world.base_transform(), margin=self.sv.config.plan_margin,
            seed=self.sv.next_seed(),
        )
        self._charge = max(1, int(round(self._traj.planning_time / 0.05)))
        self._i = 0

    def on_tick(self, bb):
        world = self.sv.world
        while self._charge > 0:
            world.step(Idle())
            self._charge -= 1
            if self._charge % BT_PERIOD_TICKS == 0 and self._charge > 0:
                return Status.RUNNING
        traj = self._traj
        for _ in range(BT_PERIOD_TICKS):
            if self._i >= len(traj.waypoints):
                break
            world.step(ArmTo(traj.waypoints[self._i]))
            self._i += 1
            if not world.robot.gripper.sealed:
                bb.set("last_error", "slip")
                return Status.FAILURE
        if self._i >= len(traj.waypoints):
            return Status.SUCCESS
        return Status.RUNNING


class PlaceLeaf(Leaf):
    """Carry the held item over the destination and lower it in.

    The destination pose comes from the marker estimate (bins) or the
    requester surface; descent keeps the grasp orientation.
    """

    def __init__(self, name, services, target_fn):
        super().__init__(name, services)
        self.target_fn = target_fn
        self._traj = None
        self._i = 0
        self._charge = 0
        self._slot = 0

    def on_start(self, bb):
        world = self.sv.world
        grasp = bb.get("grasp")
        if grasp is None or world._held_index is None:
            raise PlanningError("no-path", "no held item to place")
        # Retries cycle through lateral sub-slots so an occupied center
        # (earlier restock into the same bin) does not dead-end the job.
        bb.set("place_slot", self._slot)
        self._slot += 1
        target_xy, surface_z = self.target_fn(bb)
        cfg = self.sv.config
        cup_z = surface_z + cfg.drop_gap + grasp["hold_height"]
        place_pose = Transform(grasp["R_grasp"], np.array([target_xy[0], target_xy[1], cup_z]))
        field = self.sv.manipulation_field(target_xy, exclude_item_indices={grasp["item_index"]})
        bb.set("field", field)
        self._traj = plan_place(
            world.chain, world.robot.arm_config, place_pose, field,
            base=world.base_transform(), margin=cfg.plan_margin,
            seed=self.sv.next_seed(), attached=grasp["attached"],
        )
        self._charge = max(1, int(round(self._traj.planning_time / 0.05)))
        self._i = 0

    def on_tick(self, bb):
        world = self.sv.world
        while self._charge > 0:
            world.step(Idle())
            self._charge -= 1
            if self._charge % BT_PERIOD_TICKS == 0 and self._charge > 0:
                return Status.RUNNING
        traj = self._traj
        for _ in range(BT_PERIOD_TICKS):
            if self._i >= len(traj.waypoints):
                break
            world.step(ArmTo(traj.waypoints[self._i]))
            self._i += 1
            if not world.robot.gripper.sealed:
                bb.set("last_error", "slip")
                return Status.FAILURE
        if self._i < len(traj.waypoints):
            return Status.RUNNING
        world.detach_item()
        bb.set("grasp", None)
        bb.set("executed_traj", None)
        return Status.SUCCESS


class HomeLeaf(Leaf):
    def __init__(self, name, services):
        super().__init__(name, services)
        self._traj = None
        self._i = 0

    def on_start(self, bb):
        world = self.sv.world
        grasp = bb.get("grasp")
        attached = grasp["attached"] if (grasp and world._held_index is not None) else None
        # The base may have moved since the last scan; always map the
        # current surroundings before retracting.
        ahead = world.robot.base_pose[:2] + 0.5 * np.array(
            [math.cos(world.robot.base_pose[2]), math.sin(world.robot.base_pose[2])]
        )
        field = self.sv.manipulation_field(ahead)
        self._traj = plan_home(
            world.chain, world.robot.arm_config, field,
            base=world.base_transform(), margin=self.sv.config.plan_margin,
            seed=self.sv.next_seed(), attached=attached,
        )
        self._i = 0

    def on_tick(self, bb):
        world = self.sv.world
        traj = self._traj
        for _ in range(BT_PERIOD_TICKS):
            if self._i >= len(traj.waypoints):
                break
            world.step(ArmTo(traj.waypoints[self._i]))
            self._i += 1
        if self._i >= len(traj.waypoints):
            return Status.SUCCESS
        return Status.RUNNING


# ---------------------------------------------------------------------------
# Strategies


def _wrap(services: Services, leaf: Node, kind: str, recovery: Node | None, post=None) -> Node:
    cfg = services.config
    n, m = {
        "navigation": cfg.n_m_navigation,
        "planning": cfg.n_m_planning,
        "scene": cfg.n_m_scene,
        "grasp": cfg.n_m_grasp,
    }[kind]
    enabled = {
        "navigation": cfg.enable_nav_correction,
        "planning": cfg.enable_plan_recovery,
        "scene": cfg.enable_rescan,
        "grasp": True,
    }[kind]
    return build_fallback_subtree(leaf, post_condition=post,
                                  recovery=recovery if enabled else None, n=n, m=m)


def retrieval_strategy(services: Services) -> Node:
    sv = services

    def job_sku(bb):
        return bb.get("job").sku

    def shelf_fid(bb):
        b = sv.world.scene.bin_for_sku(job_sku(bb))
        return b.fiducial_id if b else None

    def item_center(bb):
        item = sv.world.scene.item_by_sku(job_sku(bb))
        return item.pose.t[:2] if item is not None else sv.world.robot.base_pose[:2]

    def shelf_out(bb):
        return sv.world.scene.shelves[0].pose.R[:, 0]

    def requester_target(bb):
        scene = sv.world.scene
        rp = scene.requester_pose
        fwd = rp.R[:, 0]
        target_xy = rp.t[:2] + fwd[:2] * 0.70
        return target_xy, scene.requester_surface_height

    nav_to_shelf = _wrap(
        sv, NavigateLeaf("navigate-shelf", sv, lambda bb: sv.shelf_dock(job_sku(bb))),
        "navigation", NavCorrectionLeaf("nav-correct", sv, shelf_fid),
    )
    align = _wrap(
        sv, AlignLeaf("bin-localize", sv, shelf_fid),
        "navigation", NavCorrectionLeaf("align-correct", sv, shelf_fid),
    )
    scan = _wrap(
        sv,
        ScanLeaf("detect-item", sv, job_sku, item_center, shelf_out),
        "scene", RescanLeaf("head-rescan", sv),
    )
    pose = _wrap(sv, SuctionPoseLeaf("suction-pose", sv), "scene", RescanLeaf("pose-rescan", sv))
    plan = _wrap(sv, PlanReachLeaf("plan-reach", sv), "planning", PerturbPostureLeaf("plan-recovery", sv))
    grasp = _wrap(sv, GraspExecuteLeaf("grasp", sv), "grasp", None)
    reverse = _wrap(sv, ReverseLeaf("reverse", sv), "planning", PerturbPostureLeaf("reverse-recovery", sv))
    nav_back = _wrap(
        sv, NavigateLeaf("navigate-requester", sv, lambda bb: sv.requester_dock()),
        "navigation", None,
    )
    handover = _wrap(sv, PlaceLeaf("handover", sv, requester_target), "planning", None)
    home = _wrap(sv, HomeLeaf("home", sv), "planning", None)
    retract = _wrap(sv, HomeLeaf("retract", sv), "planning", None)

    return Sequence("retrieval", [nav_to_shelf, align, scan, pose, plan, grasp, reverse,
                                  home, nav_back, handover, retract])


def restock_strategy(services: Services) -> Node:
    sv = services

    def job_sku(bb):
        return bb.get("job").sku

    def bin_fid(bb):
        b = sv.world.scene.bin_for_sku(job_sku(bb))
        return b.fiducial_id if b else None

    def cart_center(bb):
        return sv.world.scene.cart.pose.t[:2]

    def up(bb):
        return np.array([0.0, 0.0, 1.0])

    def bin_target(bb):
        """Bin floor slot; alignment has already pulled the true base
        within tolerance of the dock, so the map-frame target is valid.
        Slots cycle across retries in the bin frame."""
        b = sv.world.scene.bin_for_sku(job_sku(bb))
        # Two side-by-side slots first (a 0.30 m bin fits two 0.10 m items),
        # then lateral spares.
        offsets = [(-0.075, 0.0), (0.075, 0.0), (0.0, -0.06), (0.0, 0.06), (0.0, 0.0)]
        ox, oy = offsets[bb.get("place_slot", 0) % len(offsets)]
        slot = b.pose.apply(np.array([ox, oy, 0.0]))
        return slot[:2], float(b.pose.t[2])

    nav_to_cart = _wrap(
        sv, NavigateLeaf("navigate-cart", sv, lambda bb: sv.cart_dock()),
        "navigation", None,
    )
    scan = _wrap(
        sv, ScanLeaf("detect-box", sv, job_sku, cart_center, up),
        "scene", RescanLeaf("head-rescan", sv),
    )
    pose = _wrap(sv, SuctionPoseLeaf("suction-pose", sv), "scene", RescanLeaf("pose-rescan", sv))
    plan = _wrap(sv, PlanReachLeaf("plan-reach", sv), "planning", PerturbPostureLeaf("plan-recovery", sv))
    grasp = _wrap(sv, GraspExecuteLeaf("grasp", sv), "grasp", None)
    reverse = _wrap(sv, ReverseLeaf("reverse", sv), "planning", PerturbPostureLeaf("reverse-recovery", sv))
    nav_to_bin = _wrap(
        sv, NavigateLeaf("navigate-bin", sv, lambda bb: sv.bin_dock(job_sku(bb))),
        "navigation", NavCorrectionLeaf("nav-correct", sv, bin_fid),
    )
    align = _wrap(
        sv, AlignLeaf("bin-localize", sv, bin_fid),
        "navigation", NavCorrectionLeaf("align-correct", sv, bin_fid),
    )
    place = _wrap(sv, PlaceLeaf("place-bin", sv, bin_target), "planning", None)
    home = _wrap(sv, HomeLeaf("home", sv), "planning", None)

    def restock_outcome(bb):
        events = sv.world.events
        for e in reversed(events):
            if e["kind"] == "restocked":
                return True
            if e["kind"] in ("wrong-bin", "placed"):
                return False
        return False

    place_checked = Sequence("place-and-verify", [place, Condition("restocked?", restock_outcome)])
    return Sequence("restock", [nav_to_cart, scan, pose, plan, grasp, reverse,
                                nav_to_bin, align, place_checked, home])


# ---------------------------------------------------------------------------
# Task selection


class StrategyGate(Leaf):
    """Pops the next job of its kind when idle, runs the strategy subtree,
    and marks the job done/failed on resolution."""

    def __init__(self, name, services, kind: str, strategy: Node):
        super().__init__(name, services)
        self.kind = kind
        self.strategy = strategy

    def _tick(self, bb):
        sv = self.sv
        job = bb.get("job")
        if job is not None and job.state == "active":
            if job.kind != self.kind:
                return Status.FAILURE   # another gate owns the robot
        else:
            nxt = sv.queue.next_job()
            if nxt is None or nxt.kind != self.kind:
                return Status.FAILURE
            sv.queue.activate(nxt)
            bb.set("job", nxt)
            self.strategy.reset()
            job = nxt
        status = self.strategy.tick(bb)
        if status == Status.RUNNING:
            return Status.RUNNING
        success = status == Status.SUCCESS
        sv.queue.finish(job, success, tag=bb.pop("last_error", "") if not success else "")
        bb.set("job", None)
        for key in ("detection", "suction_pose", "reach_traj", "executed_traj", "grasp", "field"):
            bb.set(key, None)
        if not success and sv.world._held_index is not None:
            sv.world.detach_item()
        return status

    def reset(self):
        super().reset()
        self.strategy.reset()


class IdleLeaf(Leaf):
    def on_tick(self, bb):
        for _ in range(BT_PERIOD_TICKS):
            self.sv.world.step(Idle())
        return Status.RUNNING


def build_task_selection_tree(services: Services) -> Node:
    retrieve_gate = StrategyGate("retrieve-gate", services, "retrieve", retrieval_strategy(services))
    restock_gate = StrategyGate("restock-gate", services, "restock", restock_strategy(services))
    idle = IdleLeaf("idle", services)
    return ReactiveFallback("task-selection", [retrieve_gate, restock_gate, idle])


# ---------------------------------------------------------------------------
# Runner


class MissionRunner:
    """Owns the 5 Hz BT / 20 Hz sim contract: every BT tick advances the
    world exactly one BT period of sim ticks (leaves consume their slice,
    the runner tops up with idle steps)."""

    def __init__(self, world: World, services: Services | None = None):
        self.world = world
        self.services = services or Services(world)
        self.tree = build_task_selection_tree(self.services)
        self.bb = Blackboard(world=world, services=self.services)
        self.bt_ticks = 0

    @property
    def queue(self) -> JobQueue:
        return self.services.queue

    def tick_once(self) -> Status:
        start = self.world.tick
        status = self.tree.tick(self.bb)
        used = self.world.tick - start
        for _ in range(max(0, BT_PERIOD_TICKS - used)):
            self.world.step(Idle())
        self.bt_ticks += 1
        return status

    def run_until_idle(self, max_bt_ticks: int = 5000) -> bool:
        """Tick until the queue drains (all jobs resolved). True if drained."""
        for _ in range(max_bt_ticks):
            self.tick_once()
            if not self.queue.queued() and self.queue.active() is None:
                return True
        return False
