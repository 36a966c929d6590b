"""Experiment harness: seeded Monte-Carlo trials per pipeline, the
recovery-ablation arms, and report emission.

Success-rate targets are directional (ablation ordering, threshold
floors); avg time is simulated seconds so reports replay byte-identically
from (config, seeds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .camera import CameraModel
from .events import canonical_json, config_hash
from .geometry import Transform, wrap_angle
from .kinematics import KinematicsError, suction_target_pose
from .navigation import NavGoal, NavigationError, OccupancyGrid2D, execute_path, fiducial_correct, plan_path
from .orchestration import MissionRunner, Services, TaskConfig
from .perception import detect_objects, estimate_normals, face_submask, suction_pipeline
from .planning import PlanningError, execute_with_feedback, plan_reach_goal
from .scene import NoiseConfig, default_supply_room, load_scene
from .world import World

PIPELINES = (
    "navigation",
    "constrained-planning",
    "scene-understanding",
    "suction-pose",
    "retrieval",
    "restock",
    "combined",
)


@dataclass
class TrialSpec:
    pipeline: str
    seed: int = 0
    recovery: bool = True
    scenario: str | None = None          # scene file path; None = built-in room
    nav_tolerance: float = 0.05          # m, ground-truth goal criterion
    suction_pos_tol: float = 0.01        # m from the object surface
    suction_angle_tol: float = 5.0       # degrees from the surface normal
    pose_record_tol: float = 0.05        # scene-understanding position criterion
    camera: tuple = (256, 192)
    zero_noise: bool = False

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.nav_tolerance <= 0 or self.suction_pos_tol <= 0 or self.suction_angle_tol <= 0:
            raise ValueError("criterion parameters must be positive")


@dataclass
class TrialResult:
    success: bool
    sim_time: float
    recovery_triggered: int
    failure_tag: str = ""
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.success:
            self.failure_tag = ""
        elif not self.failure_tag:
            self.failure_tag = "unspecified"


def _load_world(spec: TrialSpec, base_start=(3.0, 3.0, 0.0)):
    if spec.scenario:
        scene, noise, robot = load_scene(spec.scenario)
        noise = NoiseConfig(**{**asdict(noise), "seed": spec.seed})
        if spec.zero_noise:
            noise = NoiseConfig.zero(seed=spec.seed)
        base_start = tuple(robot.get("base_start", base_start))
    else:
        nc = NoiseConfig.zero(seed=spec.seed) if spec.zero_noise else NoiseConfig(seed=spec.seed)
        scene, noise = default_supply_room(nc)
    return World(scene, noise, camera=CameraModel.scaled(*spec.camera), base_start=base_start)


def _count_recoveries(world) -> int:
    return sum(1 for e in world.events if e.get("kind") == "bt" and e.get("status") == "recovery")


# ---------------------------------------------------------------------------
# Pipeline protocols


def _run_navigation(spec: TrialSpec) -> TrialResult:
    """Random displaced start -> marker-rich dock; success when the TRUE
    pose lands within the tolerance."""
    world = _load_world(spec)
    rng = np.random.default_rng(spec.seed * 7 + 1)
    grid = OccupancyGrid2D.from_scene(world.scene)
    sv = Services(world)

    goal_pose = sv.bin_dock("gauze")
    goal = NavGoal(target=goal_pose, tolerance_pos=spec.nav_tolerance)

    blocked = grid.inflated(0.55)
    for _ in range(100):
        start = np.array([
            rng.uniform(0.8, 4.2), rng.uniform(0.8, 4.2), rng.uniform(-math.pi, math.pi)
        ])
        i, j = grid.world_to_cell(start)
        if 0 <= i < blocked.shape[0] and 0 <= j < blocked.shape[1] and not blocked[i, j] \
                and np.linalg.norm(start[:2] - goal_pose[:2]) > 1.5:
            break
    world.robot.base_pose = start.copy()

    import stockbot.navigation as nav

    recoveries = 0
    try:
        path = plan_path(grid, world.believed_base_pose(), goal_pose,
                         inflation=nav.ROBOT_RADIUS + nav.INFLATION_MARGIN + nav.NOISE_MARGIN)
        execute_path(world, path, goal)
    except NavigationError as exc:
        return TrialResult(False, world.sim_time(), 0, exc.tag)

    if spec.recovery:
        true_err = float(np.linalg.norm(world.robot.base_pose[:2] - goal_pose[:2]))
        if true_err > spec.nav_tolerance:
            b = world.scene.bin_for_sku("gauze")
            try:
                result = fiducial_correct(world, NavGoal(target=goal_pose, tolerance_pos=0.04), b.fiducial_id)
                recoveries = 1
            except NavigationError as exc:
                return TrialResult(False, world.sim_time(), 1, exc.tag)

    err = float(np.linalg.norm(world.robot.base_pose[:2] - goal_pose[:2]))
    ok = err <= spec.nav_tolerance
    return TrialResult(ok, world.sim_time(), recoveries,
                       "" if ok else "goal-tolerance", {"true_error": round(err, 4)})


def _feasible_shelf_target(world, rng):
    """A physically feasible EE pose near the shelf face (IK-checked)."""
    shelf = world.scene.shelves[0]
    out = shelf.pose.R[:, 0]
    for _ in range(50):
        dy = rng.uniform(-0.8, 0.8)
        dz = rng.uniform(0.76, 0.95)
        anchor = shelf.pose.apply(np.array([0.0, dy, 0.0]))
        contact = np.array([anchor[0], anchor[1], dz]) + out * rng.uniform(0.0, 0.04)
        pose = suction_target_pose(contact, -out)
        dock = contact[:2] + out[:2] * 0.85
        base = Transform.from_xyz_yaw(dock[0], dock[1], 0.0,
                                      math.atan2(-out[1], -out[0]))
        try:
            world.chain.ik(pose, base=base, mode="axis", restarts=6,
                           rng=np.random.default_rng(int(rng.integers(1 << 30))))
        except KinematicsError:
            continue
        return pose, np.array([dock[0], dock[1], math.atan2(-out[1], -out[0])])
    raise RuntimeError("no feasible target found")


def _run_constrained_planning(spec: TrialSpec) -> TrialResult:
    """Manipulator near the shelf, feasible EE target, collision-aware plan;
    recovery retries from perturbed postures with fresh seeds."""
    world = _load_world(spec)
    rng = np.random.default_rng(spec.seed * 7 + 2)
    sv = Services(world)
    pose, dock = _feasible_shelf_target(world, rng)
    world.robot.base_pose = dock.copy()

    field = sv.manipulation_field(pose.t[:2])
    cfg = sv.config
    n, m = cfg.n_m_planning
    attempts_allowed = n * m if spec.recovery else n
    recoveries = 0
    tag = ""
    for attempt in range(attempts_allowed):
        try:
            traj = plan_reach_goal(
                world.chain, world.robot.arm_config, pose, field,
                base=world.base_transform(), margin=cfg.plan_margin,
                seed=spec.seed * 1009 + attempt,
                budget_iters=cfg.plan_budget_iters,
            )
        except PlanningError as exc:
            tag = exc.tag
            if spec.recovery and attempt + 1 < attempts_allowed and (attempt + 1) % n == 0:
                recoveries += 1
                q = world.chain.clamp(
                    world.robot.arm_config + rng.normal(0.0, 0.08, world.chain.dof)
                )
                from .planning import SphereChecker

                if SphereChecker(world.chain, field, world.base_transform(), cfg.plan_margin).config_valid(q):
                    from .world import ArmTo

                    world.step(ArmTo(q))
            continue
        execute_with_feedback(world, traj)
        T = world.chain.fk(traj.waypoints[-1], world.base_transform())
        pos_err = float(np.linalg.norm(T.t - pose.t))
        angle = math.degrees(math.acos(float(np.clip(T.R[:, 0] @ pose.R[:, 0], -1, 1))))
        collided = any(e["kind"] == "collision" for e in world.events)
        ok = pos_err <= spec.suction_pos_tol and angle <= spec.suction_angle_tol and not collided
        return TrialResult(ok, world.sim_time() + traj.planning_time, recoveries,
                           "" if ok else ("collision" if collided else "pose-tolerance"),
                           {"pos_err": round(pos_err, 4), "angle": round(angle, 2)})
    return TrialResult(False, world.sim_time(), recoveries, tag or "no-path")


def _run_scene_understanding(spec: TrialSpec) -> TrialResult:
    """Identify and localize every visible shelf item from the dock;
    recovery re-scans with adjusted head angles."""
    world = _load_world(spec)
    sv = Services(world)
    world.robot.base_pose = sv.shelf_dock("gauze")

    shelf_skus = set()
    depth0, inst0 = world.render_view()
    for ident in np.unique(inst0):
        idx = world.item_index_of_instance(int(ident))
        if idx is not None:
            shelf_skus.add(world.scene.items[idx].sku)
    if not shelf_skus:
        return TrialResult(False, world.sim_time(), 0, "nothing-visible")

    n, m = sv.config.n_m_scene
    rounds = m if spec.recovery else 1
    pans_cycle = [(0.0,), (-0.35, 0.0, 0.35), (0.5, -0.5, 0.0)]
    found: dict = {}
    recoveries = 0
    from .world import HeadPan

    for r in range(rounds):
        if r > 0:
            recoveries += 1
        for pan in pans_cycle[min(r, len(pans_cycle) - 1)]:
            world.step(HeadPan(pan))
            depth, inst = world.render_view()
            dets = detect_objects(world, inst)
            for det in dets:
                if det.sku in found:
                    continue
                ys, xs = np.nonzero(det.mask & np.isfinite(depth))
                if ys.size == 0:
                    continue
                pts = world.camera.back_project(xs, ys, depth[ys, xs])
                centroid = world.camera_pose().apply(pts).mean(axis=0)
                found[det.sku] = centroid
        if shelf_skus <= set(found):
            break

    missing = shelf_skus - set(found)
    if missing:
        return TrialResult(False, world.sim_time(), recoveries, "not-found",
                           {"missing": sorted(missing)})
    worst = 0.0
    for sku, centroid in found.items():
        item = world.scene.item_by_sku(sku)
        # The visible-surface centroid sits half a depth extent off center.
        err = float(np.linalg.norm(centroid - item.pose.t)) - item.box_extents[0] / 2
        worst = max(worst, err)
    ok = worst <= spec.pose_record_tol
    return TrialResult(ok, world.sim_time(), recoveries,
                       "" if ok else "pose-error", {"worst_err": round(worst, 4)})


def _run_suction_pose(spec: TrialSpec) -> TrialResult:
    """Random single-item placement -> pose -> free-space reach; §IV
    criterion on the executed end-effector pose vs the true surface."""
    rng = np.random.default_rng(spec.seed * 7 + 3)
    nc = NoiseConfig.zero(seed=spec.seed) if spec.zero_noise else NoiseConfig(seed=spec.seed)
    scene, noise = default_supply_room(nc, extra_shelf_items=False)

    # One item of a random sku at a random slot in the storage bands
    # between bins (under-bin slots are unreachable by shelf design).
    shelf = scene.shelves[0]
    sku = ("saline", "gauze", "syringe")[int(rng.integers(0, 3))]
    extents = {"saline": (0.10, 0.09, 0.14), "gauze": (0.11, 0.10, 0.12),
               "syringe": (0.10, 0.08, 0.12)}[sku]
    bands = [(-0.75, -0.46), (-0.04, 0.12), (0.54, 0.75)]
    weights = np.array([b[1] - b[0] for b in bands])
    band = bands[int(rng.choice(len(bands), p=weights / weights.sum()))]
    dy = float(rng.uniform(*band))
    board = shelf.board_heights[1]
    from .scene import Item

    item = Item(sku=sku, box_extents=extents,
                pose=shelf.pose @ Transform.from_xyz_yaw(-0.10, dy, board + extents[2] / 2),
                deformable=False)
    scene.items.insert(0, item)
    world = World(scene, noise, camera=CameraModel.scaled(*spec.camera),
                  base_start=(3.0, 3.0, 0.0))
    sv = Services(world)
    item_idx = 0

    world.robot.base_pose = sv.shelf_dock(sku)
    depth, inst = world.render_view()
    dets = [d for d in detect_objects(world, inst) if d.sku == sku]
    if not dets:
        return TrialResult(False, world.sim_time(), 0, "not-found")
    out = shelf.pose.R[:, 0]
    cam_pose = world.camera_pose()
    try:
        pose = suction_pipeline(
            depth, dets[0].mask, world.camera, window=sv.config.suction_window,
            k=sv.config.suction_k, cam_pose=cam_pose,
            prefer_normal_cam=cam_pose.R.T @ out,
        )
    except Exception:
        return TrialResult(False, world.sim_time(), 0, "degenerate-pose")

    field = sv.manipulation_field(item.pose.t[:2], exclude_item_indices={item_idx})
    target = suction_target_pose(pose.contact_world, pose.approach_world)
    try:
        traj = plan_reach_goal(
            world.chain, world.robot.arm_config, target, field,
            base=world.base_transform(), margin=sv.config.plan_margin,
            seed=spec.seed * 1013, budget_iters=sv.config.plan_budget_iters,
        )
    except PlanningError as exc:
        return TrialResult(False, world.sim_time(), 0, exc.tag)
    execute_with_feedback(world, traj)

    tip = world.ee_pose()
    _, dist, normal = world.item_box(item_idx).closest_point(tip.t)
    angle = math.degrees(math.acos(float(np.clip(tip.R[:, 0] @ (-normal), -1.0, 1.0))))
    ok = dist <= spec.suction_pos_tol and angle <= spec.suction_angle_tol
    return TrialResult(ok, world.sim_time() + traj.planning_time, 0,
                       "" if ok else "pose-tolerance",
                       {"surface_dist": round(float(dist), 4), "angle": round(angle, 2)})


def _task_config(spec: TrialSpec) -> TaskConfig:
    return TaskConfig(
        enable_nav_correction=spec.recovery,
        enable_plan_recovery=spec.recovery,
        enable_rescan=spec.recovery,
    )


def _run_jobs(spec: TrialSpec, jobs) -> TrialResult:
    world = _load_world(spec)
    runner = MissionRunner(world, Services(world, _task_config(spec)))
    for kind, sku in jobs:
        runner.queue.submit(kind, sku)
    runner.run_until_idle(max_bt_ticks=30000)
    states = [j.state for j in runner.queue.jobs]
    ok = all(s == "done" for s in states)
    tags = [j.failure_tag for j in runner.queue.jobs if j.failure_tag]
    fail_events = [e for e in world.events if e["kind"] in ("wrong-bin", "seal-failed", "slip")]
    tag = tags[0] if tags else (fail_events[0]["kind"] if fail_events else "job-failed")
    return TrialResult(ok, world.sim_time(), _count_recoveries(world),
                       "" if ok else tag, {"jobs": states})


def run_trial(spec: TrialSpec) -> TrialResult:
    runner = {
        "navigation": _run_navigation,
        "constrained-planning": _run_constrained_planning,
        "scene-understanding": _run_scene_understanding,
        "suction-pose": _run_suction_pose,
        "retrieval": lambda s: _run_jobs(s, [("retrieve", "saline")]),
        "restock": lambda s: _run_jobs(s, [("restock", ["saline", "gauze", "syringe"][s.seed % 3])]),
        "combined": lambda s: _run_jobs(
            s,
            [("restock", "saline"), ("restock", "gauze"), ("restock", "syringe"),
             ("restock", "saline"), ("retrieve", "saline")],
        ),
    }[spec.pipeline]
    return runner(spec)


# ---------------------------------------------------------------------------
# Suites and reports


@dataclass
class SuiteArm:
    pipeline: str
    recovery: bool = True
    label: str = ""

    def name(self) -> str:
        if self.label:
            return self.label
        return self.pipeline if self.recovery else f"{self.pipeline} (-R)"


def run_suite(arms, n_trials: int, base_seed: int = 0, spec_overrides=None) -> dict:
    """Run every arm n_trials times with consecutive seeds; returns the
    report document (deterministic, replayable from the embedded config)."""
    overrides = spec_overrides or {}
    config = {
        "arms": [{"pipeline": a.pipeline, "recovery": a.recovery, "label": a.label} for a in arms],
        "n_trials": n_trials,
        "base_seed": base_seed,
        "overrides": overrides,
    }
    rows = []
    for arm in arms:
        successes = 0
        recoveries = 0
        total_time = 0.0
        failures: dict = {}
        for i in range(n_trials):
            spec = TrialSpec(pipeline=arm.pipeline, seed=base_seed + i,
                             recovery=arm.recovery, **overrides)
            result = run_trial(spec)
            successes += result.success
            recoveries += result.recovery_triggered
            total_time += result.sim_time
            if not result.success:
                failures[result.failure_tag] = failures.get(result.failure_tag, 0) + 1
        rows.append({
            "pipeline": arm.name(),
            "tests": n_trials,
            "successes": successes,
            "avg_time_s": round(total_time / max(1, n_trials), 2),
            "recoveries": recoveries,
            "success_rate": round(successes / max(1, n_trials), 4),
            "failures": dict(sorted(failures.items())),
        })
    report = {
        "kind": "pipeline-performance",
        "config": config,
        "config_hash": config_hash(config),
        "seeds": list(range(base_seed, base_seed + n_trials)),
        "rows": rows,
    }
    return report


def format_report(report: dict) -> str:
    """Aligned plain-text table in the performance-summary shape."""
    headers = ["Pipeline", "# Tests", "# Successes", "Avg Time", "Recoveries", "Success Rate"]
    body = [
        [
            r["pipeline"],
            str(r["tests"]),
            str(r["successes"]),
            f"{r['avg_time_s']:.1f} s",
            str(r["recoveries"]),
            f"{100.0 * r['success_rate']:.1f}%",
        ]
        for r in report["rows"]
    ]
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
              for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    lines.append("")
    lines.append(f"config_hash: {report['config_hash']}  seeds: "
                 f"{report['seeds'][0]}..{report['seeds'][-1]}")
    return "\n".join(lines) + "\n"
