"""Motion primitives over the voxel map: free-space planning to a
pre-grasp pose, linearly constrained approach, reverse retreat, homing and
placing, plus execution with gripper-feedback preemption.

Planning is a pure function of (chain, start, goal, field snapshot, seed).
Every returned trajectory is self-certified: re-validated densely against
the same distance field before it leaves the planner, so downstream
executors can trust waypoint interpolation at any resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Transform
from .kinematics import KinematicChain, KinematicsError
from .mapping import VoxelField
from .world import ArmTo, World

ITER_SECONDS = 5e-4          # one planner iteration charges 0.5 ms of sim compute
PLAN_BUDGET_S = 2.0          # per-primitive budget before giving up
DEFAULT_MARGIN = 0.02
PRE_GRASP_RETREAT = 0.08
LINEAR_STEP = 0.005          # Cartesian resolution of constrained segments
LINEAR_DEVIATION_MAX = 0.005
JOINT_STEP_CAP = 0.15        # per-joint per-waypoint delta cap (rad or m)


class PlanningError(Exception):
    def __init__(self, tag: str, msg: str = ""):
        super().__init__(msg or tag)
        self.tag = tag


@dataclass
class Segment:
    kind: str                # free | linear | reverse
    start: int               # waypoint index range [start, end)
    end: int
    check_attached: bool = True


@dataclass
class Trajectory:
    waypoints: np.ndarray    # (N, dof)
    segments: list
    margin: float = DEFAULT_MARGIN
    attached: list | None = None     # [(center_tool, radius)] or None
    plan_iters: int = 0

    @property
    def planning_time(self) -> float:
        return min(self.plan_iters * ITER_SECONDS, PLAN_BUDGET_S)

    def __len__(self):
        return len(self.waypoints)

    def truncated(self, n_executed: int) -> "Trajectory":
        """The first n_executed waypoints (what actually ran before a
        preemption), with segment ranges clipped accordingly."""
        n = max(1, min(n_executed, len(self.waypoints)))
        segs = []
        for seg in self.segments:
            if seg.start >= n:
                continue
            segs.append(Segment(seg.kind, seg.start, min(seg.end, n), seg.check_attached))
        return Trajectory(self.waypoints[:n].copy(), segs, self.margin, self.attached, self.plan_iters)

    def reversed_copy(self) -> "Trajectory":
        n = len(self.waypoints)
        segs = []
        for seg in reversed(self.segments):
            segs.append(
                Segment(
                    kind="reverse" if seg.kind == "free" else seg.kind,
                    start=n - seg.end,
                    end=n - seg.start,
                    check_attached=seg.check_attached,
                )
            )
        return Trajectory(
            waypoints=self.waypoints[::-1].copy(),
            segments=segs,
            margin=self.margin,
            attached=self.attached,
        )


@dataclass
class ExecutionResult:
    status: str              # completed | preempted-success | preempted-anomaly | failed
    fraction: float
    events: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Collision checking


class SphereChecker:
    """Link (and optionally attached-object) spheres against the ESDF."""

    def __init__(self, chain: KinematicChain, field: VoxelField, base: Transform,
                 margin: float = DEFAULT_MARGIN, attached=None):
        self.chain = chain
        self.field = field
        self.base = base
        self.margin = margin
        self.attached = attached or []
        self._levers = _joint_levers(chain, self.attached)

    def config_valid(self, q, include_attached: bool = True) -> bool:
        return bool(self.batch_valid(np.asarray(q, dtype=float)[None, :], include_attached)[0])

    def batch_valid(self, qs: np.ndarray, include_attached: bool = True) -> np.ndarray:
        return self.batch_clearance(qs, include_attached) >= self.margin

    def batch_clearance(self, qs: np.ndarray, include_attached: bool = True) -> np.ndarray:
        """Min over spheres of (distance - radius) per config."""
        qs = np.asarray(qs, dtype=float)
        centers, radii = self.chain.sphere_centers_batch(qs, self.base)
        N, S, _ = centers.shape
        dists = self.field.query_many(centers.reshape(-1, 3)).reshape(N, S)
        clear = (dists - radii[None, :]).min(axis=1)
        if include_attached and self.attached:
            pos, R = self.chain.fk_tool_batch(qs, self.base)
            for c, r in self.attached:
                pts = pos + np.einsum("nij,j->ni", R, np.asarray(c, dtype=float))
                d = self.field.query_many(pts)
                clear = np.minimum(clear, d - r)
        return clear

    def edge_configs(self, qa, qb, stride: float = 0.01) -> np.ndarray:
        """Interpolated configs so no sphere moves more than `stride` between
        consecutive samples (conservative joint-lever bound)."""
        qa = np.asarray(qa, dtype=float)
        qb = np.asarray(qb, dtype=float)
        travel = float(np.abs(qb - qa) @ self._levers)
        n = max(2, int(math.ceil(travel / stride)) + 1)
        alphas = np.linspace(0.0, 1.0, n)
        return qa[None, :] + alphas[:, None] * (qb - qa)[None, :]

    def edge_valid(self, qa, qb, include_attached: bool = True) -> bool:
        return bool(np.all(self.batch_valid(self.edge_configs(qa, qb), include_attached)))

    def densify(self, waypoints: np.ndarray, resolution: float = 1e-3) -> np.ndarray:
        """Interpolate a waypoint list at a fixed per-joint resolution."""
        out = [waypoints[:1]]
        for a, b in zip(waypoints[:-1], waypoints[1:]):
            steps = int(np.ceil(np.abs(b - a).max() / resolution))
            if steps <= 1:
                out.append(b[None, :])
                continue
            alphas = np.linspace(0.0, 1.0, steps + 1)[1:]
            out.append(a[None, :] + alphas[:, None] * (b - a)[None, :])
        return np.vstack(out)

    def certify(self, traj: Trajectory, resolution: float = 1e-3) -> bool:
        """Densified full-trajectory validation, honoring per-segment
        attached-object exemptions."""
        for seg in traj.segments:
            pts = traj.waypoints[seg.start : seg.end]
            if len(pts) < 1:
                continue
            dense = self.densify(pts, resolution) if len(pts) > 1 else pts
            clear = self.batch_clearance(dense, include_attached=seg.check_attached)
            if not np.all(clear >= 0.0):
                return False
        return True


def _joint_levers(chain: KinematicChain, attached) -> np.ndarray:
    """Upper bound on Cartesian sphere motion per unit joint motion."""
    dof = chain.dof
    sphere_extent = 0.0
    for spheres in chain.link_spheres:
        for c, r in spheres:
            sphere_extent = max(sphere_extent, float(np.linalg.norm(c)) + r)
    tool_extent = float(np.linalg.norm(chain.tool.t))
    for c, r in attached or []:
        sphere_extent = max(sphere_extent, tool_extent + float(np.linalg.norm(c)) + r)
    levers = np.zeros(dof)
    for i, joint in enumerate(chain.joints):
        if joint.kind == "prismatic":
            levers[i] = 1.0
        else:
            reach = sphere_extent + tool_extent
            for j in range(i + 1, dof):
                reach += float(np.linalg.norm(chain.joints[j].origin.t))
            levers[i] = reach
    return levers


def check_config(chain: KinematicChain, q, field: VoxelField, margin: float = DEFAULT_MARGIN,
                 attached=None, base: Transform | None = None) -> bool:
    """True iff every link (and attached) sphere keeps radius + margin
    clearance in the field. Raises PlanningError("limits") out of limits."""
    if not chain.within_limits(q):
        raise PlanningError("limits", "configuration outside joint limits")
    checker = SphereChecker(chain, field, base or Transform.identity(), margin, attached)
    return checker.config_valid(q)


# ---------------------------------------------------------------------------
# Sampling-tree planner


class _Budget:
    def __init__(self, iters: int):
        self.left = iters
        self.used = 0

    def spend(self, n: int = 1) -> bool:
        self.left -= n
        self.used += n
        return self.left > 0


def _rrt_connect(checker: SphereChecker, q_start, goals, rng, budget: _Budget,
                 step: float = 0.35, goal_parents=None):
    """Bidirectional tree search in joint space. Returns a waypoint list
    from q_start to a goal-tree root, or None on budget exhaustion.

    `goals` may form a pre-built chain via `goal_parents` (used to seed the
    reverse planner with the known-safe executed corridor)."""
    chain = checker.chain
    lo, hi = chain.limits_lo, chain.limits_hi

    trees = [
        {"nodes": [np.asarray(q_start, dtype=float)], "parent": [-1]},
        {"nodes": [np.asarray(g, dtype=float) for g in goals],
         "parent": list(goal_parents) if goal_parents is not None else [-1] * len(goals)},
    ]

    def nearest(tree, q):
        nodes = np.array(tree["nodes"])
        d = np.linalg.norm(nodes - q[None, :], axis=1)
        return int(np.argmin(d))

    def extend(tree, q_target):
        i = nearest(tree, q_target)
        q_near = tree["nodes"][i]
        delta = q_target - q_near
        dist = float(np.linalg.norm(delta))
        # Full step first, then a quarter step: tight pockets need small
        # moves before the tree can stride.
        for trial_step in (step, step * 0.25):
            q_new = q_target if dist <= trial_step else q_near + delta * (trial_step / dist)
            if checker.edge_valid(q_near, q_new):
                tree["nodes"].append(q_new)
                tree["parent"].append(i)
                return len(tree["nodes"]) - 1
            if dist <= trial_step:
                break
        return None

    def path_from(tree, idx):
        out = []
        while idx >= 0:
            out.append(tree["nodes"][idx])
            idx = tree["parent"][idx]
        return out[::-1]

    a, b = 0, 1
    while budget.spend():
        q_rand = lo + (hi - lo) * rng.random(chain.dof)
        new_idx = extend(trees[a], q_rand)
        if new_idx is not None:
            q_new = trees[a]["nodes"][new_idx]
            # Greedily connect the other tree.
            while True:
                if not budget.spend():
                    return None
                other_idx = extend(trees[b], q_new)
                if other_idx is None:
                    break
                if np.linalg.norm(trees[b]["nodes"][other_idx] - q_new) < 1e-9:
                    pa = path_from(trees[a], new_idx)
                    pb = path_from(trees[b], other_idx)
                    if a == 0:
                        return pa + pb[::-1][1:]
                    return pb + pa[::-1][1:]
        a, b = b, a
    return None


def _shortcut(checker: SphereChecker, path, rng, budget: _Budget, attempts: int = 40):
    path = [np.asarray(p, dtype=float) for p in path]
    for _ in range(attempts):
        if len(path) < 3 or not budget.spend():
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        if checker.edge_valid(path[i], path[j]):
            path = path[: i + 1] + path[j:]
    return path


def _clearance_refine(checker: SphereChecker, path, budget: _Budget, passes: int = 2,
                      step: float = 0.02, target: float = 0.06):
    """Nudge interior waypoints along the numeric clearance gradient."""
    path = [np.asarray(p, dtype=float) for p in path]
    dof = checker.chain.dof
    for _ in range(passes):
        for k in range(1, len(path) - 1):
            if not budget.spend():
                return path
            q = path[k]
            base_clear = float(checker.batch_clearance(q[None, :])[0])
            if base_clear >= target:
                continue
            probes = np.repeat(q[None, :], dof, axis=0)
            eps = 1e-3
            probes += np.eye(dof) * eps
            grads = (checker.batch_clearance(probes) - base_clear) / eps
            norm = float(np.linalg.norm(grads))
            if norm < 1e-9:
                continue
            q_new = checker.chain.clamp(q + grads / norm * step)
            if (
                float(checker.batch_clearance(q_new[None, :])[0]) > base_clear
                and checker.edge_valid(path[k - 1], q_new)
                and checker.edge_valid(q_new, path[k + 1])
            ):
                path[k] = q_new
    return path


def _cap_steps(path) -> np.ndarray:
    """Resample so consecutive waypoints differ at most JOINT_STEP_CAP per joint."""
    out = [np.asarray(path[0], dtype=float)]
    for target in path[1:]:
        target = np.asarray(target, dtype=float)
        while True:
            delta = target - out[-1]
            steps = float(np.abs(delta).max()) / JOINT_STEP_CAP
            if steps <= 1.0:
                out.append(target)
                break
            out.append(out[-1] + delta / math.ceil(steps))
    return np.array(out)


def _linear_descent(chain, checker, q_from, target: Transform, rng, budget,
                    ik_mode: str = "axis"):
    """Resolved-rate straight-line Cartesian move of the tool point.

    Returns the waypoint array (excluding q_from) or raises
    PlanningError("linear-blocked")."""
    start_pose = chain.fk(q_from, checker.base)
    p0, p1 = start_pose.t, target.t
    dist = float(np.linalg.norm(p1 - p0))
    n_steps = max(1, int(math.ceil(dist / LINEAR_STEP)))
    qs = [np.asarray(q_from, dtype=float)]
    for s in range(1, n_steps + 1):
        if not budget.spend():
            raise PlanningError("no-path", "budget exhausted in linear segment")
        alpha = s / n_steps
        p_t = p0 + alpha * (p1 - p0)
        pose_t = Transform(target.R, p_t)
        try:
            q_next = chain.ik(
                pose_t, base=checker.base, q_seed=qs[-1], mode=ik_mode,
                restarts=1, iters=40, rng=rng,
            )
        except KinematicsError:
            raise PlanningError("linear-blocked", "IK lost the line") from None
        if np.abs(q_next - qs[-1]).max() > 0.4:
            raise PlanningError("linear-blocked", "joint jump on the line")
        qs.append(q_next)

    waypoints = np.array(qs)
    # Certify Cartesian straightness densely.
    dense = checker.densify(waypoints)
    pos, _ = chain.fk_tool_batch(dense, checker.base)
    dev = _point_line_deviation(pos, p0, p1)
    if float(dev.max()) > LINEAR_DEVIATION_MAX:
        raise PlanningError("linear-blocked", f"deviation {dev.max():.4f} m")
    clear = checker.batch_clearance(dense, include_attached=False)
    if not np.all(clear >= 0.0):
        raise PlanningError("linear-blocked", "collision on the line")
    return waypoints[1:]


def _point_line_deviation(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a[None, :], axis=1)
    t = np.clip((points - a[None, :]) @ ab / denom, 0.0, 1.0)
    proj = a[None, :] + t[:, None] * ab[None, :]
    return np.linalg.norm(points - proj, axis=1)


# ---------------------------------------------------------------------------
# Primitives


def _plan_pose_with_linear(
    chain: KinematicChain,
    q_start,
    final_pose: Transform,
    approach_dir: np.ndarray,
    approach_len: float,
    field: VoxelField,
    base: Transform | None,
    margin: float,
    seed: int,
    attached,
    budget_iters: int | None,
    ik_mode: str,
) -> Trajectory:
    """Free plan to an offset pose, then a linearly constrained move along
    `approach_dir` to `final_pose`. Shared core of reach-goal and place."""
    base = base or Transform.identity()
    rng = np.random.default_rng(seed)
    budget = _Budget(budget_iters if budget_iters is not None else int(PLAN_BUDGET_S / ITER_SECONDS))
    checker = SphereChecker(chain, field, base, margin, attached)

    q_start = np.asarray(q_start, dtype=float)
    if not chain.within_limits(q_start):
        raise PlanningError("limits", "start configuration outside limits")
    if not checker.config_valid(q_start):
        raise PlanningError("no-path", "start configuration in collision")

    approach_dir = np.asarray(approach_dir, dtype=float)
    approach_dir = approach_dir / np.linalg.norm(approach_dir)
    pre_pose = Transform(final_pose.R, final_pose.t - approach_dir * approach_len)

    # Collect pre-pose IK branches and keep only those whose constrained
    # final move validates; the tree then only targets workable branches.
    goals = []
    any_ik = False
    last_linear_err: PlanningError | None = None
    lo, hi = chain.limits_lo, chain.limits_hi
    for attempt in range(12):
        if not budget.spend(25):
            break
        try:
            # Attempt 0 continues from the current posture (natural branch);
            # later attempts seed from random configs for basin diversity
            # (ik() returns its first converging seed, so diversity must be
            # injected here).
            seed_q = q_start if attempt == 0 else lo + (hi - lo) * rng.random(chain.dof)
            q_goal = chain.ik(pre_pose, base=base, mode=ik_mode, restarts=4,
                              q_seed=seed_q, rng=rng)
        except KinematicsError:
            continue
        any_ik = True
        if not checker.config_valid(q_goal):
            continue
        if any(np.linalg.norm(q_goal - g) < 1e-3 for g, _ in goals):
            continue
        try:
            wps = _linear_descent(chain, checker, q_goal, final_pose, rng, budget, ik_mode)
        except PlanningError as exc:
            last_linear_err = exc
            continue
        goals.append((q_goal, wps))
        if len(goals) >= 3:
            break
    if not goals:
        if any_ik and last_linear_err is not None:
            raise last_linear_err
        raise PlanningError("no-ik", "pre pose unreachable")

    goals.sort(key=lambda g: float(np.linalg.norm(g[0] - q_start)))
    path = _rrt_connect(checker, q_start, [g for g, _ in goals], rng, budget)
    if path is None:
        raise PlanningError("no-path", "tree search exhausted its budget")
    reached = path[-1]
    linear_wps = min(goals, key=lambda g: float(np.linalg.norm(g[0] - reached)))[1]
    path = _shortcut(checker, path, rng, budget)
    path = _clearance_refine(checker, path, budget)
    free_wps = _cap_steps(path)

    waypoints = np.vstack([free_wps, linear_wps]) if len(linear_wps) else free_wps
    segments = [
        Segment("free", 0, len(free_wps), check_attached=True),
        Segment("linear", len(free_wps) - 1, len(waypoints), check_attached=False),
    ]
    traj = Trajectory(waypoints=waypoints, segments=segments, margin=margin,
                      attached=attached, plan_iters=budget.used)
    if not checker.certify(traj):
        raise PlanningError("no-path", "densified certification failed")
    return traj


def plan_reach_goal(
    chain: KinematicChain,
    q_start,
    grasp_pose: Transform,
    field: VoxelField,
    base: Transform | None = None,
    margin: float = DEFAULT_MARGIN,
    seed: int = 0,
    attached=None,
    budget_iters: int | None = None,
    pre_grasp_retreat: float = PRE_GRASP_RETREAT,
    ik_mode: str = "axis",
) -> Trajectory:
    """Free path to the pre-grasp pose (retracted along the approach axis),
    then a linearly constrained descent to the grasp pose.

    Raises PlanningError with tag "no-ik", "no-path" or "linear-blocked".
    """
    return _plan_pose_with_linear(
        chain, q_start, grasp_pose, grasp_pose.R[:, 0], pre_grasp_retreat,
        field, base, margin, seed, attached, budget_iters, ik_mode,
    )


def plan_home(chain: KinematicChain, q_start, field: VoxelField, base=None,
              margin: float = DEFAULT_MARGIN, seed: int = 0, attached=None,
              q_home=None, budget_iters=None) -> Trajectory:
    """Free plan back to the named home configuration."""
    base = base or Transform.identity()
    q_home = np.asarray(q_home if q_home is not None else chain.q_home, dtype=float)
    q_start = np.asarray(q_start, dtype=float)
    if np.abs(q_home - q_start).max() < 1e-9:
        return Trajectory(waypoints=q_start[None, :], segments=[Segment("free", 0, 1)],
                          margin=margin, attached=attached)
    rng = np.random.default_rng(seed)
    budget = _Budget(budget_iters if budget_iters is not None else int(PLAN_BUDGET_S / ITER_SECONDS))
    checker = SphereChecker(chain, field, base, margin, attached)
    if not checker.config_valid(q_start):
        raise PlanningError("no-path", "start configuration in collision")
    if not checker.config_valid(q_home):
        raise PlanningError("no-path", "home configuration in collision")
    path = _rrt_connect(checker, q_start, [q_home], rng, budget)
    if path is None:
        raise PlanningError("no-path", "tree search exhausted its budget")
    path = _shortcut(checker, path, rng, budget)
    path = _clearance_refine(checker, path, budget)
    traj = Trajectory(waypoints=_cap_steps(path), segments=[], margin=margin,
                      attached=attached, plan_iters=budget.used)
    traj.segments = [Segment("free", 0, len(traj.waypoints), check_attached=True)]
    if not checker.certify(traj):
        raise PlanningError("no-path", "densified certification failed")
    return traj


def plan_place(chain: KinematicChain, q_start, place_pose: Transform, field: VoxelField,
               base=None, margin: float = DEFAULT_MARGIN, seed: int = 0, attached=None,
               descent: float = 0.12, budget_iters=None) -> Trajectory:
    """Reach a pre-place pose above the target, then descend vertically.

    `place_pose` is the final tool pose; its orientation is whatever the
    grasp dictated (the held item descends into the bin regardless of how
    it is held), so the linear segment direction is world -z, not the tool
    axis.
    """
    return _plan_pose_with_linear(
        chain, q_start, place_pose, np.array([0.0, 0.0, -1.0]), descent,
        field, base, margin, seed, attached, budget_iters, ik_mode="axis",
    )


def plan_reverse(chain: KinematicChain, executed: Trajectory, attached, field: VoxelField,
                 base=None, margin: float = DEFAULT_MARGIN, seed: int = 0,
                 budget_iters=None, extract_lift: float = 0.05) -> Trajectory:
    """Retrace an executed trajectory with the picked object attached.

    The mirrored path is re-validated with the enlarged collision set; if
    the object swells the set past feasibility, the item is first pulled
    straight out along the reversed approach corridor (arm-only contact
    zone), then a fresh attachment-aware plan returns to the original
    start.
    """
    if len(executed.waypoints) == 0:
        raise PlanningError("no-path", "nothing executed to reverse")
    base = base or Transform.identity()
    rev = executed.reversed_copy()
    rev.attached = attached
    checker = SphereChecker(chain, field, base, margin, attached)
    if checker.certify(rev):
        return rev

    rng = np.random.default_rng(seed)
    budget = _Budget(budget_iters if budget_iters is not None else int(PLAN_BUDGET_S / ITER_SECONDS))
    q_now = executed.waypoints[-1]
    q_target = executed.waypoints[0]

    # Contact zone: replay the executed linear approach backwards (feasible
    # by construction), arm-only checked.
    contact_wps = [q_now[None, :]]
    lin = [s for s in executed.segments if s.kind == "linear"]
    if lin:
        seg = lin[-1]
        retreat = executed.waypoints[seg.start : seg.end][::-1]
        if len(retreat) > 1:
            contact_wps.append(retreat[1:])
    contact = np.vstack(contact_wps)
    q_free_start = contact[-1]

    if not checker.config_valid(q_free_start):
        # Still too close to the support surface: lift straight up a little
        # (arm-only contact zone) before free planning.
        ee_pre = chain.fk(q_free_start, base)
        lift_pose = Transform(ee_pre.R, ee_pre.t + np.array([0.0, 0.0, extract_lift]))
        try:
            wps = _linear_descent(chain, checker, q_free_start, lift_pose, rng, budget)
        except PlanningError as exc:
            raise PlanningError("no-path", f"extraction blocked: {exc}") from None
        if len(wps):
            contact = np.vstack([contact, wps])
            q_free_start = contact[-1]
        if not checker.config_valid(q_free_start):
            raise PlanningError("no-path", "extraction did not clear the collision set")

    # Pull the object out along the reversed horizontal approach while it
    # stays clear (best effort): sampling trees starve in the shelf tunnel,
    # so leave it deterministically before free planning.
    if lin:
        seg = lin[-1]
        p_in = chain.fk(executed.waypoints[seg.start], base).t
        p_out = chain.fk(executed.waypoints[seg.end - 1], base).t
        horiz = p_in - p_out
        horiz[2] = 0.0
        norm = float(np.linalg.norm(horiz))
        if norm > 1e-6:
            horiz /= norm
            ee_cur = chain.fk(q_free_start, base)
            q_prev = q_free_start
            pulled = []
            for s in range(1, int(0.12 / LINEAR_STEP) + 1):
                if not budget.spend():
                    break
                pt = ee_cur.t + horiz * (s * LINEAR_STEP)
                try:
                    q_next = chain.ik(Transform(ee_cur.R, pt), base=base, q_seed=q_prev,
                                      mode="axis", restarts=1, iters=40, rng=rng)
                except KinematicsError:
                    break
                if np.abs(q_next - q_prev).max() > 0.4:
                    break
                if checker.batch_clearance(q_next[None, :])[0] < 0.0:
                    break
                pulled.append(q_next)
                q_prev = q_next
            if pulled:
                contact = np.vstack([contact, np.array(pulled)])
                q_free_start = contact[-1]

    # Seed the goal tree with the longest attachment-valid prefix of the
    # executed free path: the mirrored corridor is known-safe for the arm
    # and usually mostly valid for the carried object too.
    goal_nodes = [q_target]
    goal_parents = [-1]
    free_segs = [s for s in executed.segments if s.kind == "free"]
    if free_segs:
        seg = free_segs[0]
        wps_free = executed.waypoints[seg.start : seg.end]
        for i in range(1, len(wps_free)):
            if not budget.spend(2):
                break
            if not checker.config_valid(wps_free[i]) or not checker.edge_valid(
                wps_free[i - 1], wps_free[i]
            ):
                break
            goal_nodes.append(wps_free[i])
            goal_parents.append(len(goal_nodes) - 2)

    path = _rrt_connect(checker, q_free_start, goal_nodes, rng, budget,
                        goal_parents=goal_parents)
    if path is None:
        raise PlanningError("no-path", "attachment-aware replan failed")
    path = _shortcut(checker, path, rng, budget)
    path = _clearance_refine(checker, path, budget)
    free_wps = _cap_steps(path)

    waypoints = np.vstack([contact, free_wps[1:]]) if len(free_wps) > 1 else contact
    segments = [
        Segment("linear", 0, len(contact), check_attached=False),
        Segment("reverse", len(contact) - 1, len(waypoints), check_attached=True),
    ]
    traj = Trajectory(waypoints=waypoints, segments=segments, margin=margin,
                      attached=attached, plan_iters=budget.used)
    if not checker.certify(traj):
        raise PlanningError("no-path", "reverse certification failed")
    return traj


# ---------------------------------------------------------------------------
# Execution


def execute_with_feedback(world: World, traj: Trajectory, preempt_on_seal: bool = False,
                          watch_slip: bool = True) -> ExecutionResult:
    """Drive the arm one waypoint per sim tick, watching the gripper.

    Seal while approaching -> stop, preempted-success. Seal lost while
    holding -> stop, preempted-anomaly. Otherwise completed.
    """
    events = []
    total = len(traj.waypoints)
    if total == 0:
        return ExecutionResult(status="completed", fraction=1.0, events=events)
    holding_at_start = world.robot.gripper.sealed
    for i, q in enumerate(traj.waypoints):
        world.step(ArmTo(q))
        g = world.robot.gripper
        if preempt_on_seal and not holding_at_start and g.sealed:
            events.append({"kind": "preempt-seal", "waypoint": i})
            return ExecutionResult(status="preempted-success", fraction=(i + 1) / total, events=events)
        if watch_slip and holding_at_start and not g.sealed:
            events.append({"kind": "preempt-slip", "waypoint": i})
            return ExecutionResult(status="preempted-anomaly", fraction=(i + 1) / total, events=events)
    return ExecutionResult(status="completed", fraction=1.0, events=events)
