"""Deterministic ground-truth simulator: owns the scene, the robot state,
every noise injector, and the append-only event log.

Exactly one owner mutates the world through step(); read-only snapshots
are cheap dicts taken at tick boundaries. All randomness flows from
NoiseConfig.seed through per-domain generator streams, so a fixed seed and
command trace replays bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, camera_pose, render_depth
from .geometry import Box, Transform, angle_between, obb_penetration, wrap_angle
from .kinematics import KinematicChain, default_chain
from .scene import NoiseConfig, Scene

DT = 0.05                   # physics tick, seconds
BT_PERIOD_TICKS = 4         # behavior tree ticks once per 4 physics ticks
SEAL_DISTANCE = 0.01        # suction seal: within 1 cm of the surface
SEAL_ANGLE = math.radians(5.0)
SEAL_RESET_DISTANCE = 0.03  # a failed deformable seal re-arms past 3 cm
ROBOT_RADIUS = 0.30
BASE_HEIGHT = 0.40
PENETRATION_TOL = 1e-3      # held-item contact resolution, 1 mm


class WorldError(Exception):
    def __init__(self, tag: str, msg: str = ""):
        super().__init__(msg or tag)
        self.tag = tag


# -- commands ---------------------------------------------------------------


@dataclass
class BaseVel:
    v: float
    w: float


@dataclass
class ArmTo:
    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)


@dataclass
class Suction:
    on: bool


@dataclass
class HeadPan:
    angle: float


@dataclass
class Idle:
    pass


@dataclass
class Gripper:
    suction_on: bool = False
    sealed: bool = False
    held_item: str | None = None


@dataclass
class RobotState:
    base_pose: np.ndarray              # (x, y, theta), true pose
    arm_config: np.ndarray
    gripper: Gripper = field(default_factory=Gripper)
    head_angle: float = 0.0


class World:
    """Single source of simulated truth plus the event log."""

    ITEM_ID_BASE = 1
    BIN_ID_BASE = 101
    STATIC_ID_BASE = 1001

    def __init__(
        self,
        scene: Scene,
        noise: NoiseConfig,
        chain: KinematicChain | None = None,
        camera: CameraModel | None = None,
        base_start=(3.0, 3.0, 0.0),
    ):
        self.scene = scene
        self.noise = noise
        self.chain = chain if chain is not None else default_chain()
        self.camera = camera if camera is not None else CameraModel()
        self.robot = RobotState(
            base_pose=np.array(base_start, dtype=float),
            arm_config=self.chain.q_home.copy(),
        )
        self.tick = 0
        self.events: list[dict] = []
        self._loc_offset = np.zeros(3)      # believed = true + offset (x, y, yaw)
        self._item_poses = [item.pose for item in scene.items]
        self._held_index: int | None = None
        self._grasp_offset: Transform | None = None
        self._seal_blocked = False
        self.faults: dict = {}

        ss = np.random.SeedSequence(noise.seed)
        kids = ss.spawn(6)
        self.rng_motion = np.random.default_rng(kids[0])
        self.rng_depth = np.random.default_rng(kids[1])
        self.rng_marker = np.random.default_rng(kids[2])
        self.rng_detector = np.random.default_rng(kids[3])
        self.rng_suction = np.random.default_rng(kids[4])
        self.rng_misc = np.random.default_rng(kids[5])

        self._static_render: list[tuple[Box, int]] = []
        for i, b in enumerate(self._non_item_boxes()):
            self._static_render.append((b, self.STATIC_ID_BASE + i))

    # -- identity helpers ---------------------------------------------------

    def _non_item_boxes(self) -> list:
        out = []
        for shelf in self.scene.shelves:
            out.extend(shelf.boxes())
        out.extend(self.scene.cart.boxes())
        out.extend(self.scene.static_meshes)
        return out

    def item_instance_id(self, index: int) -> int:
        return self.ITEM_ID_BASE + index

    def bin_instance_id(self, index: int) -> int:
        return self.BIN_ID_BASE + index

    def item_index_of_instance(self, instance_id: int) -> int | None:
        idx = instance_id - self.ITEM_ID_BASE
        if 0 <= idx < len(self.scene.items):
            return idx
        return None

    def item_pose(self, index: int) -> Transform:
        if index == self._held_index:
            return self.ee_pose() @ self._grasp_offset
        return self._item_poses[index]

    def item_box(self, index: int) -> Box:
        item = self.scene.items[index]
        return Box(np.asarray(item.box_extents) / 2.0, self.item_pose(index))

    def sim_time(self) -> float:
        return self.tick * DT

    # -- poses ---------------------------------------------------------------

    def base_transform(self) -> Transform:
        x, y, th = self.robot.base_pose
        return Transform.from_xyz_yaw(x, y, 0.0, th)

    def believed_base_pose(self) -> np.ndarray:
        pose = self.robot.base_pose + self._loc_offset
        pose = pose.copy()
        pose[2] = wrap_angle(pose[2])
        return pose

    def ee_pose(self) -> Transform:
        return self.chain.fk(self.robot.arm_config, self.base_transform())

    def camera_pose(self) -> Transform:
        return camera_pose(self.robot.base_pose, self.robot.head_angle, self.camera)

    # -- events ---------------------------------------------------------------

    def emit(self, kind: str, **data) -> None:
        rec = {"tick": self.tick, "kind": kind}
        rec.update(data)
        self.events.append(rec)

    # -- rendering -------------------------------------------------------------

    def render_view(self, exclude_item_indices=()):
        """Depth + instance images from the current camera pose."""
        boxes, ids = [], []
        for i, item in enumerate(self.scene.items):
            if i in exclude_item_indices:
                continue
            boxes.append(self.item_box(i))
            ids.append(self.item_instance_id(i))
        for i, b in enumerate(self.scene.bins()):
            for part in b.boxes():
                boxes.append(part)
                ids.append(self.bin_instance_id(i))
        for box, ident in self._static_render:
            boxes.append(box)
            ids.append(ident)
        depth, inst = render_depth(
            boxes, ids, self.camera_pose(), self.camera,
            depth_sigma=self.noise.depth_sigma, rng=self.rng_depth,
        )
        return depth, inst

    def collision_boxes(self, exclude_item_indices=()) -> list:
        out = [b for b, _ in self._static_render]
        for i, b in enumerate(self.scene.bins()):
            out.extend(b.boxes())
        for i in range(len(self.scene.items)):
            if i in exclude_item_indices or i == self._held_index:
                continue
            out.append(self.item_box(i))
        return out

    # -- stepping -----------------------------------------------------------

    def step(self, command, dt: float = DT):
        """Advance one physics tick under `command`. Deterministic per seed."""
        self.tick += 1

        if isinstance(command, BaseVel):
            self._step_base(command, dt)
        elif isinstance(command, ArmTo):
            self._step_arm(command)
        elif isinstance(command, Suction):
            self._step_suction(command)
        elif isinstance(command, HeadPan):
            self.robot.head_angle = float(np.clip(command.angle, -math.pi / 2, math.pi / 2))
        elif isinstance(command, Idle) or command is None:
            pass
        else:
            raise WorldError("bad-command", f"unknown command {command!r}")

        if self.robot.gripper.suction_on and not self.robot.gripper.sealed:
            self._try_seal()
        self._apply_faults()
        return self.robot

    def _apply_faults(self):
        slip_tick = self.faults.get("slip_at_tick")
        if slip_tick is not None and self.tick >= slip_tick and self.robot.gripper.sealed:
            self.faults["slip_at_tick"] = None
            self.robot.gripper.sealed = False
            if self._held_index is not None:
                self._item_poses[self._held_index] = self.item_pose(self._held_index)
                self._held_index = None
                self._grasp_offset = None
            self.robot.gripper.held_item = None
            self.emit("slip")

    def _step_base(self, cmd: BaseVel, dt: float):
        x, y, th = self.robot.base_pose
        v, w = cmd.v, cmd.w
        if abs(w) < 1e-9:
            nx = x + v * dt * math.cos(th)
            ny = y + v * dt * math.sin(th)
            nth = th
        else:
            R = v / w
            nth = th + w * dt
            nx = x + R * (math.sin(nth) - math.sin(th))
            ny = y - R * (math.cos(nth) - math.cos(th))
        new_pose = np.array([nx, ny, wrap_angle(nth)])
        if self._base_blocked(new_pose):
            self.emit("base-blocked")
            return
        dist = abs(v) * dt
        self.robot.base_pose = new_pose
        if dist > 0 and self.noise.localization_sigma > 0:
            sigma = self.noise.localization_sigma * math.sqrt(dist)
            self._loc_offset[0] += self.rng_motion.normal(0.0, sigma)
            self._loc_offset[1] += self.rng_motion.normal(0.0, sigma)
            self._loc_offset[2] += self.rng_motion.normal(
                0.0, self.noise.localization_sigma_yaw * math.sqrt(dist)
            )
            norm = float(np.hypot(self._loc_offset[0], self._loc_offset[1]))
            cap = self.noise.localization_cap
            if norm > cap:
                self._loc_offset[:2] *= cap / norm

    def _base_blocked(self, pose) -> bool:
        center = np.array([pose[0], pose[1]])
        for box, _ in self._static_render:
            zs = box.corners()[:, 2]
            if zs.min() > BASE_HEIGHT:
                continue
            # 2D distance from base disc to the box footprint.
            p3 = np.array([pose[0], pose[1], min(max(zs.min(), 0.05), BASE_HEIGHT)])
            _, dist, _ = box.closest_point(p3)
            local = box.pose.inverse().apply(p3)
            inside = bool(np.all(np.abs(local) <= box.half))
            if inside or dist < ROBOT_RADIUS:
                return True
        return False

    def _step_arm(self, cmd: ArmTo):
        if not self.chain.within_limits(cmd.q):
            self.emit("limit-violation", q=[float(v) for v in cmd.q])
            return
        self.robot.arm_config = cmd.q.copy()
        self._check_ground_truth_collision()

    def _check_ground_truth_collision(self):
        centers, radii = self.chain.sphere_centers(self.robot.arm_config, self.base_transform())
        exclude = set()
        if self._held_index is not None:
            exclude.add(self._held_index)
        near = self._nearest_item_surface()
        if near is not None and near[1] < 0.05:
            exclude.add(near[0])
        boxes = self.collision_boxes(exclude_item_indices=exclude)
        from .geometry import point_box_distances

        worst = 0.0
        for box in boxes:
            d = point_box_distances(centers, box)
            pen = radii - d
            worst = max(worst, float(pen.max()) if pen.size else 0.0)
        if worst > 5e-3:
            self.emit("collision", penetration=round(worst, 6))
        if self._held_index is not None:
            held_box = self.item_box(self._held_index)
            for box in boxes:
                pen = obb_penetration(held_box, box)
                if pen > PENETRATION_TOL:
                    self.emit("collision", penetration=round(float(pen), 6), held=True,
                              box=[round(float(v), 3) for v in box.center])
                    break

    def _nearest_item_surface(self, exclude_held: bool = True):
        """(item_index, distance, normal, point) of the closest item surface
        to the suction cup, or None."""
        tip = self.ee_pose().t
        best = None
        for i in range(len(self.scene.items)):
            if exclude_held and i == self._held_index:
                continue
            point, dist, normal = self.item_box(i).closest_point(tip)
            if best is None or dist < best[1]:
                best = (i, dist, normal, point)
        return best

    def _step_suction(self, cmd: Suction):
        g = self.robot.gripper
        if cmd.on and not g.suction_on:
            g.suction_on = True
            self._seal_blocked = False
            self._try_seal()
        elif not cmd.on and g.suction_on:
            g.suction_on = False
            if g.sealed and self._held_index is not None:
                # Release in place.
                self._item_poses[self._held_index] = self.item_pose(self._held_index)
                self._held_index = None
                self._grasp_offset = None
                self.emit("release")
            g.sealed = False
            g.held_item = None
            self._seal_blocked = False

    def _try_seal(self):
        near = self._nearest_item_surface()
        if near is None:
            return
        idx, dist, normal, _ = near
        if dist > SEAL_RESET_DISTANCE:
            self._seal_blocked = False
            return
        if self._seal_blocked:
            return
        approach = self.ee_pose().R[:, 0]       # tool +x
        if dist <= SEAL_DISTANCE and angle_between(approach, -normal) <= SEAL_ANGLE:
            item = self.scene.items[idx]
            if item.deformable and self.noise.suction_fail_prob_deformable > 0.0:
                if self.rng_suction.random() < self.noise.suction_fail_prob_deformable:
                    self._seal_blocked = True
                    self.emit("seal-failed", sku=item.sku, reason="deformable")
                    return
            self.robot.gripper.sealed = True
            self.emit("sealed", sku=item.sku)

    # -- attachment -----------------------------------------------------------

    def attach_item(self, sku: str):
        g = self.robot.gripper
        if not g.sealed:
            raise WorldError("no-seal", "attach requires an active seal")
        near = self._nearest_item_surface()
        if near is None or near[1] > SEAL_DISTANCE + 5e-3:
            raise WorldError("no-seal", "no item surface at the cup")
        idx = near[0]
        item = self.scene.items[idx]
        if item.sku != sku:
            self.emit("attach-mismatch", wanted=sku, actual=item.sku)
        ee = self.ee_pose()
        self._grasp_offset = ee.inverse() @ self._item_poses[idx]
        self._held_index = idx
        g.held_item = item.sku
        self.emit("attach", sku=item.sku)
        return idx

    def detach_item(self, target="auto"):
        """Release the held item. It settles into whatever bin opening lies
        under the cup, else onto the requester surface / support below.

        target "auto" resolves physically; passing a Bin asserts intent and
        only affects the emitted event when the physical bin disagrees.
        """
        g = self.robot.gripper
        if self._held_index is None:
            raise WorldError("not-holding", "detach without a held item")
        idx = self._held_index
        item = self.scene.items[idx]
        pos = self.item_pose(idx).t

        landed_bin = None
        for b in self.scene.bins():
            local = b.pose.inverse().apply(pos)
            ix, iy = b.inner
            if abs(local[0]) <= ix / 2 and abs(local[1]) <= iy / 2 and -0.05 <= local[2] <= b.depth + 0.30:
                landed_bin = b
                break

        extents = np.asarray(item.box_extents)
        if landed_bin is not None:
            local = landed_bin.pose.inverse().apply(pos)
            settle_local = np.array([local[0], local[1], extents[2] / 2])
            settle = landed_bin.pose @ Transform(np.eye(3), settle_local)
            self._item_poses[idx] = Transform(landed_bin.pose.R, settle.t)
            if landed_bin.accepts_sku == item.sku:
                self.emit("restocked", sku=item.sku, fiducial_id=landed_bin.fiducial_id)
            else:
                self.emit("wrong-bin", sku=item.sku, fiducial_id=landed_bin.fiducial_id)
        else:
            # Settle onto the highest support below (requester table, cart, floor).
            drop = Transform(self.item_pose(idx).R, np.array([pos[0], pos[1], self._support_below(pos) + extents[2] / 2]))
            self._item_poses[idx] = drop
            self.emit("placed", sku=item.sku)

        self._held_index = None
        self._grasp_offset = None
        g.held_item = None
        g.sealed = False
        g.suction_on = False
        return self._item_poses[idx]

    def _support_below(self, pos) -> float:
        best = 0.0
        for box, _ in self._static_render:
            local = box.pose.inverse().apply(np.array([pos[0], pos[1], pos[2]]))
            if abs(local[0]) <= box.half[0] and abs(local[1]) <= box.half[1]:
                top = box.pose.apply(np.array([local[0], local[1], box.half[2]]))[2]
                if top <= pos[2] + 1e-6:
                    best = max(best, float(top))
        return best

    # -- snapshots ----------------------------------------------------------

    def snapshot(self) -> dict:
        g = self.robot.gripper
        return {
            "tick": self.tick,
            "sim_time": round(self.sim_time(), 6),
            "base_pose": [round(float(v), 6) for v in self.robot.base_pose],
            "believed_base_pose": [round(float(v), 6) for v in self.believed_base_pose()],
            "arm_config": [round(float(v), 6) for v in self.robot.arm_config],
            "gripper": {"suction_on": g.suction_on, "sealed": g.sealed, "held_item": g.held_item},
            "head_angle": round(float(self.robot.head_angle), 6),
            "item_poses": [
                {"sku": it.sku, "t": [round(float(v), 6) for v in self.item_pose(i).t]}
                for i, it in enumerate(self.scene.items)
            ],
        }
