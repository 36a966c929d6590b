import json
import math

import numpy as np
import pytest

from stockbot.camera import CameraModel
from stockbot.geometry import Box, Transform, ray_box_hits
from stockbot.kinematics import suction_target_pose
from stockbot.scene import NoiseConfig, default_supply_room, load_scene, save_scene
from stockbot.world import ArmTo, BaseVel, HeadPan, Idle, Suction, World, WorldError


def make_world(seed=0, noise=None, base=(3.0, 3.0, 0.0), cam=(160, 120)):
    scene, nc = default_supply_room(noise if noise is not None else NoiseConfig.zero(seed=seed))
    return World(scene, nc, camera=CameraModel.scaled(*cam), base_start=base)


# ---------------------------------------------------------------------------
# Stepping


def test_base_advance_along_heading():
    world = make_world()
    world.step(BaseVel(0.1, 0.0), dt=1.0)
    np.testing.assert_allclose(world.robot.base_pose, [3.1, 3.0, 0.0], atol=1e-12)


def test_theta_stays_wrapped():
    world = make_world()
    for _ in range(300):
        world.step(BaseVel(0.0, 0.9))
        assert -math.pi < world.robot.base_pose[2] <= math.pi


def test_joint_limit_violation_rejected():
    world = make_world()
    q_bad = world.chain.limits_hi + 0.5
    before = world.robot.arm_config.copy()
    world.step(ArmTo(q_bad))
    np.testing.assert_array_equal(world.robot.arm_config, before)
    assert any(e["kind"] == "limit-violation" for e in world.events)


def test_base_blocked_by_wall():
    world = make_world(base=(0.45, 2.5, math.pi))
    for _ in range(200):
        world.step(BaseVel(0.3, 0.0))
    assert world.robot.base_pose[0] > 0.25  # wall at x=0 plus the base radius
    assert any(e["kind"] == "base-blocked" for e in world.events)


def test_determinism_same_seed_same_trace():
    def run():
        world = make_world(noise=NoiseConfig(seed=7))
        for i in range(120):
            world.step(BaseVel(0.2, 0.1 if i % 3 else -0.05))
        world.render_view()
        for i in range(40):
            world.step(Idle())
        return world.snapshot(), world.events

    snap1, ev1 = run()
    snap2, ev2 = run()
    assert json.dumps(snap1, sort_keys=True) == json.dumps(snap2, sort_keys=True)
    assert json.dumps(ev1, sort_keys=True, default=str) == json.dumps(ev2, sort_keys=True, default=str)


def test_localization_offset_grows_and_caps():
    world = make_world(noise=NoiseConfig(seed=3))
    for _ in range(4000):
        world.step(BaseVel(0.3, 0.0))
        if world._base_blocked(world.robot.base_pose):
            break
        if abs(world.robot.base_pose[0] - 5.0) < 0.3:
            world.robot.base_pose[2] = math.pi  # turn around, keep driving
    offset = world.believed_base_pose()[:2] - world.robot.base_pose[:2]
    assert np.linalg.norm(offset) <= world.noise.localization_cap + 1e-9


# ---------------------------------------------------------------------------
# Suction seal rules


def _drive_cup_to(world, sku, offset):
    """IK the cup to the item's front face center plus an offset along the
    outward normal, pointing inward."""
    scene = world.scene
    item = scene.item_by_sku(sku)
    out = scene.shelves[0].pose.R[:, 0]
    face = item.pose.t + out * (item.box_extents[0] / 2)
    target = suction_target_pose(face + out * offset, -out)
    q = world.chain.ik(target, base=world.base_transform(), mode="axis",
                       rng=np.random.default_rng(0))
    world.step(ArmTo(q))
    return item


def test_seal_requires_1cm():
    world = make_world(base=(4.60, 2.55, 0.0))
    _drive_cup_to(world, "saline", 0.05)
    world.step(Suction(True))
    assert not world.robot.gripper.sealed  # 5 cm away: no seal
    _drive_cup_to(world, "saline", 0.005)
    world.step(Idle())
    assert world.robot.gripper.sealed


def test_seal_requires_angle():
    world = make_world(base=(4.60, 2.55, 0.0))
    scene = world.scene
    item = scene.item_by_sku("saline")
    out = scene.shelves[0].pose.R[:, 0]
    face = item.pose.t + out * (item.box_extents[0] / 2)
    skew = Transform(
        suction_target_pose(face + out * 0.005, -out).R
        @ np.array(
            [
                [math.cos(0.3), 0, math.sin(0.3)],
                [0, 1, 0],
                [-math.sin(0.3), 0, math.cos(0.3)],
            ]
        ),
        face + out * 0.005,
    )
    q = world.chain.ik(skew, base=world.base_transform(), mode="full",
                       rng=np.random.default_rng(1))
    world.step(ArmTo(q))
    world.step(Suction(True))
    assert not world.robot.gripper.sealed  # 17 deg off the normal


def test_deformable_seal_failure_and_rearm():
    scene, nc = default_supply_room(NoiseConfig.zero(seed=5))
    nc.suction_fail_prob_deformable = 1.0
    world = World(scene, nc, camera=CameraModel.scaled(160, 120), base_start=(4.60, 1.95, 0.0))
    _drive_cup_to(world, "gauze", 0.005)
    world.step(Suction(True))
    assert not world.robot.gripper.sealed
    assert any(e["kind"] == "seal-failed" for e in world.events)
    # Blocked until the cup retreats past the re-arm distance.
    world.step(Idle())
    assert sum(1 for e in world.events if e["kind"] == "seal-failed") == 1


# ---------------------------------------------------------------------------
# Attachment


def _sealed_world():
    world = make_world(base=(4.60, 2.55, 0.0))
    item = _drive_cup_to(world, "saline", 0.005)
    world.step(Suction(True))
    assert world.robot.gripper.sealed
    return world, item


def test_attach_rigid_follow():
    world, item = _sealed_world()
    idx = world.attach_item("saline")
    before = world.item_pose(idx).t.copy()
    q = world.robot.arm_config.copy()
    delta = (world.chain.limits_hi[0] - q[0]) if q[0] < 0.25 else -0.10
    q[0] += delta
    world.step(ArmTo(q))
    after = world.item_pose(idx).t
    assert after[2] - before[2] == pytest.approx(delta, abs=1e-9)


def test_attach_without_seal_errors():
    world = make_world()
    with pytest.raises(WorldError) as err:
        world.attach_item("saline")
    assert err.value.tag == "no-seal"


def test_detach_into_correct_bin():
    world, item = _sealed_world()
    idx = world.attach_item("saline")
    b = world.scene.bin_for_sku("saline")
    # Teleport the arm's cup over the bin (kinematic shortcut for the test).
    world.robot.base_pose = np.array([b.pose.t[0] - 0.77, b.pose.t[1], 0.0])
    target = suction_target_pose(
        [b.pose.t[0], b.pose.t[1], b.opening_height() + 0.12], [0, 0, -1.0]
    )
    q = world.chain.ik(target, base=world.base_transform(), mode="axis",
                       rng=np.random.default_rng(2))
    world.robot.arm_config = q  # place without collision events
    world.detach_item()
    assert any(e["kind"] == "restocked" for e in world.events)
    assert world.robot.gripper.held_item is None
    local = b.pose.inverse().apply(world.item_pose(idx).t)
    assert abs(local[0]) <= b.inner[0] / 2 and abs(local[1]) <= b.inner[1] / 2


def test_detach_over_wrong_bin_emits_event():
    world, item = _sealed_world()
    idx = world.attach_item("saline")
    b = world.scene.bin_for_sku("gauze")
    world.robot.base_pose = np.array([b.pose.t[0] - 0.77, b.pose.t[1], 0.0])
    target = suction_target_pose(
        [b.pose.t[0], b.pose.t[1], b.opening_height() + 0.12], [0, 0, -1.0]
    )
    q = world.chain.ik(target, base=world.base_transform(), mode="axis",
                       rng=np.random.default_rng(2))
    world.robot.arm_config = q
    world.detach_item()
    assert any(e["kind"] == "wrong-bin" for e in world.events)


def test_slip_fault_clears_hold():
    world, item = _sealed_world()
    world.attach_item("saline")
    world.faults["slip_at_tick"] = world.tick + 1
    world.step(Idle())
    assert not world.robot.gripper.sealed
    assert world.robot.gripper.held_item is None
    assert any(e["kind"] == "slip" for e in world.events)


# ---------------------------------------------------------------------------
# Rendering


def test_render_empty_scene_no_return():
    scene, nc = default_supply_room(NoiseConfig.zero(seed=0), extra_shelf_items=False)
    scene.items.clear()
    scene.shelves.clear()
    scene.static_meshes.clear()
    scene.cart.items = []
    world = World(scene, nc, camera=CameraModel.scaled(64, 48), base_start=(3.0, 3.0, 0.0))
    world._static_render = [(b, 1001 + i) for i, b in enumerate(world._non_item_boxes())]
    depth, inst = world.render_view()
    # Only the cart remains; point away from it.
    world.robot.base_pose = np.array([3.0, 3.0, math.pi / 2])
    depth, inst = world.render_view()
    assert np.isinf(depth).all() or (inst[np.isfinite(depth)] != 0).all()


def test_render_projected_area_matches_pinhole_oracle():
    # One 0.2 m box face-on at 1 m: projected pixel count equals the
    # analytic pinhole area within one pixel per edge.
    scene, nc = default_supply_room(NoiseConfig.zero(seed=0), extra_shelf_items=False)
    scene.items.clear()
    cam = CameraModel.scaled(160, 120)
    world = World(scene, nc, camera=cam, base_start=(3.0, 3.0, 0.0))
    cam_pose = world.camera_pose()
    center = cam_pose.apply(np.array([0.0, 0.0, 1.0]))
    box = Box([0.1, 0.1, 0.005], Transform(cam_pose.R, center))
    depth, inst = world.render_view()
    from stockbot.camera import render_depth

    depth, inst = render_depth([box], [7], cam_pose, cam)
    count = int((inst == 7).sum())
    w_px = 0.2 * cam.fx / 1.0
    h_px = 0.2 * cam.fy / 1.0
    expected = w_px * h_px
    tolerance = 2 * (w_px + h_px) + 4
    assert abs(count - expected) <= tolerance


def test_render_depth_matches_ray_box_distance():
    world = make_world(base=(4.55, 2.0, 0.0))
    depth, inst = world.render_view()
    cam_pose = world.camera_pose()
    rays_cam = world.camera.pixel_rays().reshape(-1, 3)
    dirs = cam_pose.rotate(rays_cam)
    item_idx = 0
    mask = (inst == world.item_instance_id(item_idx)).reshape(-1)
    if not mask.any():
        pytest.skip("item not visible from this dock")
    t, hit = ray_box_hits(cam_pose.t, dirs[mask], world.item_box(item_idx))
    np.testing.assert_allclose(depth.reshape(-1)[mask], t, atol=1e-9)


def test_depth_noise_applied():
    scene, nc = default_supply_room(NoiseConfig.zero(seed=1))
    nc.depth_sigma = 0.002
    world = World(scene, nc, camera=CameraModel.scaled(160, 120), base_start=(4.55, 2.0, 0.0))
    d1, _ = world.render_view()
    scene2, nc2 = default_supply_room(NoiseConfig.zero(seed=1))
    world2 = World(scene2, nc2, camera=CameraModel.scaled(160, 120), base_start=(4.55, 2.0, 0.0))
    d2, _ = world2.render_view()
    valid = np.isfinite(d1) & np.isfinite(d2)
    resid = (d1 - d2)[valid]
    assert 0.0005 < resid.std() < 0.004


# ---------------------------------------------------------------------------
# Scene files


def test_scene_roundtrip(tmp_path):
    scene, nc = default_supply_room(NoiseConfig(seed=9))
    path = tmp_path / "scene.json"
    save_scene(path, scene, nc, robot={"base_start": [3.0, 3.0, 0.0]})
    scene2, nc2, robot = load_scene(path)
    assert robot["base_start"] == [3.0, 3.0, 0.0]
    assert nc2 == nc
    assert scene2.catalog() == scene.catalog()
    assert len(scene2.items) == len(scene.items)
    np.testing.assert_allclose(scene2.items[0].pose.t, scene.items[0].pose.t)
    assert [b.fiducial_id for b in scene2.bins()] == [b.fiducial_id for b in scene.bins()]


def test_scene_rejects_duplicate_fiducials():
    from stockbot.scene import SceneError

    scene, nc = default_supply_room(NoiseConfig.zero(seed=0))
    scene.shelves[0].bins[1].fiducial_id = scene.shelves[0].bins[0].fiducial_id
    with pytest.raises(SceneError):
        from stockbot.scene import Scene

        Scene(
            shelves=scene.shelves,
            cart=scene.cart,
            items=scene.items,
            static_meshes=scene.static_meshes,
            requester_pose=scene.requester_pose,
        )
