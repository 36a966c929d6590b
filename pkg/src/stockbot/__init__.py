"""Supply-room logistics robot: deterministic simulator, suction-grasp
perception, voxel mapping, constrained motion primitives, behavior-tree
orchestration, and the experiment harness that reproduces the recovery
ablations."""

from .bt import Blackboard, Status, build_fallback_subtree
from .camera import CameraModel, camera_pose, render_depth
from .geometry import Box, Transform
from .harness import SuiteArm, TrialSpec, TrialResult, format_report, run_suite, run_trial
from .kinematics import KinematicChain, default_chain, suction_target_pose
from .mapping import VoxelField, field_around
from .orchestration import JobQueue, MissionRunner, Services, TaskConfig
from .perception import (
    centerness,
    center_weighted_heatmap,
    detect_fiducials,
    detect_objects,
    estimate_normals,
    extract_suction_pose,
    normal_std_heatmap,
    suction_pipeline,
)
from .planning import (
    ExecutionResult,
    Trajectory,
    check_config,
    execute_with_feedback,
    plan_home,
    plan_place,
    plan_reach_goal,
    plan_reverse,
)
from .navigation import NavGoal, OccupancyGrid2D, execute_path, fiducial_correct, plan_path
from .scene import NoiseConfig, Scene, default_supply_room, load_scene, save_scene
from .world import World

__all__ = [
    "Blackboard", "Status", "build_fallback_subtree",
    "CameraModel", "camera_pose", "render_depth",
    "Box", "Transform",
    "SuiteArm", "TrialSpec", "TrialResult", "format_report", "run_suite", "run_trial",
    "KinematicChain", "default_chain", "suction_target_pose",
    "VoxelField", "field_around",
    "JobQueue", "MissionRunner", "Services", "TaskConfig",
    "centerness", "center_weighted_heatmap", "detect_fiducials", "detect_objects",
    "estimate_normals", "extract_suction_pose", "normal_std_heatmap", "suction_pipeline",
    "ExecutionResult", "Trajectory", "check_config", "execute_with_feedback",
    "plan_home", "plan_place", "plan_reach_goal", "plan_reverse",
    "NavGoal", "OccupancyGrid2D", "execute_path", "fiducial_correct", "plan_path",
    "NoiseConfig", "Scene", "default_supply_room", "load_scene", "save_scene",
    "World",
]
