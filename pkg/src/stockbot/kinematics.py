"""Serial-chain kinematics for the torso + arm: forward kinematics (single
and batched), geometric Jacobian, and damped-least-squares inverse
kinematics with seeded restarts.

The chain is data-driven: joints are declared with type, axis, fixed SE(3)
origin offset and limits, plus per-link collision spheres. The tool frame
hangs off the last link; its +x axis is the suction approach axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Transform, axis_angle, rotation_log, look_at_rotation

PRISMATIC = "prismatic"
REVOLUTE = "revolute"


class KinematicsError(Exception):
    def __init__(self, tag: str, msg: str = ""):
        super().__init__(msg or tag)
        self.tag = tag


@dataclass
class Joint:
    name: str
    kind: str                      # prismatic | revolute
    axis: np.ndarray               # unit vector, joint frame
    origin: Transform              # fixed offset from the parent link frame
    limits: tuple                  # (lo, hi)

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(self.axis)
        if n <= 0:
            raise ValueError(f"joint {self.name}: zero axis")
        self.axis = self.axis / n
        if self.kind not in (PRISMATIC, REVOLUTE):
            raise ValueError(f"joint {self.name}: unknown kind {self.kind}")

    def motion(self, q: float) -> Transform:
        if self.kind == PRISMATIC:
            return Transform(np.eye(3), self.axis * q)
        return Transform(axis_angle(self.axis, q), np.zeros(3))


@dataclass
class KinematicChain:
    joints: list
    link_spheres: list             # per link: list[(center_local (3,), radius)]
    tool: Transform = field(default_factory=Transform.identity)
    q_home: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not any(j.kind == PRISMATIC for j in self.joints):
            raise ValueError("chain needs at least one prismatic (torso) joint")
        if len(self.link_spheres) != len(self.joints):
            raise ValueError("link_spheres must have one entry per joint")
        for spheres in self.link_spheres:
            for _, r in spheres:
                if r <= 0:
                    raise ValueError("sphere radii must be positive")
        self.q_home = np.asarray(self.q_home, dtype=float)
        if self.q_home.size == 0:
            self.q_home = np.zeros(self.dof)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def limits_lo(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def limits_hi(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    def within_limits(self, q: np.ndarray, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.limits_lo - tol) and np.all(q <= self.limits_hi + tol))

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.limits_lo, self.limits_hi)

    # -- forward kinematics ------------------------------------------------

    def link_transforms(self, q, base: Transform | None = None) -> list:
        """World transform of every link frame (after its joint motion)."""
        q = np.asarray(q, dtype=float)
        T = base if base is not None else Transform.identity()
        out = []
        for joint, qi in zip(self.joints, q):
            T = T @ joint.origin @ joint.motion(float(qi))
            out.append(T)
        return out

    def fk(self, q, base: Transform | None = None) -> Transform:
        """Tool frame in world coordinates."""
        return self.link_transforms(q, base)[-1] @ self.tool

    def sphere_centers(self, q, base: Transform | None = None):
        """All collision sphere centers (world) and radii for one config."""
        links = self.link_transforms(q, base)
        centers, radii = [], []
        for T, spheres in zip(links, self.link_spheres):
            for c, r in spheres:
                centers.append(T.apply(c))
                radii.append(r)
        return np.array(centers), np.array(radii)

    def sphere_centers_batch(self, qs: np.ndarray, base: Transform | None = None):
        """Vectorized collision spheres for (N, dof) configs.

        Returns (centers (N, S, 3), radii (S,)).
        """
        qs = np.asarray(qs, dtype=float)
        N = qs.shape[0]
        base = base if base is not None else Transform.identity()
        R = np.broadcast_to(base.R, (N, 3, 3)).copy()
        t = np.broadcast_to(base.t, (N, 3)).copy()
        all_centers = []
        radii = []
        for i, joint in enumerate(self.joints):
            # Fixed origin offset.
            t = t + np.einsum("nij,j->ni", R, joint.origin.t)
            R = R @ joint.origin.R
            # Joint motion.
            if joint.kind == PRISMATIC:
                t = t + np.einsum("nij,j->ni", R, joint.axis) * qs[:, i : i + 1]
            else:
                R = R @ _axis_angle_batch(joint.axis, qs[:, i])
            for c, r in self.link_spheres[i]:
                all_centers.append(t + np.einsum("nij,j->ni", R, np.asarray(c, dtype=float)))
                radii.append(r)
        centers = np.stack(all_centers, axis=1) if all_centers else np.zeros((N, 0, 3))
        return centers, np.array(radii)

    def fk_tool_batch(self, qs: np.ndarray, base: Transform | None = None):
        """Vectorized tool poses for (N, dof) configs: (pos (N,3), R (N,3,3))."""
        qs = np.asarray(qs, dtype=float)
        N = qs.shape[0]
        base = base if base is not None else Transform.identity()
        R = np.broadcast_to(base.R, (N, 3, 3)).copy()
        t = np.broadcast_to(base.t, (N, 3)).copy()
        for i, joint in enumerate(self.joints):
            t = t + np.einsum("nij,j->ni", R, joint.origin.t)
            R = R @ joint.origin.R
            if joint.kind == PRISMATIC:
                t = t + np.einsum("nij,j->ni", R, joint.axis) * qs[:, i : i + 1]
            else:
                R = R @ _axis_angle_batch(joint.axis, qs[:, i])
        t = t + np.einsum("nij,j->ni", R, self.tool.t)
        R = R @ self.tool.R
        return t, R

    # -- differential kinematics --------------------------------------------

    def jacobian(self, q, base: Transform | None = None) -> np.ndarray:
        """Geometric Jacobian (6 x dof) of the tool frame: rows [v; w]."""
        q = np.asarray(q, dtype=float)
        base = base if base is not None else Transform.identity()
        T = base
        origins, axes, kinds = [], [], []
        for joint, qi in zip(self.joints, q):
            T = T @ joint.origin
            axes.append(T.rotate(joint.axis))
            origins.append(T.t.copy())
            kinds.append(joint.kind)
            T = T @ joint.motion(float(qi))
        p_tool = (T @ self.tool).t
        J = np.zeros((6, self.dof))
        for i in range(self.dof):
            if kinds[i] == PRISMATIC:
                J[:3, i] = axes[i]
            else:
                J[:3, i] = np.cross(axes[i], p_tool - origins[i])
                J[3:, i] = axes[i]
        return J

    # -- inverse kinematics --------------------------------------------------

    def ik(
        self,
        target: Transform,
        base: Transform | None = None,
        q_seed=None,
        mode: str = "full",
        restarts: int = 16,
        iters: int = 120,
        pos_tol: float = 5e-4,
        rot_tol: float = math.radians(0.5),
        rng: np.random.Generator | None = None,
        home_bias: bool | None = None,
    ):
        """Damped-least-squares IK.

        mode "full" solves the complete 6-DOF pose; mode "axis" constrains
        position plus tool +x axis only (roll free), which is what suction
        approaches need. Returns q or raises KinematicsError("no-ik").

        The null-space home pull (home_bias) prevents fold-ups when
        tracking Cartesian lines from a seed, but it collapses restart
        diversity, so by default it is active only for seeded
        single-restart solves.
        """
        if home_bias is None:
            home_bias = q_seed is not None and restarts == 1
        rng = rng if rng is not None else np.random.default_rng(0)
        lo, hi = self.limits_lo, self.limits_hi
        seeds = []
        if q_seed is not None:
            seeds.append(np.asarray(q_seed, dtype=float))
        seeds.append(self.q_home.copy())
        if restarts > 2:
            seeds.append(self.clamp(self.q_home + rng.normal(0.0, 0.5, self.dof)))
        while len(seeds) < restarts:
            seeds.append(lo + (hi - lo) * rng.random(self.dof))

        target_axis = target.R[:, 0]
        for seed in seeds[:restarts]:
            q = self.clamp(seed.astype(float).copy())
            for _ in range(iters):
                T = self.fk(q, base)
                e_pos = target.t - T.t
                if mode == "axis":
                    cur = T.R[:, 0]
                    e_rot = _axis_alignment_error(cur, target_axis)
                else:
                    e_rot = rotation_log(target.R @ T.R.T)
                if np.linalg.norm(e_pos) < pos_tol and np.linalg.norm(e_rot) < rot_tol:
                    return q
                err = np.concatenate([e_pos, e_rot])
                J = self.jacobian(q, base)
                lam = float(np.clip(np.linalg.norm(err), 0.01, 0.08))
                JJt = J @ J.T + lam * lam * np.eye(6)
                dq = J.T @ np.linalg.solve(JJt, err)
                # Null-space pull toward home keeps the redundant joint away
                # from fold/limit corners on long Cartesian moves. Only the
                # strict null space may move freely (a loose SVD cutoff would
                # leak near-singular task directions and fight convergence),
                # and the step is capped and switched off near convergence.
                if home_bias and (np.linalg.norm(e_pos) > 3e-3 or np.linalg.norm(e_rot) > 3e-2):
                    _, svals, Vt = np.linalg.svd(J)
                    cutoff = 1e-5 * float(svals[0]) if svals[0] > 0 else 0.0
                    null_rows = Vt[len(svals):, :].tolist()
                    null_rows += [Vt[i] for i in range(len(svals)) if svals[i] <= cutoff]
                    if null_rows:
                        basis = np.array(null_rows)
                        null = basis.T @ (basis @ (self.q_home - q))
                        nn = float(np.linalg.norm(null))
                        if nn > 1e-9:
                            cand = q + dq + null * (min(0.03, 0.1 * nn) / nn)
                            # A clamped null step is no longer task-neutral;
                            # apply it only when it stays inside the limits.
                            if np.all(cand >= lo) and np.all(cand <= hi):
                                dq = cand - q
                step = np.linalg.norm(dq)
                if step > 0.5:
                    dq *= 0.5 / step
                q = self.clamp(q + dq)
        raise KinematicsError("no-ik", "no inverse kinematics solution found")

    def ik_solutions(self, target: Transform, count: int = 4, rng=None, **kwargs):
        """Up to `count` distinct IK solutions (different basins), best effort."""
        rng = rng if rng is not None else np.random.default_rng(0)
        sols = []
        for k in range(count * 2):
            try:
                q = self.ik(target, rng=rng, restarts=4, **kwargs)
            except KinematicsError:
                continue
            if not any(np.linalg.norm(q - s) < 1e-3 for s in sols):
                sols.append(q)
            if len(sols) >= count:
                break
        return sols


def _axis_angle_batch(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rodrigues for a fixed axis and (N,) angles -> (N, 3, 3)."""
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    c = np.cos(angles)[:, None, None]
    s = np.sin(angles)[:, None, None]
    I = np.eye(3)[None]
    return I + s * K[None] + (1 - c) * (K @ K)[None]


def _axis_alignment_error(current: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotation vector that carries `current` onto `target` (both unit)."""
    dot = float(np.clip(np.dot(current, target), -1.0, 1.0))
    angle = math.acos(dot)
    if angle < 1e-9:
        return np.zeros(3)
    axis = np.cross(current, target)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        # Antiparallel: rotate about any perpendicular axis.
        axis = np.cross(current, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-9:
            axis = np.cross(current, np.array([0.0, 1.0, 0.0]))
        n = np.linalg.norm(axis)
    return axis / n * angle


# ---------------------------------------------------------------------------
# Default chain: prismatic torso + 6 revolute joints, Fetch-like reach.


def default_chain() -> KinematicChain:
    def T(x, y, z):
        return Transform.from_xyz_yaw(x, y, z)

    joints = [
        Joint("torso_lift", PRISMATIC, [0, 0, 1], T(0.10, 0.0, 0.45), (0.0, 0.35)),
        Joint("shoulder_pan", REVOLUTE, [0, 0, 1], T(0.12, 0.0, 0.25), (-1.60, 1.60)),
        Joint("shoulder_lift", REVOLUTE, [0, 1, 0], T(0.12, 0.0, 0.06), (-1.25, 1.52)),
        Joint("upperarm_roll", REVOLUTE, [1, 0, 0], T(0.18, 0.0, 0.0), (-3.0, 3.0)),
        Joint("elbow_flex", REVOLUTE, [0, 1, 0], T(0.22, 0.0, 0.0), (-2.25, 2.25)),
        Joint("forearm_roll", REVOLUTE, [1, 0, 0], T(0.18, 0.0, 0.0), (-3.0, 3.0)),
        Joint("wrist_flex", REVOLUTE, [0, 1, 0], T(0.16, 0.0, 0.0), (-2.18, 2.18)),
    ]
    link_spheres = [
        # torso column
        [(np.array([-0.02, 0.0, -0.15]), 0.14), (np.array([-0.02, 0.0, 0.05]), 0.13)],
        # shoulder pan housing
        [(np.array([0.06, 0.0, 0.02]), 0.08)],
        # shoulder lift / upper arm root
        [(np.array([0.09, 0.0, 0.0]), 0.065)],
        # upper arm
        [(np.array([0.07, 0.0, 0.0]), 0.06), (np.array([0.16, 0.0, 0.0]), 0.055)],
        # forearm root
        [(np.array([0.06, 0.0, 0.0]), 0.05), (np.array([0.13, 0.0, 0.0]), 0.05)],
        # wrist roll
        [(np.array([0.08, 0.0, 0.0]), 0.045)],
        # wrist flex + suction stem
        [(np.array([0.05, 0.0, 0.0]), 0.04), (np.array([0.11, 0.0, 0.0]), 0.025)],
    ]
    tool = Transform.from_xyz_yaw(0.15, 0.0, 0.0)
    q_home = np.array([0.05, 0.0, 1.52, 0.0, 2.25, 0.0, -1.2])
    return KinematicChain(joints=joints, link_spheres=link_spheres, tool=tool, q_home=q_home)


def chain_to_dict(chain: KinematicChain) -> dict:
    return {
        "joints": [
            {
                "name": j.name,
                "kind": j.kind,
                "axis": [float(v) for v in j.axis],
                "origin_t": [float(v) for v in j.origin.t],
                "origin_R": [[float(v) for v in row] for row in j.origin.R],
                "limits": [float(j.limits[0]), float(j.limits[1])],
            }
            for j in chain.joints
        ],
        "link_spheres": [
            [[[float(v) for v in c], float(r)] for c, r in spheres] for spheres in chain.link_spheres
        ],
        "tool_t": [float(v) for v in chain.tool.t],
        "tool_R": [[float(v) for v in row] for row in chain.tool.R],
        "q_home": [float(v) for v in chain.q_home],
    }


def chain_from_dict(doc: dict) -> KinematicChain:
    joints = [
        Joint(
            name=j["name"],
            kind=j["kind"],
            axis=np.array(j["axis"]),
            origin=Transform(np.array(j["origin_R"]), np.array(j["origin_t"])),
            limits=(j["limits"][0], j["limits"][1]),
        )
        for j in doc["joints"]
    ]
    spheres = [[(np.array(c), r) for c, r in entry] for entry in doc["link_spheres"]]
    return KinematicChain(
        joints=joints,
        link_spheres=spheres,
        tool=Transform(np.array(doc["tool_R"]), np.array(doc["tool_t"])),
        q_home=np.array(doc["q_home"]),
    )


def load_chain(path) -> KinematicChain:
    return chain_from_dict(json.loads(Path(path).read_text()))


def suction_target_pose(contact: np.ndarray, approach: np.ndarray) -> Transform:
    """Tool pose whose +x axis points along `approach` with the cup at
    `contact`. Roll is resolved toward world-up for repeatability."""
    R = look_at_rotation(approach)
    return Transform(R, np.asarray(contact, dtype=float))
