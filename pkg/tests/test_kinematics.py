import math

import numpy as np
import pytest

from stockbot.geometry import Transform, rotation_angle_between, rotation_log
from stockbot.kinematics import KinematicsError, chain_from_dict, chain_to_dict, default_chain, suction_target_pose


CHAIN = default_chain()


def random_configs(rng, n):
    lo, hi = CHAIN.limits_lo, CHAIN.limits_hi
    return lo + (hi - lo) * rng.random((n, CHAIN.dof))


def test_zero_config_matches_home_pose_chain():
    # FK of the zero config equals the chain's declared frame stack-up.
    T = CHAIN.fk(np.zeros(CHAIN.dof))
    expected_t = np.zeros(3)
    for j in CHAIN.joints:
        expected_t = expected_t + j.origin.t
    expected_t = expected_t + CHAIN.tool.t
    np.testing.assert_allclose(T.t, expected_t, atol=1e-12)
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)


def test_batch_fk_matches_single():
    rng = np.random.default_rng(0)
    base = Transform.from_xyz_yaw(1.0, -0.5, 0.0, 0.7)
    qs = random_configs(rng, 16)
    pos, rot = CHAIN.fk_tool_batch(qs, base)
    for i, q in enumerate(qs):
        T = CHAIN.fk(q, base)
        np.testing.assert_allclose(pos[i], T.t, atol=1e-12)
        np.testing.assert_allclose(rot[i], T.R, atol=1e-12)


def test_batch_spheres_match_single():
    rng = np.random.default_rng(1)
    base = Transform.from_xyz_yaw(0.2, 0.1, 0.0, -0.4)
    qs = random_configs(rng, 8)
    centers, radii = CHAIN.sphere_centers_batch(qs, base)
    for i, q in enumerate(qs):
        c, r = CHAIN.sphere_centers(q, base)
        np.testing.assert_allclose(centers[i], c, atol=1e-12)
        np.testing.assert_array_equal(radii, r)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    base = Transform.from_xyz_yaw(0.0, 0.0, 0.0, 0.3)
    eps = 1e-7
    for q in random_configs(rng, 5):
        J = CHAIN.jacobian(q, base)
        T0 = CHAIN.fk(q, base)
        for i in range(CHAIN.dof):
            qp = q.copy()
            qp[i] += eps
            Tp = CHAIN.fk(qp, base)
            np.testing.assert_allclose(J[:3, i], (Tp.t - T0.t) / eps, atol=1e-5)
            np.testing.assert_allclose(
                J[3:, i], rotation_log(Tp.R @ T0.R.T) / eps, atol=1e-5
            )


def test_ik_fk_roundtrip_full_pose():
    # Poses sampled from FK of random configs are reachable by construction;
    # the round trip must land within 1 mm / 1 degree.
    rng = np.random.default_rng(3)
    base = Transform.from_xyz_yaw(0.5, 0.2, 0.0, 0.1)
    solved = 0
    for q_true in random_configs(rng, 12):
        target = CHAIN.fk(q_true, base)
        try:
            q = CHAIN.ik(target, base=base, mode="full", rng=rng)
        except KinematicsError:
            continue
        solved += 1
        T = CHAIN.fk(q, base)
        assert np.linalg.norm(T.t - target.t) < 1e-3
        assert rotation_angle_between(T.R, target.R) < math.radians(1.0)
    assert solved >= 8


def test_ik_axis_mode_aligns_tool_axis():
    rng = np.random.default_rng(4)
    base = Transform.identity()
    target = suction_target_pose([0.7, 0.1, 0.8], [1.0, 0.0, 0.0])
    q = CHAIN.ik(target, base=base, mode="axis", rng=rng)
    T = CHAIN.fk(q, base)
    assert np.linalg.norm(T.t - target.t) < 1e-3
    angle = math.degrees(math.acos(np.clip(T.R[:, 0] @ target.R[:, 0], -1, 1)))
    assert angle < 1.0


def test_ik_respects_limits():
    rng = np.random.default_rng(5)
    target = suction_target_pose([0.75, 0.1, 0.85], [1.0, 0.0, 0.0])
    q = CHAIN.ik(target, mode="axis", rng=rng)
    assert CHAIN.within_limits(q)


def test_ik_unreachable_raises():
    rng = np.random.default_rng(6)
    target = suction_target_pose([5.0, 0.0, 0.9], [1.0, 0.0, 0.0])
    with pytest.raises(KinematicsError) as err:
        CHAIN.ik(target, mode="axis", restarts=4, iters=40, rng=rng)
    assert err.value.tag == "no-ik"


def test_chain_serialization_roundtrip():
    doc = chain_to_dict(CHAIN)
    chain2 = chain_from_dict(doc)
    rng = np.random.default_rng(7)
    for q in random_configs(rng, 4):
        a = CHAIN.fk(q)
        b = chain2.fk(q)
        assert a.almost_equal(b, tol_t=1e-12, tol_r=1e-12)
    assert chain2.dof == CHAIN.dof


def test_chain_requires_prismatic():
    from stockbot.kinematics import Joint, KinematicChain

    joints = [
        Joint("r1", "revolute", [0, 0, 1], Transform.identity(), (-1, 1)),
    ]
    with pytest.raises(ValueError):
        KinematicChain(joints=joints, link_spheres=[[(np.zeros(3), 0.1)]])
