import numpy as np
import pytest

from stockbot.camera import CameraModel
from stockbot.geometry import Box, Transform
from stockbot.mapping import VoxelField, field_around


def brute_force_esdf(occupied: np.ndarray, voxel: float, d_cap: float) -> np.ndarray:
    """Independent O(n^2) nearest-occupied distance, index lattice scaled."""
    dims = occupied.shape
    out = np.full(dims, d_cap)
    occ_idx = np.argwhere(occupied)
    if occ_idx.size == 0:
        return out
    ii, jj, kk = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    all_idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    for chunk in np.array_split(np.arange(all_idx.shape[0]), max(1, all_idx.shape[0] // 4096)):
        pts = all_idx[chunk]
        d2 = ((pts[:, None, :] - occ_idx[None, :, :]) ** 2).sum(axis=-1)
        dmin = np.sqrt(d2.min(axis=1).astype(float)) * voxel
        out.reshape(-1)[chunk] = np.minimum(dmin, d_cap)
    return out


def random_field(rng, n=16, fill=0.03) -> VoxelField:
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(n, n, n))
    occ = rng.random((n, n, n)) < fill
    field.tsdf[occ] = -0.01
    field.weight[occ] = 1.0
    return field


def test_esdf_empty_is_cap():
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(8, 8, 8))
    esdf = field.compute_esdf()
    np.testing.assert_array_equal(esdf, np.full((8, 8, 8), field.d_cap))


def test_esdf_single_voxel_axis_distance():
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(9, 9, 9))
    field.tsdf[4, 4, 4] = -0.01
    field.weight[4, 4, 4] = 1.0
    esdf = field.compute_esdf()
    assert esdf[4, 4, 4] == 0.0
    assert esdf[7, 4, 4] == pytest.approx(3 * 0.02, abs=0)
    assert esdf[4, 4, 0] == pytest.approx(4 * 0.02, abs=0)


def test_esdf_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    for trial in range(4):
        field = random_field(rng, n=16, fill=0.02 + 0.02 * trial)
        esdf = field.compute_esdf()
        oracle = brute_force_esdf(field.occupied, field.voxel, field.d_cap)
        np.testing.assert_array_equal(esdf, oracle)


def test_esdf_zero_on_occupied_and_nonnegative():
    rng = np.random.default_rng(1)
    field = random_field(rng, n=20, fill=0.05)
    esdf = field.compute_esdf()
    assert np.all(esdf >= 0.0)
    assert np.all(esdf[field.occupied] == 0.0)


def test_esdf_lipschitz_and_monotonicity():
    rng = np.random.default_rng(2)
    field = random_field(rng, n=12, fill=0.05)
    esdf = field.compute_esdf().copy()
    v = field.voxel
    # 1-Lipschitz along lattice axes (voxel-pitch slack).
    for axis in range(3):
        diff = np.abs(np.diff(esdf, axis=axis))
        assert diff.max() <= v + 2 * v + 1e-12
    # Adding an occupied voxel never increases any distance.
    free = np.argwhere(~field.occupied)
    i, j, k = free[len(free) // 2]
    field.tsdf[i, j, k] = -0.01
    field.weight[i, j, k] = 1.0
    field.esdf = None
    esdf2 = field.compute_esdf()
    assert np.all(esdf2 <= esdf + 1e-12)


# ---------------------------------------------------------------------------
# TSDF integration


def test_integrate_plane_sign_flip_and_distance():
    cam = CameraModel.scaled(128, 96)
    cam_pose = Transform(
        np.column_stack([[0, -1, 0], [0, 0, -1], [1, 0, 0]]).T, np.array([0.0, 0.0, 0.5])
    )
    # Simpler: optical frame looking along +x world.
    right = np.array([0.0, -1.0, 0.0])
    fwd = np.array([1.0, 0.0, 0.0])
    down = np.cross(fwd, right)
    cam_pose = Transform(np.column_stack([right, down, fwd]), np.array([0.0, 0.0, 0.5]))

    depth = np.full((96, 128), 1.0)  # plane 1 m ahead (x = 1.0)
    field = VoxelField(origin=np.array([0.7, -0.3, 0.2]), voxel=0.02, dims=(30, 30, 30))
    field.integrate_depth(depth, cam_pose, cam)

    centers = field.voxel_centers().reshape(30, 30, 30, 3)
    observed = field.weight > 0
    assert observed.any()
    # Signed distance along the viewing axis, clamped at the truncation.
    expected = np.clip(1.0 - centers[..., 0], -field.truncation, field.truncation)
    errs = np.abs(field.tsdf[observed] - expected[observed])
    assert errs.max() < 0.02 + 1e-9  # within one voxel of the analytic distance
    # Sign flips across the surface.
    front = observed & (centers[..., 0] < 0.97)
    behind = observed & (centers[..., 0] > 1.03)
    assert np.all(field.tsdf[front] > 0)
    assert np.all(field.tsdf[behind] < 0)
    assert field.occupied.sum() > 0


def test_integrate_no_return_is_noop():
    cam = CameraModel.scaled(64, 48)
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(10, 10, 10))
    depth = np.full((48, 64), np.inf)
    field.integrate_depth(depth, Transform.identity(), cam)
    assert field.weight.sum() == 0.0
    np.testing.assert_array_equal(field.tsdf, 0.0)


def test_integrate_consistent_views_idempotent():
    cam = CameraModel.scaled(64, 48)
    right = np.array([0.0, -1.0, 0.0])
    fwd = np.array([1.0, 0.0, 0.0])
    down = np.cross(fwd, right)
    cam_pose = Transform(np.column_stack([right, down, fwd]), np.array([0.0, 0.0, 0.3]))
    depth = np.full((48, 64), 0.8)

    once = VoxelField(origin=np.array([0.5, -0.2, 0.1]), voxel=0.02, dims=(20, 20, 20))
    once.integrate_depth(depth, cam_pose, cam)
    twice = VoxelField(origin=np.array([0.5, -0.2, 0.1]), voxel=0.02, dims=(20, 20, 20))
    twice.integrate_depth(depth, cam_pose, cam)
    twice.integrate_depth(depth, cam_pose, cam)
    np.testing.assert_allclose(twice.tsdf, once.tsdf, atol=1e-6)


def test_voxel_drop_fault_skips_pixels():
    cam = CameraModel.scaled(64, 48)
    right = np.array([0.0, -1.0, 0.0])
    fwd = np.array([1.0, 0.0, 0.0])
    down = np.cross(fwd, right)
    cam_pose = Transform(np.column_stack([right, down, fwd]), np.array([0.0, 0.0, 0.3]))
    depth = np.full((48, 64), 0.8)
    rng = np.random.default_rng(0)
    full = VoxelField(origin=np.array([0.5, -0.2, 0.1]), voxel=0.02, dims=(20, 20, 20))
    full.integrate_depth(depth, cam_pose, cam)
    holey = VoxelField(origin=np.array([0.5, -0.2, 0.1]), voxel=0.02, dims=(20, 20, 20))
    holey.integrate_depth(depth, cam_pose, cam, drop_frac=0.9, rng=rng)
    assert holey.occupied.sum() < full.occupied.sum()


# ---------------------------------------------------------------------------
# Queries


def test_query_occupied_center_zero():
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(8, 8, 8))
    field.tsdf[3, 3, 3] = -0.01
    field.weight[3, 3, 3] = 1.0
    center = field.origin + (np.array([3, 3, 3]) + 0.5) * field.voxel
    d, oob = field.query_distance(center)
    assert d == 0.0 and not oob


def test_query_interpolated_midpoint():
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(8, 8, 8))
    field.esdf = np.zeros((8, 8, 8))
    field.weight[:] = 1.0
    field.esdf[2, 2, 2] = 2 * field.voxel
    field.esdf[3, 2, 2] = 4 * field.voxel
    mid = field.origin + (np.array([2.5, 2, 2]) + 0.5) * field.voxel
    d, oob = field.query_distance(mid, interpolate=True)
    assert not oob
    assert d == pytest.approx(3 * field.voxel, abs=1e-12)


def test_query_out_of_bounds_flag():
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(8, 8, 8))
    d, oob = field.query_distance(np.array([5.0, 5.0, 5.0]))
    assert oob and d == field.d_cap
    many = field.query_many(np.array([[5.0, 5.0, 5.0], [0.05, 0.05, 0.05]]))
    assert many[0] == field.d_cap


def test_field_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    field = random_field(rng, n=10)
    path = tmp_path / "field.bin"
    field.save(path)
    loaded = VoxelField.load(path)
    assert loaded.dims == field.dims
    np.testing.assert_allclose(loaded.origin, field.origin)
    np.testing.assert_allclose(loaded.tsdf, field.tsdf, atol=1e-6)
    np.testing.assert_array_equal(loaded.occupied, field.occupied)


def test_field_around_covers_extents():
    field = field_around([1.0, 2.0, 0.5], [0.4, 0.6, 0.8], voxel=0.02)
    assert field.dims == (20, 30, 40)
    np.testing.assert_allclose(field.origin, [0.8, 1.7, 0.1])


def test_integrate_boxes_prior():
    field = VoxelField(origin=np.zeros(3), voxel=0.02, dims=(10, 10, 10))
    box = Box([0.04, 0.04, 0.04], Transform(np.eye(3), [0.1, 0.1, 0.1]))
    field.integrate_boxes([box], weight=10.0)
    assert field.occupied.sum() > 0
    centers = field.voxel_centers()[field.occupied.reshape(-1)]
    from stockbot.geometry import point_box_distances

    assert point_box_distances(centers, box).max() == 0.0
