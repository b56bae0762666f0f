import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ormllm.errors import BehindCameraError, ConfigurationError, DomainError
from ormllm.geometry import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    back_project_pixel,
    project_point,
    reconstruct_point_cloud,
)

UNIT_K = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
IDENTITY = CameraPose.identity()


def random_pose(rng) -> CameraPose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return CameraPose(rot, rng.normal(size=3) * 3.0)


def test_principal_ray():
    np.testing.assert_allclose(
        back_project_pixel(0, 0, 2.0, UNIT_K, IDENTITY), [0.0, 0.0, 2.0]
    )


def test_hand_case_unit_intrinsics():
    # ((2-0)/1*3, (1-0)/1*3, 3)
    np.testing.assert_allclose(
        back_project_pixel(2, 1, 3.0, UNIT_K, IDENTITY), [6.0, 3.0, 3.0]
    )


def test_hand_case_offset_intrinsics_and_translation():
    K = CameraIntrinsics(fx=2.0, fy=2.0, cx=1.0, cy=1.0)
    pose = CameraPose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    # ((3-1)/2*4+1, (1-1)/2*4, 4)
    np.testing.assert_allclose(
        back_project_pixel(3, 1, 4.0, K, pose), [5.0, 0.0, 4.0]
    )


def test_nonpositive_depth_rejected():
    with pytest.raises(DomainError):
        back_project_pixel(0, 0, 0.0, UNIT_K, IDENTITY)
    with pytest.raises(DomainError):
        back_project_pixel(0, 0, -1.0, UNIT_K, IDENTITY)


def test_project_principal_point():
    assert project_point(np.array([0.0, 0.0, 2.0]), UNIT_K, IDENTITY) == (0.0, 0.0, 2.0)


def test_behind_camera_error():
    with pytest.raises(BehindCameraError):
        project_point(np.array([0.0, 0.0, -1.0]), UNIT_K, IDENTITY)


def test_round_trip_random_cameras():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        pose = random_pose(rng)
        K = CameraIntrinsics(
            fx=rng.uniform(0.5, 100.0),
            fy=rng.uniform(0.5, 100.0),
            cx=rng.uniform(-20, 20),
            cy=rng.uniform(-20, 20),
        )
        u, v = rng.uniform(-50, 50, size=2)
        d = rng.uniform(0.1, 20.0)
        p = back_project_pixel(u, v, d, K, pose)
        u2, v2, d2 = project_point(p, K, pose)
        assert abs(u2 - u) < 1e-9 and abs(v2 - v) < 1e-9 and abs(d2 - d) < 1e-9


@settings(max_examples=50, deadline=None)
@given(
    u=st.floats(-30, 30),
    v=st.floats(-30, 30),
    d=st.floats(0.1, 20.0),
    seed=st.integers(0, 10_000),
)
def test_round_trip_property(u, v, d, seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    K = CameraIntrinsics(fx=rng.uniform(0.5, 50), fy=rng.uniform(0.5, 50),
                         cx=rng.uniform(-5, 5), cy=rng.uniform(-5, 5))
    u2, v2, d2 = project_point(back_project_pixel(u, v, d, K, pose), K, pose)
    assert abs(u2 - u) < 1e-9 and abs(v2 - v) < 1e-9 and abs(d2 - d) < 1e-9


def test_world_frame_consistency():
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    for _ in range(100):
        u, v = rng.uniform(-10, 10, size=2)
        d = rng.uniform(0.1, 20.0)
        p_world = back_project_pixel(u, v, d, UNIT_K, pose)
        p_cam = pose.rotation.T @ (p_world - pose.translation)
        p_identity = back_project_pixel(u, v, d, UNIT_K, IDENTITY)
        np.testing.assert_allclose(p_cam, p_identity, atol=1e-9)


def test_reconstruct_2x2_hand_case():
    depth = DepthMap(np.ones((2, 2)))
    cloud = reconstruct_point_cloud(depth, UNIT_K, IDENTITY)
    np.testing.assert_array_equal(
        cloud.points, [[0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]]
    )
    np.testing.assert_array_equal(
        cloud.source_pixels, [[0, 0], [1, 0], [0, 1], [1, 1]]
    )


def test_reconstruct_skips_sentinels():
    values = np.array([[1.0, 0.0], [0.0, 2.0]])
    cloud = reconstruct_point_cloud(DepthMap(values), UNIT_K, IDENTITY)
    assert len(cloud) == 2
    np.testing.assert_array_equal(cloud.source_pixels, [[0, 0], [1, 1]])


def test_all_sentinels_empty_cloud():
    cloud = reconstruct_point_cloud(DepthMap(np.zeros((3, 3))), UNIT_K, IDENTITY)
    assert len(cloud) == 0


def test_point_count_equals_valid_pixels():
    rng = np.random.default_rng(2)
    values = rng.uniform(0.0, 5.0, size=(8, 8))
    values[values < 2.0] = 0.0
    cloud = reconstruct_point_cloud(DepthMap(values), UNIT_K, IDENTITY)
    assert len(cloud) == int((values > 0).sum())


def test_invalid_rotation_rejected():
    with pytest.raises(ConfigurationError):
        CameraPose(np.eye(3) * 2.0, np.zeros(3))
    reflect = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ConfigurationError):
        CameraPose(reflect, np.zeros(3))


def test_negative_depth_map_rejected():
    with pytest.raises(DomainError):
        DepthMap(np.array([[1.0, -0.5]]))
