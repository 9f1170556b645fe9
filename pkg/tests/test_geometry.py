import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ctrpose.errors import BehindCameraError, InvalidPoseError, ValidationError
from ctrpose.geometry import (
    CameraIntrinsics,
    SE3Pose,
    look_at,
    pose_projection_jacobians,
    pose_vjp,
    project_point,
    project_points,
    retract,
    rotation_angle,
    se3_exp,
    se3_log,
)


def random_tangent(rng, max_angle=3.0):
    axis = rng.normal(size=3)
    omega = axis / np.linalg.norm(axis) * rng.uniform(0.0, max_angle)
    return np.concatenate([omega, rng.normal(size=3)])


def test_exp_of_zero_is_identity():
    pose = se3_exp(np.zeros(6))
    np.testing.assert_allclose(pose.matrix, np.eye(4), atol=1e-15)


def test_log_inverts_exp(rng):
    for _ in range(50):
        xi = random_tangent(rng)
        np.testing.assert_allclose(se3_log(se3_exp(xi)).as_vector(), xi, atol=1e-9)


def test_small_angle_branch_is_continuous():
    v = np.array([0.1, -0.2, 0.3])
    tiny = se3_exp(np.concatenate([[1e-10, 0.0, 0.0], v]))
    small = se3_exp(np.concatenate([[1e-6, 0.0, 0.0], v]))
    np.testing.assert_allclose(tiny.translation, small.translation, atol=1e-6)


def test_compose_with_inverse_is_identity(rng):
    pose = se3_exp(random_tangent(rng))
    np.testing.assert_allclose(pose.compose(pose.inverse()).matrix, np.eye(4), atol=1e-12)


def test_left_retraction_matches_matrix_product(rng):
    pose = se3_exp(random_tangent(rng))
    xi = random_tangent(rng, 0.5)
    np.testing.assert_allclose(retract(pose, xi).matrix, se3_exp(xi).matrix @ pose.matrix)


@pytest.mark.parametrize(
    "rotation",
    [np.diag([1.0, 1.0, 2.0]), np.diag([1.0, 1.0, -1.0]), np.full((3, 3), np.nan)],
)
def test_invalid_rotations_rejected(rotation):
    with pytest.raises(InvalidPoseError):
        SE3Pose(rotation, np.zeros(3))


def test_principal_point_projection(intrinsics):
    np.testing.assert_allclose(project_point([0.0, 0.0, 1.0], intrinsics), [31.5, 31.5])
    np.testing.assert_allclose(project_point([0.5, -0.25, 2.0], intrinsics), [47.5, 23.5])


def test_projection_behind_camera_raises(intrinsics):
    with pytest.raises(BehindCameraError):
        project_points([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], intrinsics)


def test_look_at_centers_target(intrinsics, rng):
    for _ in range(10):
        eye, target = rng.normal(size=3) * 2.0, rng.normal(size=3) * 0.1
        pose = look_at(eye, target, roll=rng.uniform(-0.3, 0.3))
        np.testing.assert_allclose(
            project_point(pose.transform_points(target), intrinsics), [31.5, 31.5], atol=1e-9
        )
        assert pose.transform_points(target)[2] == pytest.approx(np.linalg.norm(target - eye))


def test_look_at_rejects_coincident_points():
    with pytest.raises(ValidationError):
        look_at([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


def test_pose_projection_jacobian_matches_finite_differences(intrinsics, rng):
    points = rng.uniform([-0.3, -0.3, 1.0], [0.3, 0.3, 2.0], size=(5, 3))
    analytic = pose_projection_jacobians(points, intrinsics)
    h = 1e-6
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        plus = project_points(se3_exp(step).transform_points(points), intrinsics)
        minus = project_points(se3_exp(-step).transform_points(points), intrinsics)
        np.testing.assert_allclose((plus - minus) / (2 * h), analytic[:, :, k], atol=1e-5)


def test_pose_vjp_is_transposed_point_jacobian(rng):
    points = rng.normal(size=(4, 3))
    cot = rng.normal(size=(4, 3))
    h = 1e-6
    numeric = np.zeros(6)
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        plus = np.sum(cot * se3_exp(step).transform_points(points))
        minus = np.sum(cot * se3_exp(-step).transform_points(points))
        numeric[k] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(pose_vjp(points, cot), numeric, atol=1e-6)


def test_scaled_intrinsics_scale_projections(intrinsics):
    point = np.array([0.1, 0.2, 1.5])
    scaled = intrinsics.scaled(2.0)
    assert (scaled.width, scaled.height) == (128, 128)
    np.testing.assert_allclose(project_point(point, scaled), 2.0 * project_point(point, intrinsics))


def test_intrinsics_from_dict_requires_every_field():
    with pytest.raises(ValidationError):
        CameraIntrinsics.from_dict({"fx": 1.0, "fy": 1.0, "cx": 0.0, "cy": 0.0, "width": 4})


def test_rotation_angle():
    rotation = Rotation.from_rotvec([0.0, 0.0, 0.3]).as_matrix()
    assert rotation_angle(rotation) == pytest.approx(0.3)


def test_pose_dict_accepts_rotation_vectors():
    pose = SE3Pose.from_dict({"rotation": [0.0, 0.0, np.pi / 2], "translation": [1.0, 0.0, 0.0]})
    np.testing.assert_allclose(pose.transform_points([1.0, 0.0, 0.0]), [1.0, 1.0, 0.0], atol=1e-12)


def test_log_exp_round_trip_over_many_tangents():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        xi = random_tangent(rng)
        assert np.max(np.abs(se3_log(se3_exp(xi)).as_vector() - xi)) < 1e-8


def test_projection_ignores_positive_scale(intrinsics, rng):
    points = np.column_stack([rng.uniform(-0.3, 0.3, size=(20, 2)), rng.uniform(0.5, 2.0, 20)])
    base = project_points(points, intrinsics)
    for scale in (0.25, 1.0, 3.7):
        np.testing.assert_allclose(project_points(scale * points, intrinsics), base, atol=1e-12)
