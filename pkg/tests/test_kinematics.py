import json

import numpy as np
import pytest

from ctrpose.errors import InvalidRobotError, JointLimitError, ValidationError
from ctrpose.geometry import SE3Pose, retract
from ctrpose.kinematics import (
    JointConfig,
    assemble_base_mesh,
    assemble_camera_mesh,
    box_mesh,
    camera_mesh_vjp,
    cylinder_mesh,
    fk_frames,
    frame_jacobian,
    keypoints_3d,
    load_obj,
    load_robot,
    robot_from_dict,
    save_obj,
)


def test_reference_arm_structure(arm):
    assert arm.n_dof == 3
    assert arm.n_keypoints == 7
    assert arm.n_frames == 7


def test_zero_configuration_keypoints_on_planar_arm(planar):
    np.testing.assert_allclose(
        keypoints_3d(planar, [0.0, 0.0]), [[0, 0, 0], [1, 0, 0], [2, 0, 0]], atol=1e-15
    )


def test_planar_arm_elbow_bent(planar):
    points = keypoints_3d(planar, [0.0, np.pi / 2])
    np.testing.assert_allclose(points[-1], [1.0, 1.0, 0.0], atol=1e-12)


def test_joint_config_length_checked(arm):
    with pytest.raises(ValidationError):
        fk_frames(arm, [0.0, 0.0])


def test_joint_limits_enforced(arm):
    q = arm.upper_limits + 0.1
    with pytest.raises(JointLimitError):
        keypoints_3d(arm, q)


def test_joint_config_accepted(arm):
    frames = fk_frames(arm, JointConfig(np.zeros(3)))
    assert len(frames) == arm.n_frames


def test_base_frame_is_identity(arm, rng):
    q = rng.uniform(arm.lower_limits, arm.upper_limits)
    np.testing.assert_allclose(fk_frames(arm, q)[0].matrix, np.eye(4))


def test_frame_jacobian_matches_finite_differences(arm, rng):
    q = rng.uniform(arm.lower_limits + 0.1, arm.upper_limits - 0.1)
    jac = frame_jacobian(arm, q)
    h = 1e-6
    for k in range(arm.n_dof):
        step = np.zeros(arm.n_dof)
        step[k] = h
        plus = fk_frames(arm, q + step)[arm.ee_frame].translation
        minus = fk_frames(arm, q - step)[arm.ee_frame].translation
        np.testing.assert_allclose((plus - minus) / (2 * h), jac[:3, k], atol=1e-7)


def test_camera_mesh_is_base_mesh_moved(arm, rng):
    q = rng.uniform(arm.lower_limits, arm.upper_limits)
    pose = SE3Pose.from_translation([0.0, 0.0, 1.5])
    base, cam = assemble_base_mesh(arm, q), assemble_camera_mesh(arm, q, pose)
    np.testing.assert_allclose(cam.vertices, base.vertices + [0.0, 0.0, 1.5])
    np.testing.assert_array_equal(cam.triangles, base.triangles)


def test_camera_mesh_vjp_matches_finite_differences(arm, rng):
    q = rng.uniform(arm.lower_limits, arm.upper_limits)
    pose = SE3Pose.from_translation([0.1, -0.1, 1.5])
    mesh = assemble_camera_mesh(arm, q, pose)
    cot = rng.normal(size=mesh.vertices.shape)
    numeric = np.zeros(6)
    h = 1e-6
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        plus = np.sum(cot * assemble_camera_mesh(arm, q, retract(pose, step)).vertices)
        minus = np.sum(cot * assemble_camera_mesh(arm, q, retract(pose, -step)).vertices)
        numeric[k] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(camera_mesh_vjp(mesh, cot), numeric, rtol=1e-6, atol=1e-6)


def test_primitive_meshes_are_closed():
    for mesh in (box_mesh([0, 0, 0], [1, 2, 3]), cylinder_mesh(0.5, [0.0, 1.0], "x", 8)):
        edges = {}
        for tri in mesh.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        assert set(edges.values()) == {2}


def test_obj_round_trip(tmp_path):
    mesh = box_mesh([0, 0, 0], [1, 1, 1])
    save_obj(mesh, tmp_path / "box.obj")
    loaded = load_obj(tmp_path / "box.obj")
    np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
    np.testing.assert_array_equal(loaded.triangles, mesh.triangles)


def test_robot_json_with_obj_mesh(tmp_path):
    save_obj(box_mesh([0, 0, 0], [0.1, 0.1, 0.1]), tmp_path / "link.obj")
    data = {
        "joints": [{"type": "revolute", "axis": [0, 0, 1], "limits": [-1, 1]}],
        "meshes": ["link.obj", {"primitive": "box", "min": [0, 0, 0], "max": [1, 1, 1]}],
        "keypoint_frames": [0, 1],
    }
    (tmp_path / "robot.json").write_text(json.dumps(data))
    model = load_robot(tmp_path / "robot.json")
    assert model.n_dof == 1
    assert assemble_base_mesh(model, [0.5]).n_triangles == 24


def test_invalid_robots_rejected():
    with pytest.raises(InvalidRobotError):
        robot_from_dict({"joints": [{"type": "ball"}], "keypoint_frames": [0]})
    with pytest.raises(InvalidRobotError):
        robot_from_dict({"joints": [], "keypoint_frames": [3]})
    with pytest.raises(InvalidRobotError):
        robot_from_dict({"joints": [{"axis": [0, 0, 2]}], "keypoint_frames": [0]})


def test_camera_mesh_is_equivariant_under_pose_composition(arm, rng):
    q = rng.uniform(arm.lower_limits, arm.upper_limits)
    A = retract(SE3Pose.identity(), rng.normal(size=6))
    B = retract(SE3Pose.from_translation([0.0, 0.0, 1.5]), 0.3 * rng.normal(size=6))
    composed = assemble_camera_mesh(arm, q, A.compose(B))
    moved = assemble_camera_mesh(arm, q, B).transformed(A)
    np.testing.assert_allclose(composed.vertices, moved.vertices, atol=1e-12)
    np.testing.assert_allclose(
        A.compose(B).transform_points(keypoints_3d(arm, q)),
        A.transform_points(B.transform_points(keypoints_3d(arm, q))),
        atol=1e-12,
    )


def test_links_stay_rigid_under_kinematics(arm, rng):
    q = rng.uniform(arm.lower_limits, arm.upper_limits)
    pose = retract(SE3Pose.from_translation([0.1, -0.2, 1.4]), rng.normal(size=6))
    frames = fk_frames(arm, q)
    for i, mesh in enumerate(arm.link_meshes):
        if mesh is None:
            continue
        placed = pose.compose(frames[i]).transform_points(mesh.vertices)
        before = np.linalg.norm(mesh.vertices[:, None] - mesh.vertices[None], axis=-1)
        after = np.linalg.norm(placed[:, None] - placed[None], axis=-1)
        assert np.max(np.abs(after - before)) < 1e-9
