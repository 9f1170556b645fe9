import csv

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ctrpose.diff import fd_check
from ctrpose.errors import EmptyInputError, EmptyPointsError
from ctrpose.geometry import SE3Pose, retract
from ctrpose.metrics import (
    add_metric,
    add_pose_vjp,
    auc,
    build_report,
    keypoint_errors,
    mask_iou,
    pck,
    write_curve_csv,
)


def random_pose(rng):
    rotation = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return SE3Pose(rotation, rng.normal(size=3))


def test_add_is_zero_for_identical_poses(rng):
    pose = random_pose(rng)
    assert add_metric(pose, pose, rng.normal(size=(10, 3))) == 0.0


def test_add_of_pure_translation(rng):
    gt = random_pose(rng)
    est = SE3Pose.from_translation([0.1, 0.0, 0.0]).compose(gt)
    assert add_metric(est, gt, rng.normal(size=(7, 3))) == pytest.approx(0.1, abs=1e-12)


def test_add_matches_per_point_average(rng):
    gt, est = random_pose(rng), random_pose(rng)
    points = rng.normal(size=(9, 3))
    moved = [gt.matrix @ [*p, 1.0] - est.matrix @ [*p, 1.0] for p in points]
    expected = np.mean([np.linalg.norm(d[:3]) for d in moved])
    assert add_metric(est, gt, points) == pytest.approx(expected, abs=1e-12)


def test_add_requires_points():
    with pytest.raises(EmptyPointsError):
        add_metric(SE3Pose.identity(), SE3Pose.identity(), np.zeros((0, 3)))


def test_add_pose_gradient(rng):
    gt, est = random_pose(rng), random_pose(rng)
    points = rng.normal(size=(6, 3))
    analytic = add_pose_vjp(est, gt, points)
    error = fd_check(lambda xi: add_metric(retract(est, xi), gt, points), np.zeros(6), analytic)
    assert error < 1e-6


def test_auc_extremes():
    assert auc([0.0, 0.0, 0.0], 0.1) == 100.0
    assert auc([0.2, 0.5], 0.1) == 0.0


def test_auc_step_integration():
    assert auc([0.02, 0.06], 0.1, 1000) == pytest.approx(60.0, abs=0.1)


def test_auc_rejects_empty_input():
    with pytest.raises(EmptyInputError):
        auc([], 0.1)


def test_pck_counts():
    assert pck(np.zeros(5), 50.0) == 1.0
    assert pck([10.0, 60.0], 50.0) == 0.5


def test_pck_of_uniform_errors(rng):
    assert pck(rng.uniform(0.0, 100.0, size=100_000), 50.0) == pytest.approx(0.5, abs=0.01)


def test_keypoint_errors():
    np.testing.assert_allclose(keypoint_errors([[0, 0], [3, 4]], [[0, 0], [0, 0]]), [0.0, 5.0])


def test_mask_iou():
    a = np.zeros((4, 4))
    a[:2] = 1.0
    b = np.zeros((4, 4))
    b[1:3] = 1.0
    assert mask_iou(a, b) == pytest.approx(1.0 / 3.0)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_build_report():
    report = build_report([0.01, 0.03], [1.0, 2.0, 70.0], residuals=[0.0, 10.0], s=0.1)
    assert report.mean_add == pytest.approx(0.02)
    assert report.pck_at_threshold == pytest.approx(2.0 / 3.0)
    assert report.confidence == pytest.approx([1.0, np.exp(-1.0)])
    assert set(report.to_dict()) >= {"per_frame_add", "mean_add", "auc_add", "mean_2d_err"}


def test_build_report_needs_frames():
    with pytest.raises(EmptyInputError):
        build_report([], [1.0])


def test_curve_csv(tmp_path):
    path = write_curve_csv(tmp_path / "curve.csv", [0.05], 0.1, steps=10)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 11
    assert float(rows[0]["fraction"]) == 0.0
    assert float(rows[-1]["fraction"]) == 1.0


def test_smaller_errors_never_lower_the_auc(rng):
    for _ in range(50):
        errors = rng.uniform(0.0, 0.15, size=30)
        smaller = errors * rng.uniform(0.0, 1.0, size=30)
        assert auc(smaller) >= auc(errors)


def test_add_triangle_inequality_and_relabeling(rng):
    points = rng.normal(size=(7, 3))
    for _ in range(100):
        A, B, C = random_pose(rng), random_pose(rng), random_pose(rng)
        direct = add_metric(A, C, points)
        assert direct <= add_metric(A, B, points) + add_metric(B, C, points) + 1e-12
        shuffled = points[rng.permutation(len(points))]
        assert add_metric(A, B, shuffled) == pytest.approx(add_metric(A, B, points), abs=1e-12)
