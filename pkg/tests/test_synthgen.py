import numpy as np
import pytest
from scipy.stats import kstest

from ctrpose.errors import SamplingExhaustedError, ValidationError
from ctrpose.geometry import Z_MIN, project_points
from ctrpose.kinematics import assemble_camera_mesh, keypoints_3d
from ctrpose.softrender import RenderConfig
from ctrpose.synthgen import (
    RandomizationRanges,
    SceneDataset,
    generate_labels,
    generate_samples,
    sample_scene,
    scene_seed,
)


def test_sampling_is_deterministic(arm, intrinsics):
    a = sample_scene(arm, intrinsics, 42)
    b = sample_scene(arm, intrinsics, 42)
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.gt_pose.matrix, b.gt_pose.matrix)
    np.testing.assert_array_equal(a.gt_keypoints2d, b.gt_keypoints2d)


def test_samples_respect_limits_and_frustum(arm, intrinsics, scenes):
    for sample in scenes:
        assert np.all(sample.q >= arm.lower_limits) and np.all(sample.q <= arm.upper_limits)
        depth = assemble_camera_mesh(arm, sample.q, sample.gt_pose).vertices[:, 2]
        assert np.all(depth > Z_MIN)
        px = sample.gt_keypoints2d
        assert np.all((px >= 0) & (px <= intrinsics.width - 1))


def test_labels_are_projections(arm, scenes):
    sample = scenes[0]
    keypoints, mask = generate_labels(sample, arm)
    expected = project_points(
        sample.gt_pose.transform_points(keypoints_3d(arm, sample.q)), sample.intrinsics
    )
    np.testing.assert_allclose(keypoints, expected)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert mask.sum() > 0


def test_generation_independent_of_threads(arm, intrinsics):
    serial = generate_samples(arm, intrinsics, 3, master_seed=5)
    threaded = generate_samples(arm, intrinsics, 3, master_seed=5, threads=3)
    for a, b in zip(serial, threaded):
        assert a.index == b.index
        np.testing.assert_array_equal(a.q, b.q)


def test_scene_seeds_differ():
    assert len({scene_seed(0, i) for i in range(50)}) == 50


def test_impossible_ranges_exhaust(arm, intrinsics):
    ranges = RandomizationRanges(distance=(0.05, 0.05), max_tries=3)
    with pytest.raises(SamplingExhaustedError):
        sample_scene(arm, intrinsics, 0, ranges)


def test_invalid_ranges(arm):
    with pytest.raises(ValidationError):
        RandomizationRanges(distance=(2.0, 1.0))
    with pytest.raises(ValidationError):
        RandomizationRanges(joint_lower=tuple(arm.lower_limits - 1.0)).joint_bounds(arm)


def test_dataset_round_trip(tmp_path, arm, intrinsics):
    samples = generate_samples(arm, intrinsics, 2, master_seed=3)
    dataset = SceneDataset(arm, "robots/arm3.json", intrinsics, samples, master_seed=3)
    dataset.save(tmp_path / "data", cache_masks=True)
    loaded = SceneDataset.load(tmp_path / "data", model=arm)
    assert len(loaded) == 2
    np.testing.assert_allclose(loaded.keypoints2d(), dataset.keypoints2d())
    np.testing.assert_array_equal(loaded.masks(), dataset.masks())
    assert loaded.render == RenderConfig()


def test_camera_distance_is_uniform_over_the_shell(arm, intrinsics):
    ranges = RandomizationRanges()
    distances = []
    for i in range(1000):
        sample = sample_scene(arm, intrinsics, scene_seed(5, i), ranges)
        camera = sample.gt_pose.inverse().translation
        distances.append(np.linalg.norm(camera - keypoints_3d(arm, sample.q).mean(axis=0)))
    lo, hi = ranges.distance
    assert kstest(distances, "uniform", args=(lo, hi - lo)).pvalue > 0.01


def test_missing_dataset(tmp_path):
    with pytest.raises(ValidationError):
        SceneDataset.load(tmp_path)
