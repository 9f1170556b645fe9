import numpy as np
import pytest

from ctrpose.diff import fd_check
from ctrpose.errors import ShapeMismatchError, UnknownSceneError, ValidationError
from ctrpose.kinematics import assemble_camera_mesh
from ctrpose.metrics import mask_iou
from ctrpose.perception import (
    MaskProvider,
    PerceptionParams,
    corrupt_mask,
    heatmap_model_forward,
    init_params,
    load_checkpoint,
    mask_provider,
    predict_keypoints,
    perturb_centers,
    save_checkpoint,
    spatial_softmax,
    spatial_softmax_vjp,
)
from ctrpose.softrender import rasterize_hard
from ctrpose.synthgen import generate_labels


def test_uniform_heatmap_gives_image_center():
    points = spatial_softmax(np.zeros((2, 48, 64)))
    np.testing.assert_allclose(points, [[31.5, 23.5], [31.5, 23.5]], atol=1e-12)


def test_near_one_hot_heatmap():
    heat = np.zeros((1, 64, 64))
    heat[0, 20, 10] = 50.0
    np.testing.assert_allclose(spatial_softmax(heat)[0], [10.0, 20.0], atol=1e-6)


def test_gaussian_logits_recover_mean():
    rows, cols = np.mgrid[0:64, 0:64]
    heat = -0.5 * ((cols - 12.5) ** 2 + (rows - 7.25) ** 2)
    np.testing.assert_allclose(spatial_softmax(heat[None])[0], [12.5, 7.25], atol=0.05)


def test_low_temperature_converges_to_argmax(rng):
    heat = rng.normal(size=(1, 32, 32))
    heat[0, 5, 17] = 10.0
    np.testing.assert_allclose(spatial_softmax(heat, 1e-3)[0], [17.0, 5.0], atol=0.01)


def test_temperature_must_be_positive():
    with pytest.raises(ValidationError):
        spatial_softmax(np.zeros((1, 4, 4)), 0.0)


def test_spatial_softmax_vjp_matches_finite_differences(rng):
    heat = rng.normal(size=(2, 6, 7))
    cot = rng.normal(size=(2, 2))

    def f(x):
        return np.sum(cot * spatial_softmax(x.reshape(heat.shape), 0.7))

    analytic = spatial_softmax_vjp(heat, 0.7, cot)
    assert fd_check(f, heat.ravel(), analytic.ravel()) < 1e-6


def test_centers_at_labels_reproduce_labels(scenes):
    labels = np.stack([s.gt_keypoints2d for s in scenes])
    params = init_params(labels)
    for i, sample in enumerate(scenes):
        predicted = predict_keypoints(params, i).value
        assert np.max(np.abs(predicted - sample.gt_keypoints2d)) < 0.1


def test_perturbed_centers_shift_keypoints(scenes):
    labels = np.stack([s.gt_keypoints2d for s in scenes])
    params = perturb_centers(init_params(labels), 3.0, seed=5)
    shift = np.linalg.norm(predict_keypoints(params, 0).value - labels[0], axis=1)
    np.testing.assert_allclose(shift, 3.0, atol=0.1)


def test_keypoints_scale_to_image_resolution():
    params = init_params(np.array([[[40.0, 20.0]]]), heatmap_size=(32, 32), image_width=64)
    np.testing.assert_allclose(params.centers[0, 0], [20.0, 10.0])
    np.testing.assert_allclose(
        predict_keypoints(params, 0, image_width=64).value[0], [40.0, 20.0], atol=1e-3
    )


def test_keypoint_pullback_matches_finite_differences(rng):
    params = PerceptionParams(
        rng.uniform(10, 20, size=(1, 3, 2)), np.log(rng.uniform(0.5, 1.5, size=(1, 3))), []
    )
    cot = rng.normal(size=(3, 2))
    grads = predict_keypoints(params, 0, temperature=0.8).pullback(cot)

    def f_centers(x):
        moved = params.replace(centers=x.reshape(params.centers.shape))
        return np.sum(cot * predict_keypoints(moved, 0, temperature=0.8).value)

    def f_sharpness(x):
        moved = params.replace(log_sharpness=x.reshape(params.log_sharpness.shape))
        return np.sum(cot * predict_keypoints(moved, 0, temperature=0.8).value)

    assert fd_check(f_centers, params.centers.ravel(), grads["centers"].ravel()) < 1e-4
    log_s = params.log_sharpness.ravel()
    assert fd_check(f_sharpness, log_s, grads["log_sharpness"].ravel()) < 1e-4


def test_unknown_scene():
    params = init_params(np.zeros((2, 3, 2)))
    with pytest.raises(UnknownSceneError):
        heatmap_model_forward(params, 2)


def test_params_shape_validation():
    with pytest.raises(ShapeMismatchError):
        PerceptionParams(np.zeros((2, 3)), np.zeros((2,)), [])
    with pytest.raises(ShapeMismatchError):
        PerceptionParams(np.zeros((1, 3, 2)), np.zeros((1, 3)), np.zeros((1, 8, 8)))


@pytest.fixture(scope="module")
def oracle_masks(arm, scenes):
    return np.stack([generate_labels(s, arm)[1] for s in scenes])


def test_oracle_mode_matches_hard_rasterizer(arm, intrinsics, scenes, oracle_masks):
    provider = MaskProvider(oracle_masks)
    for i, sample in enumerate(scenes):
        hard = rasterize_hard(assemble_camera_mesh(arm, sample.q, sample.gt_pose), intrinsics)
        assert mask_iou(mask_provider(provider, i, "oracle"), hard) > 0.9


def test_corrupted_masks_stay_close_to_oracle(oracle_masks):
    provider = MaskProvider(oracle_masks, radius=1, flip_rate=0.01, seed=3)
    for i in range(provider.n_scenes):
        iou = mask_iou(provider.mask(i, "corrupted"), oracle_masks[i])
        assert 0.85 <= iou <= 0.99


def test_corruption_is_seeded(oracle_masks):
    a = corrupt_mask(oracle_masks[0], seed=4)
    np.testing.assert_array_equal(a, corrupt_mask(oracle_masks[0], seed=4))
    assert not np.array_equal(a, corrupt_mask(oracle_masks[0], seed=5))


def test_full_image_mask_has_no_boundary_to_corrupt():
    full = np.ones((16, 16))
    np.testing.assert_array_equal(corrupt_mask(full, radius=2, flip_rate=0.0), full)
    flipped = corrupt_mask(full, radius=2, flip_rate=0.5, seed=1)
    assert flipped.shape == full.shape and 0 < flipped.sum() < full.size


def test_trainable_mode_starts_from_corrupted(oracle_masks):
    provider = MaskProvider(oracle_masks, seed=2)
    params = init_params(np.zeros((len(oracle_masks), 3, 2)), mask_logits=provider.initial_logits())
    for i in range(provider.n_scenes):
        np.testing.assert_allclose(
            provider.mask(i, "trainable", params), provider.corrupted(i), atol=1e-6
        )


def test_mask_mode_errors(oracle_masks):
    provider = MaskProvider(oracle_masks)
    with pytest.raises(ValidationError):
        provider.mask(0, "perfect")
    with pytest.raises(UnknownSceneError):
        provider.mask(len(oracle_masks), "oracle")
    with pytest.raises(UnknownSceneError):
        provider.mask(0, "trainable", init_params(np.zeros((1, 3, 2))))


def test_checkpoint_round_trip(tmp_path, rng):
    params = PerceptionParams(
        rng.uniform(0, 64, size=(3, 4, 2)),
        rng.normal(size=(3, 4)),
        rng.normal(size=(3, 64, 64)),
    )
    path = save_checkpoint(params, tmp_path / "ckpt", extra={"dataset": "data"})
    loaded = load_checkpoint(path.parent)
    np.testing.assert_allclose(loaded.centers, params.centers)
    np.testing.assert_allclose(loaded.log_sharpness, params.log_sharpness)
    np.testing.assert_allclose(loaded.mask_logits, params.mask_logits)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "nowhere")


def test_spatial_softmax_shifts_with_the_heatmap():
    rows, cols = np.mgrid[0:64, 0:64]
    bump = 20.0 * np.exp(-((cols - 20.3) ** 2 + (rows - 25.7) ** 2) / (2 * 1.5**2))
    before = spatial_softmax(bump[None])[0]
    for du, dv in ((5, -3), (-7, 9), (12, 0)):
        shifted = np.roll(np.roll(bump, dv, axis=0), du, axis=1)
        after = spatial_softmax(shifted[None])[0]
        np.testing.assert_allclose(after - before, [du, dv], atol=0.05)
