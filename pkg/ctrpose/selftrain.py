"""
Module: selftrain.py
Description:
    Self-supervised training of the keypoint and segmentation heads. For every scene the
    predicted keypoints go through PnP, the robot is rendered at the solved pose, and the
    mask loss is pulled back through renderer, PnP and spatial softmax onto the bump
    parameters. The rendering in turn supervises trainable masks with a reprojection-weighted
    binary cross entropy. Also hosts supervised pretraining of the bump model and
    render-and-compare pose refinement.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Batch = one scene. Scene forwards run in parallel from the epoch-start parameters; the
    optimizer then steps once per scene in scene order, so results do not depend on the
    number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from ctrpose.errors import ComputationError, DivergedError, ShapeMismatchError, ValidationError
from ctrpose.geometry import CameraIntrinsics, SE3Pose, se3_exp
from ctrpose.kinematics import RobotModel, assemble_camera_mesh, keypoints_3d
from ctrpose.metrics import add_metric
from ctrpose.perception import (
    MASK_MODES,
    MaskProvider,
    PerceptionParams,
    init_params,
    predict_keypoints,
)
from ctrpose.pnp import Correspondences, PnpResult, pnp_backward, pnp_solve
from ctrpose.softrender import RenderConfig, rasterize
from ctrpose.synthgen import SceneDataset, SceneSample

BCE_EPS = 1e-7


# === Losses ===
def _same_shape(S, M) -> tuple[np.ndarray, np.ndarray]:
    S, M = np.asarray(S, dtype=float), np.asarray(M, dtype=float)
    if S.shape != M.shape:
        raise ShapeMismatchError(f"silhouette {S.shape} and mask {M.shape} differ in shape")
    return S, M


def mask_loss(S, M) -> tuple[float, np.ndarray]:
    """sum_ij (S - M)^2 and its cotangent 2 (S - M) on S."""
    S, M = _same_shape(S, M)
    diff = S - M
    return float(np.sum(diff * diff)), 2.0 * diff


def sample_weight(residual: float, s: float) -> float:
    """w = exp(-s * O); poorly converged PnP solutions get exponentially less weight."""
    if residual < 0:
        raise ValidationError("reprojection residual must be non-negative")
    return float(np.exp(-s * residual))


def seg_loss(S, M, w: float) -> tuple[float, np.ndarray]:
    """
    Weighted BCE -(w / HW) sum [M log S + (1 - M) log(1 - S)] with the rendering S as the
    target. Returns the loss and its cotangent on M, -(w / HW) logit(S).
    """
    S, M = _same_shape(S, M)
    S = np.clip(S, BCE_EPS, 1.0 - BCE_EPS)
    scale = w / S.size
    loss = -scale * np.sum(M * np.log(S) + (1.0 - M) * np.log1p(-S))
    return float(loss), -scale * logit(S)


# === Optimizer and schedule ===
@dataclass
class Adam:
    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> Adam:
        return Adam(
            dict(self.lrs),
            self.beta1,
            self.beta2,
            self.eps,
            self.t,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    def step(self, params: dict, grads: dict, scale: float = 1.0) -> dict:
        self.t += 1
        out = {}
        for name, value in params.items():
            grad = grads.get(name)
            if grad is None or name not in self.lrs or value.size == 0:
                out[name] = value
                continue
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            out[name] = value - scale * self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by `factor` once the loss stagnates for `patience` epochs."""

    patience: int = 5
    factor: float = 0.1
    threshold: float = 1e-4
    scale: float = 1.0
    best: float = np.inf
    stale: int = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best, self.stale = loss, 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.scale *= self.factor
                self.stale = 0
        return self.scale


def clip_by_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


# === Configs and records ===
@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    seg_lr: float = 0.5
    epochs: int = 200
    grad_clip: float = 10.0
    s: float = 0.1
    seed: int = 0
    alternation: bool = False
    temperature: float = 1.0
    mask_mode: str = "corrupted"
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 5
    decay: float = 0.1
    threads: int = 1
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if not (self.lr > 0 and self.seg_lr > 0):
            raise ValidationError("learning rates must be positive")
        if not self.grad_clip > 0:
            raise ValidationError("grad_clip must be positive")
        if not self.s > 0:
            raise ValidationError("s must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise ValidationError(f"mask_mode must be one of {MASK_MODES}")


@dataclass
class TrainRecord:
    epoch: int
    mask_loss: float
    seg_loss: float
    mean_add: float
    total_loss: float = 0.0
    lr: float = 0.0
    skipped: list[int] = field(default_factory=list)
    faults: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mask_loss": self.mask_loss,
            "seg_loss": self.seg_loss,
            "mean_add": self.mean_add,
            "total_loss": self.total_loss,
            "lr": self.lr,
            "skipped": self.skipped,
            "faults": self.faults,
        }


@dataclass
class TrainingScenes:
    """Scenes seen by self-training: robot, per-scene ground truth and the mask source."""

    model: RobotModel
    samples: list[SceneSample]
    provider: MaskProvider

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_dataset(
        cls,
        dataset: SceneDataset,
        radius: int = 1,
        flip_rate: float = 0.01,
        seed: int = 0,
        oracle_masks=None,
    ) -> TrainingScenes:
        if oracle_masks is None:
            oracle_masks = dataset.masks()
        provider = MaskProvider(oracle_masks, radius=radius, flip_rate=flip_rate, seed=seed)
        return cls(dataset.model, list(dataset.samples), provider)


@dataclass
class TrainState:
    params: PerceptionParams
    adam: Adam
    scheduler: PlateauScheduler
    poses: dict[int, SE3Pose] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0

    @classmethod
    def start(cls, params: PerceptionParams, cfg: TrainConfig) -> TrainState:
        lrs = {"centers": cfg.lr, "log_sharpness": cfg.lr, "mask_logits": cfg.seg_lr}
        return cls(
            params,
            Adam(lrs, cfg.beta1, cfg.beta2),
            PlateauScheduler(cfg.patience, cfg.decay),
        )


# === One scene ===
@dataclass
class SceneOutcome:
    scene_id: int
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    mask_loss: float = 0.0
    seg_loss: float = 0.0
    add: float = 0.0
    pose: SE3Pose | None = None
    residual: float = 0.0
    fault: str | None = None


def _solve(correspondences: Correspondences, K: CameraIntrinsics, warm: SE3Pose | None):
    if warm is not None:
        try:
            result = pnp_solve(correspondences, K, init=warm)
            if result.converged:
                return result
        except ComputationError:
            pass
    return pnp_solve(correspondences, K)


def scene_gradients(
    params: PerceptionParams,
    scenes: TrainingScenes,
    scene_id: int,
    cfg: TrainConfig,
    warm: SE3Pose | None = None,
) -> SceneOutcome:
    """Forward one scene and pull both losses back onto that scene's parameters."""
    sample = scenes.samples[scene_id]
    K, model = sample.intrinsics, scenes.model
    try:
        kp_node = predict_keypoints(params, scene_id, cfg.temperature, K.width)
        points3d = keypoints_3d(model, sample.q)
        correspondences = Correspondences(kp_node.value, points3d)
        result = _solve(correspondences, K, warm)
        ctx = rasterize(assemble_camera_mesh(model, sample.q, result.pose), K, cfg.render)
        S = ctx.image
        # the mask is a constant target for the keypoint branch
        M = scenes.provider.mask(scene_id, cfg.mask_mode, params)
        loss_m, cot_s = mask_loss(S, M)
        pose_cot = ctx.pose_backward(cot_s)
        kp_cot = pnp_backward(correspondences, K, result, pose_cot).reshape(-1, 2)
        kp_grads = kp_node.pullback(kp_cot)

        w = sample_weight(result.residual, cfg.s)
        loss_s, cot_m = seg_loss(S, M, w)
        grads = {
            "centers": np.zeros_like(params.centers),
            "log_sharpness": np.zeros_like(params.log_sharpness),
        }
        grads["centers"][scene_id] = kp_grads["centers"]
        grads["log_sharpness"][scene_id] = kp_grads["log_sharpness"]
        if cfg.mask_mode == "trainable":
            grads["mask_logits"] = np.zeros_like(params.mask_logits)
            grads["mask_logits"][scene_id] = cot_m * M * (1.0 - M)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergedError(f"non-finite gradient for {name}")
    except ComputationError as e:
        return SceneOutcome(scene_id, fault=type(e).__name__)
    return SceneOutcome(
        scene_id,
        grads=grads,
        mask_loss=loss_m,
        seg_loss=loss_s,
        add=add_metric(result.pose, sample.gt_pose, points3d),
        pose=result.pose,
        residual=result.residual,
    )


# === Epochs ===
def active_heads(step: int, cfg: TrainConfig) -> tuple[bool, bool]:
    """
    (keypoint, segmentation) heads updated by optimizer step `step`. With alternation the
    keypoint head steps on even batches and the segmentation head on odd ones.
    """
    trainable = cfg.mask_mode == "trainable"
    if not cfg.alternation:
        return True, trainable
    return step % 2 == 0, trainable and step % 2 == 1


def train_epoch(
    state: TrainState | PerceptionParams, scenes: TrainingScenes, cfg: TrainConfig
) -> tuple[TrainState, TrainRecord]:
    """One pass over all scenes; returns the updated state and the epoch's TrainRecord."""
    if isinstance(state, PerceptionParams):
        state = TrainState.start(state, cfg)
    if cfg.mask_mode == "trainable" and state.params.mask_logits.shape[0] < len(scenes):
        raise ShapeMismatchError("trainable masks need one logit grid per scene")
    params = state.params

    def run(scene_id: int) -> SceneOutcome:
        return scene_gradients(params, scenes, scene_id, cfg, state.poses.get(scene_id))

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        outcomes = list(pool.map(run, range(len(scenes))))

    solved = [o for o in outcomes if o.fault is None]
    if not solved:
        raise DivergedError(f"every scene failed in epoch {state.epoch}")

    adam, scheduler = state.adam.copy(), PlateauScheduler(**vars(state.scheduler))
    groups = params.groups()
    step = state.step
    for outcome in solved:
        update_kp, update_seg = active_heads(step, cfg)
        step += 1
        grads = {}
        if update_kp:
            grads["centers"] = outcome.grads["centers"]
            grads["log_sharpness"] = outcome.grads["log_sharpness"]
        if update_seg:
            grads["mask_logits"] = outcome.grads["mask_logits"]
        if grads:
            grads, _ = clip_by_norm(grads, cfg.grad_clip)
            groups = adam.step(groups, grads, scheduler.scale)

    mask_l = float(np.mean([o.mask_loss for o in solved]))
    seg_l = float(np.mean([o.seg_loss for o in solved]))
    record = TrainRecord(
        epoch=state.epoch,
        mask_loss=mask_l,
        seg_loss=seg_l,
        mean_add=1000.0 * float(np.mean([o.add for o in solved])),
        total_loss=mask_l + seg_l,
        lr=cfg.lr * scheduler.scale,
        skipped=[o.scene_id for o in outcomes if o.fault is not None],
        faults={str(o.scene_id): o.fault for o in outcomes if o.fault is not None},
    )
    scheduler.step(record.total_loss)
    poses = dict(state.poses)
    poses.update({o.scene_id: o.pose for o in solved})
    new_state = TrainState(params.replace(**groups), adam, scheduler, poses, state.epoch + 1, step)
    return new_state, record


def train(params: PerceptionParams, scenes: TrainingScenes, cfg: TrainConfig, on_epoch=None):
    state = TrainState.start(params, cfg)
    records = []
    for _ in range(cfg.epochs):
        state, record = train_epoch(state, scenes, cfg)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return state, records


# === Inference ===
def estimate_pose(
    params: PerceptionParams,
    scene_id: int,
    model: RobotModel,
    q,
    K: CameraIntrinsics,
    temperature: float = 1.0,
    init: SE3Pose | None = None,
) -> tuple[PnpResult, np.ndarray]:
    """Keypoints from the bump model (scaled to K's resolution) followed by PnP."""
    keypoints = predict_keypoints(params, scene_id, temperature, K.width).value
    result = _solve(Correspondences(keypoints, keypoints_3d(model, q)), K, init)
    return result, keypoints


# === Supervised pretraining ===
@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 300
    lr: float = 0.5
    temperature: float = 1.0
    sharpness: float = 1.0
    patience: int = 5
    decay: float = 0.1
    heatmap_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 1:
            raise ValidationError("pretraining needs lr > 0 and epochs >= 1")


@dataclass
class PretrainRecord:
    epoch: int
    keypoint_loss: float
    lr: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "keypoint_loss": self.keypoint_loss, "lr": self.lr}


def pretrain(
    labels, image_width: int, cfg: PretrainConfig | None = None, mask_logits=None, on_epoch=None
) -> tuple[PerceptionParams, list[PretrainRecord]]:
    """Least-squares fit of bump centers to keypoint labels (scenes, n, 2), in image pixels."""
    cfg = cfg or PretrainConfig()
    labels = np.asarray(labels, dtype=float)
    h, w = cfg.heatmap_size
    start = np.broadcast_to(
        np.array([(w - 1) * image_width / (2.0 * w), (h - 1) * image_width / (2.0 * w)]),
        labels.shape,
    )
    params = init_params(start, cfg.heatmap_size, image_width, cfg.sharpness, mask_logits)
    adam = Adam({"centers": cfg.lr, "log_sharpness": cfg.lr})
    scheduler = PlateauScheduler(cfg.patience, cfg.decay)
    records = []
    for epoch in range(cfg.epochs):
        d_centers = np.zeros_like(params.centers)
        d_log_s = np.zeros_like(params.log_sharpness)
        losses = []
        for scene_id in range(params.n_scenes):
            node = predict_keypoints(params, scene_id, cfg.temperature, image_width)
            diff = node.value - labels[scene_id]
            losses.append(float(np.sum(diff * diff)))
            grads = node.pullback(2.0 * diff)
            d_centers[scene_id] = grads["centers"]
            d_log_s[scene_id] = grads["log_sharpness"]
        record = PretrainRecord(epoch, float(np.mean(losses)), cfg.lr * scheduler.scale)
        groups = adam.step(
            params.groups(), {"centers": d_centers, "log_sharpness": d_log_s}, scheduler.scale
        )
        params = params.replace(**groups)
        scheduler.step(record.keypoint_loss)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return params, records


# === Render-and-compare refinement ===
@dataclass
class RefineResult:
    pose: SE3Pose
    losses: list[float]


def refine_pose_by_rendering(
    model: RobotModel,
    q,
    K: CameraIntrinsics,
    target_mask,
    init_pose: SE3Pose,
    steps: int = 200,
    lr: float = 5e-3,
    decay: float = 0.985,
    cfg: RenderConfig | None = None,
) -> RefineResult:
    """
    Adam descent of mask_loss over the camera-to-robot pose. Steps are taken in a frame
    centered on the robot's keypoint centroid so rotation and translation decouple.
    """
    cfg = cfg or RenderConfig()
    points = keypoints_3d(model, q)
    adam = Adam({"xi": lr})
    pose, losses = init_pose, []
    for k in range(steps):
        ctx = rasterize(assemble_camera_mesh(model, q, pose), K, cfg)
        loss, cot = mask_loss(ctx.image, target_mask)
        losses.append(loss)
        g = ctx.pose_backward(cot)
        center = pose.transform_points(points).mean(axis=0)
        g_centered = np.concatenate([g[:3] - np.cross(center, g[3:]), g[3:]])
        step = adam.step({"xi": np.zeros(6)}, {"xi": g_centered}, decay**k)["xi"]
        omega, v = step[:3], step[3:] + np.cross(center, step[:3])
        pose = se3_exp(np.concatenate([omega, v])).compose(pose)
    return RefineResult(pose, losses)

