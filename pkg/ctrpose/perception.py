"""
Module: perception.py
Description:
    Desk-scale keypoint and segmentation heads. Each scene owns one Gaussian-bump logit field
    per keypoint (learnable center and sharpness) whose spatial softmax gives the 2D keypoints,
    and a MaskProvider serves oracle, corrupted, or trainable foreground masks.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Heatmap coordinates follow the renderer: pixel (row i, column j) sits at (u, v) = (j, i).
    Keypoints are multiplied by image_width / heatmap_width when the image resolution differs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.special import expit, logit, softmax

from ctrpose.diff import VjpNode
from ctrpose.errors import ShapeMismatchError, UnknownSceneError, ValidationError

DEFAULT_TEMPERATURE = 1.0
DEFAULT_SHARPNESS = 1.0
MASK_EPS = 1e-7
MASK_MODES = ("oracle", "corrupted", "trainable")
CHECKPOINT_FILE = "checkpoint.json"
MASK_LOGITS_FILE = "mask_logits.npy"

# n x H' x W' logits
HeatmapStack = np.ndarray
# H x W values in [0, 1]
MaskImage = np.ndarray


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel-center coordinates."""
    rows, cols = np.arange(height, dtype=float), np.arange(width, dtype=float)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([uu, vv], axis=-1)


# === Spatial softmax ===
def _channel_probs(heatmaps: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    heatmaps = np.asarray(heatmaps, dtype=float)
    n, h, w = heatmaps.shape
    return softmax(heatmaps.reshape(n, h * w) / temperature, axis=1).reshape(n, h, w)


def spatial_softmax(heatmaps: HeatmapStack, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """o = sum_{u,v} softmax(h / temperature)(u, v) * (u, v) per channel, shape (n, 2)."""
    probs = _channel_probs(heatmaps, temperature)
    grid = pixel_grid(*probs.shape[1:])
    return np.einsum("nhw,hwc->nc", probs, grid)


def spatial_softmax_vjp(
    heatmaps: HeatmapStack, temperature: float, cotangent
) -> np.ndarray:
    """dL/dh = (1 / temperature) * p * ((c - o) . g) for keypoint cotangent g (n, 2)."""
    probs = _channel_probs(heatmaps, temperature)
    grid = pixel_grid(*probs.shape[1:])
    points = np.einsum("nhw,hwc->nc", probs, grid)
    cotangent = np.asarray(cotangent, dtype=float).reshape(points.shape)
    offsets = grid[None] - points[:, None, None, :]
    return probs * np.einsum("nhwc,nc->nhw", offsets, cotangent) / temperature


def spatial_softmax_node(heatmaps: HeatmapStack, temperature: float = DEFAULT_TEMPERATURE):
    return VjpNode(
        spatial_softmax(heatmaps, temperature),
        lambda cot: spatial_softmax_vjp(heatmaps, temperature, cot),
    )


# === Bump heatmap model ===
@dataclass(frozen=True, eq=False)
class PerceptionParams:
    """
    theta_kp = (centers, log_sharpness) per scene and keypoint; theta_seg = per-scene mask
    logits (empty unless masks are trainable); theta_bb is unused at desk scale.
    """

    centers: np.ndarray
    log_sharpness: np.ndarray
    mask_logits: np.ndarray
    heatmap_size: tuple[int, int] = (64, 64)
    theta_bb: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        centers = np.array(self.centers, dtype=float)
        if centers.ndim != 3 or centers.shape[2] != 2:
            raise ShapeMismatchError(f"centers must be (scenes, n, 2), got {centers.shape}")
        log_sharpness = np.array(self.log_sharpness, dtype=float).reshape(centers.shape[:2])
        h, w = (int(s) for s in self.heatmap_size)
        mask_logits = np.array(self.mask_logits, dtype=float)
        if mask_logits.size == 0:
            mask_logits = np.zeros((0, h, w))
        if mask_logits.ndim != 3 or mask_logits.shape[1:] != (h, w):
            raise ShapeMismatchError(f"mask logits {mask_logits.shape} do not match ({h}, {w})")
        for name, arr in (("centers", centers), ("log_sharpness", log_sharpness)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contain non-finite values")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "log_sharpness", log_sharpness)
        object.__setattr__(self, "mask_logits", mask_logits)
        object.__setattr__(self, "heatmap_size", (h, w))
        object.__setattr__(self, "theta_bb", np.asarray(self.theta_bb, dtype=float).ravel())

    @property
    def n_scenes(self) -> int:
        return self.centers.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.centers.shape[1]

    @property
    def theta_kp(self) -> np.ndarray:
        return np.concatenate([self.centers.ravel(), self.log_sharpness.ravel()])

    @property
    def theta_seg(self) -> np.ndarray:
        return self.mask_logits.ravel()

    def groups(self) -> dict[str, np.ndarray]:
        return {
            "centers": self.centers,
            "log_sharpness": self.log_sharpness,
            "mask_logits": self.mask_logits,
        }

    def replace(self, **groups) -> PerceptionParams:
        merged = {**self.groups(), **groups}
        return PerceptionParams(heatmap_size=self.heatmap_size, theta_bb=self.theta_bb, **merged)

    def check_scene(self, scene_id: int) -> int:
        scene_id = int(scene_id)
        if not 0 <= scene_id < self.n_scenes:
            raise UnknownSceneError(f"scene {scene_id} not in [0, {self.n_scenes})")
        return scene_id


def init_params(
    keypoints2d,
    heatmap_size=(64, 64),
    image_width: int | None = None,
    sharpness: float = DEFAULT_SHARPNESS,
    mask_logits=None,
) -> PerceptionParams:
    """Bump centers placed on image-space keypoints (scenes, n, 2) mapped to heatmap pixels."""
    keypoints2d = np.asarray(keypoints2d, dtype=float)
    scale = keypoint_scale(heatmap_size, image_width)
    log_s = np.full(keypoints2d.shape[:2], np.log(sharpness))
    return PerceptionParams(
        keypoints2d / scale, log_s, mask_logits if mask_logits is not None else [], heatmap_size
    )


def keypoint_scale(heatmap_size, image_width: int | None) -> float:
    return 1.0 if image_width is None else float(image_width) / float(heatmap_size[1])


def heatmap_model_forward(params: PerceptionParams, scene_id: int) -> HeatmapStack:
    """Logits h_k(x) = -s_k ||x - c_k||^2 for every keypoint channel of one scene."""
    scene_id = params.check_scene(scene_id)
    grid = pixel_grid(*params.heatmap_size)
    offsets = grid[None] - params.centers[scene_id][:, None, None, :]
    sharpness = np.exp(params.log_sharpness[scene_id])
    return -sharpness[:, None, None] * np.sum(offsets**2, axis=-1)


def heatmap_model_vjp(params: PerceptionParams, scene_id: int, cotangent) -> dict:
    """Gradients of <cotangent, heatmaps> w.r.t. this scene's centers and log-sharpness."""
    scene_id = params.check_scene(scene_id)
    cotangent = np.asarray(cotangent, dtype=float)
    grid = pixel_grid(*params.heatmap_size)
    offsets = grid[None] - params.centers[scene_id][:, None, None, :]
    sharpness = np.exp(params.log_sharpness[scene_id])
    d_centers = 2.0 * sharpness[:, None] * np.einsum("nhw,nhwc->nc", cotangent, offsets)
    d_log_s = -sharpness * np.einsum("nhw,nhw->n", cotangent, np.sum(offsets**2, axis=-1))
    return {"centers": d_centers, "log_sharpness": d_log_s}


def predict_keypoints(
    params: PerceptionParams,
    scene_id: int,
    temperature: float = DEFAULT_TEMPERATURE,
    image_width: int | None = None,
) -> VjpNode:
    """Image-space keypoints (n, 2) of one scene with the pullback to its bump parameters."""
    heatmaps = heatmap_model_forward(params, scene_id)
    scale = keypoint_scale(params.heatmap_size, image_width)
    softmax_node = spatial_softmax_node(heatmaps, temperature)

    def vjp(cot):
        d_heat = softmax_node.pullback(scale * np.asarray(cot, dtype=float))
        return heatmap_model_vjp(params, scene_id, d_heat)

    return VjpNode(scale * softmax_node.value, vjp)


def perturb_centers(params: PerceptionParams, magnitude_px: float, seed: int) -> PerceptionParams:
    """Shift every bump center by `magnitude_px` heatmap pixels in a seeded random direction."""
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=params.centers.shape[:2])
    offsets = magnitude_px * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return params.replace(centers=params.centers + offsets)


# === Masks ===
def mask_logits_from(masks) -> np.ndarray:
    masks = np.clip(np.asarray(masks, dtype=float), MASK_EPS, 1.0 - MASK_EPS)
    return logit(masks)


def _disk(radius: int) -> np.ndarray:
    return cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 1, 2 * radius + 1))


def corrupt_mask(
    mask,
    radius: int = 1,
    flip_rate: float = 0.01,
    boundary_fraction: float = 0.2,
    seed=0,
    roi_margin: int = 4,
) -> np.ndarray:
    """
    Stand-in for an imperfect segmentation: boundary segments selected by a smooth random
    field are grown (dilation) or shrunk (erosion) by `radius` px, then pixels inside the
    mask's bounding box (padded by `roi_margin`) flip at rate `flip_rate`.
    """
    oracle = np.asarray(mask) > 0.5
    if radius < 0 or not 0.0 <= flip_rate <= 1.0:
        raise ValidationError("corruption radius must be >= 0 and flip rate in [0, 1]")
    rng = np.random.default_rng(seed)
    out = oracle.copy()
    if radius > 0 and boundary_fraction > 0 and oracle.any():
        m8 = oracle.astype(np.uint8)
        dilated = cv2.dilate(m8, _disk(radius)).astype(bool)
        eroded = cv2.erode(m8, _disk(radius)).astype(bool)
        field_ = cv2.GaussianBlur(rng.standard_normal(oracle.shape), (0, 0), sigmaX=3.0)
        band = dilated & ~eroded
        # a mask filling the whole image has no boundary to move
        if band.any():
            tails = [0.5 * boundary_fraction, 1 - 0.5 * boundary_fraction]
            lo, hi = np.quantile(field_[band], tails)
            grow = dilated & ~oracle & (field_ >= hi)
            shrink = oracle & ~eroded & (field_ <= lo)
            out = (oracle | grow) & ~shrink
    if flip_rate > 0 and oracle.any():
        rows, cols = np.nonzero(oracle)
        h, w = oracle.shape
        r0, r1 = max(rows.min() - roi_margin, 0), min(rows.max() + roi_margin + 1, h)
        c0, c1 = max(cols.min() - roi_margin, 0), min(cols.max() + roi_margin + 1, w)
        flips = rng.random((r1 - r0, c1 - c0)) < flip_rate
        out[r0:r1, c0:c1] ^= flips
    return out.astype(float)


class MaskProvider:
    """Per-scene foreground masks standing in for the segmentation head."""

    def __init__(
        self,
        oracle_masks,
        radius: int = 1,
        flip_rate: float = 0.01,
        boundary_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.oracle_masks = np.asarray(oracle_masks, dtype=float)
        if self.oracle_masks.ndim != 3:
            raise ShapeMismatchError("oracle masks must be (scenes, H, W)")
        self.radius, self.flip_rate = int(radius), float(flip_rate)
        self.boundary_fraction, self.seed = float(boundary_fraction), int(seed)
        self._corrupted: dict[int, np.ndarray] = {}

    @property
    def n_scenes(self) -> int:
        return len(self.oracle_masks)

    def _check(self, scene_id: int) -> int:
        scene_id = int(scene_id)
        if not 0 <= scene_id < self.n_scenes:
            raise UnknownSceneError(f"scene {scene_id} not in [0, {self.n_scenes})")
        return scene_id

    def corrupted(self, scene_id: int) -> MaskImage:
        scene_id = self._check(scene_id)
        if scene_id not in self._corrupted:
            seed = np.random.SeedSequence([self.seed, scene_id])
            self._corrupted[scene_id] = corrupt_mask(
                self.oracle_masks[scene_id],
                self.radius,
                self.flip_rate,
                self.boundary_fraction,
                seed,
            )
        return self._corrupted[scene_id]

    def initial_logits(self) -> np.ndarray:
        """Trainable logits initialised from the corrupted masks."""
        return mask_logits_from([self.corrupted(i) for i in range(self.n_scenes)])

    def mask(self, scene_id: int, mode: str, params: PerceptionParams | None = None) -> MaskImage:
        if mode not in MASK_MODES:
            raise ValidationError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")
        scene_id = self._check(scene_id)
        if mode == "oracle":
            return self.oracle_masks[scene_id]
        if mode == "corrupted":
            return self.corrupted(scene_id)
        if params is None or params.mask_logits.shape[0] <= scene_id:
            raise UnknownSceneError(f"no trainable mask logits for scene {scene_id}")
        return expit(params.mask_logits[scene_id])


def mask_provider(
    provider: MaskProvider, scene_id: int, mode: str, params: PerceptionParams | None = None
) -> MaskImage:
    return provider.mask(scene_id, mode, params)


# === Checkpoints ===
def save_checkpoint(params: PerceptionParams, out_dir, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logits_path = None
    if params.mask_logits.shape[0]:
        np.save(out_dir / MASK_LOGITS_FILE, params.mask_logits)
        logits_path = MASK_LOGITS_FILE
    payload = {
        "heatmap_size": list(params.heatmap_size),
        "scenes": {
            str(i): {
                "centers": params.centers[i].tolist(),
                "sharpness": np.exp(params.log_sharpness[i]).tolist(),
            }
            for i in range(params.n_scenes)
        },
        "mask_logits_path": logits_path,
    }
    if extra:
        payload.update(extra)
    path = out_dir / CHECKPOINT_FILE
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def load_checkpoint(path) -> PerceptionParams:
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    scenes = data.get("scenes", {})
    order = sorted(scenes, key=int)
    centers = [scenes[k]["centers"] for k in order]
    log_s = [np.log(scenes[k]["sharpness"]) for k in order]
    heatmap_size = tuple(data.get("heatmap_size", (64, 64)))
    logits = []
    if data.get("mask_logits_path"):
        logits = np.load(path.parent / data["mask_logits_path"])
    return PerceptionParams(centers, log_s, logits, heatmap_size)
