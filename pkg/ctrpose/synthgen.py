"""
Module: synthgen.py
Description:
    Synthetic scene factory. Samples joint configurations and look-at camera placements
    around the robot, derives keypoint and mask labels on demand, and stores datasets as a
    manifest plus one small JSON file per sample.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Only (q, gt_pose, seed) is stored per sample; labels are regenerated from it. Every
    sample draws from its own RNG seeded by (master_seed, index).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ctrpose.errors import (
    SamplingExhaustedError,
    ShapeMismatchError,
    ValidationError,
)
from ctrpose.geometry import Z_MIN, CameraIntrinsics, SE3Pose, look_at, project_points
from ctrpose.kinematics import (
    RobotModel,
    assemble_base_mesh,
    assemble_camera_mesh,
    keypoints_3d,
    load_robot,
)
from ctrpose.softrender import RenderConfig, load_png, render_silhouette, save_png

MANIFEST_FILE = "manifest.json"
MASK_DIR = "masks"


@dataclass(frozen=True)
class RandomizationRanges:
    distance: tuple[float, float] = (1.2, 1.7)
    elevation: tuple[float, float] = (-0.2, 1.2)
    azimuth: tuple[float, float] = (-np.pi, np.pi)
    roll: float = 0.3
    joint_lower: tuple | None = None
    joint_upper: tuple | None = None
    margin_px: float = 6.0
    max_tries: int = 100

    def __post_init__(self):
        lo, hi = self.distance
        if not 0 < lo <= hi:
            raise ValidationError("camera distance range must be positive and ordered")
        if not -np.pi / 2 < self.elevation[0] <= self.elevation[1] < np.pi / 2:
            raise ValidationError("elevation range must lie strictly inside (-pi/2, pi/2)")
        if self.max_tries < 1:
            raise ValidationError("max_tries must be >= 1")

    def joint_bounds(self, model: RobotModel) -> tuple[np.ndarray, np.ndarray]:
        lower = model.lower_limits if self.joint_lower is None else np.asarray(self.joint_lower)
        upper = model.upper_limits if self.joint_upper is None else np.asarray(self.joint_upper)
        lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
        if lower.shape != (model.n_dof,) or upper.shape != (model.n_dof,):
            raise ShapeMismatchError(f"joint ranges must have {model.n_dof} entries")
        if np.any(lower < model.lower_limits) or np.any(upper > model.upper_limits):
            raise ValidationError("joint sampling range exceeds the robot's joint limits")
        if np.any(lower > upper) or not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValidationError("joint sampling range must be finite and ordered")
        return lower, upper

    def to_dict(self) -> dict:
        data = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    @classmethod
    def from_dict(cls, data: dict) -> RandomizationRanges:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        for key in ("distance", "elevation", "azimuth", "joint_lower", "joint_upper"):
            if known.get(key) is not None:
                known[key] = tuple(float(x) for x in known[key])
        return cls(**known)


@dataclass(frozen=True, eq=False)
class SceneSample:
    index: int
    q: np.ndarray
    gt_pose: SE3Pose
    intrinsics: CameraIntrinsics
    gt_keypoints2d: np.ndarray
    seed: int
    gt_mask: np.ndarray | None = field(default=None)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "q": self.q.tolist(),
            "gt_pose": self.gt_pose.to_dict(),
            "seed": self.seed,
        }


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _keypoint_pixels(model: RobotModel, q, pose: SE3Pose, K: CameraIntrinsics) -> np.ndarray:
    return project_points(pose.transform_points(keypoints_3d(model, q)), K)


def sample_scene(
    model: RobotModel,
    K: CameraIntrinsics,
    rng_seed: int,
    ranges: RandomizationRanges | None = None,
    index: int = 0,
) -> SceneSample:
    """
    Uniform joint values and a look-at camera on a spherical shell around the keypoint
    centroid. The shell radius is drawn once; the rest is resampled until every keypoint
    lands inside the image (with margin) and the whole mesh is in front of the camera.
    """
    ranges = ranges or RandomizationRanges()
    lower, upper = ranges.joint_bounds(model)
    rng = np.random.default_rng(rng_seed)
    radius = rng.uniform(*ranges.distance)
    sin_lo, sin_hi = np.sin(ranges.elevation[0]), np.sin(ranges.elevation[1])
    margin = ranges.margin_px
    for _ in range(ranges.max_tries):
        q = rng.uniform(lower, upper)
        points = keypoints_3d(model, q)
        centroid = points.mean(axis=0)
        azimuth = rng.uniform(*ranges.azimuth)
        sin_el = rng.uniform(sin_lo, sin_hi)
        cos_el = np.sqrt(1.0 - sin_el**2)
        direction = np.array([cos_el * np.cos(azimuth), cos_el * np.sin(azimuth), sin_el])
        roll = rng.uniform(-ranges.roll, ranges.roll)
        pose = look_at(centroid + radius * direction, centroid, roll=roll)

        depth = pose.transform_points(points)[:, 2]
        mesh_depth = pose.transform_points(assemble_base_mesh(model, q).vertices)[:, 2]
        if np.any(depth <= Z_MIN) or np.any(mesh_depth <= Z_MIN):
            continue
        pixels = _keypoint_pixels(model, q, pose, K)
        inside = (
            (pixels[:, 0] >= margin)
            & (pixels[:, 0] <= K.width - 1 - margin)
            & (pixels[:, 1] >= margin)
            & (pixels[:, 1] <= K.height - 1 - margin)
        )
        if np.all(inside):
            return SceneSample(index, q, pose, K, pixels, int(rng_seed))
    raise SamplingExhaustedError(
        f"no valid camera placement after {ranges.max_tries} tries (seed {rng_seed})"
    )


def generate_labels(
    sample: SceneSample, model: RobotModel, cfg: RenderConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Keypoint labels pi(p_i | T, K) and the rendered mask at the ground-truth pose, >= 0.5."""
    keypoints = _keypoint_pixels(model, sample.q, sample.gt_pose, sample.intrinsics)
    mesh = assemble_camera_mesh(model, sample.q, sample.gt_pose)
    mask = (render_silhouette(mesh, sample.intrinsics, cfg) >= 0.5).astype(float)
    return keypoints, mask


def sample_from_dict(data: dict, model: RobotModel, K: CameraIntrinsics) -> SceneSample:
    q = np.asarray(data["q"], dtype=float)
    pose = SE3Pose.from_dict(data["gt_pose"])
    pixels = _keypoint_pixels(model, q, pose, K)
    return SceneSample(int(data.get("index", 0)), q, pose, K, pixels, int(data["seed"]))


def generate_samples(
    model: RobotModel,
    K: CameraIntrinsics,
    n: int,
    master_seed: int,
    ranges: RandomizationRanges | None = None,
    threads: int = 1,
    on_sample: Callable[[SceneSample], None] | None = None,
) -> list[SceneSample]:
    if n < 1:
        raise ValidationError("dataset size must be >= 1")

    def make(index: int) -> SceneSample:
        return sample_scene(model, K, scene_seed(master_seed, index), ranges, index)

    samples = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for sample in pool.map(make, range(n)):
            samples.append(sample)
            if on_sample is not None:
                on_sample(sample)
    return samples


# === Dataset directory ===
@dataclass
class SceneDataset:
    model: RobotModel
    robot_path: str
    intrinsics: CameraIntrinsics
    samples: list[SceneSample]
    master_seed: int = 0
    ranges: RandomizationRanges = field(default_factory=RandomizationRanges)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __len__(self) -> int:
        return len(self.samples)

    def keypoints2d(self) -> np.ndarray:
        return np.stack([s.gt_keypoints2d for s in self.samples])

    def masks(self) -> np.ndarray:
        """Mask labels for every sample, rendering the ones not cached yet."""
        out = []
        for i, sample in enumerate(self.samples):
            if sample.gt_mask is None:
                _, mask = generate_labels(sample, self.model, self.render)
                sample = replace(sample, gt_mask=mask)
                self.samples[i] = sample
            out.append(sample.gt_mask)
        return np.stack(out)

    def save(self, out_dir, cache_masks: bool = False) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for sample in self.samples:
            name = f"sample_{sample.index}.json"
            with open(out_dir / name, "w", encoding="utf-8") as f:
                json.dump(sample.to_dict(), f, indent=2)
            names.append(name)
        if cache_masks:
            for sample, mask in zip(self.samples, self.masks()):
                save_png(mask, out_dir / MASK_DIR / f"mask_{sample.index}.png")
        manifest = {
            "robot": self.robot_path,
            "intrinsics": self.intrinsics.to_dict(),
            "master_seed": self.master_seed,
            "ranges": self.ranges.to_dict(),
            "render": self.render.to_dict(),
            "mask_cache": MASK_DIR if cache_masks else None,
            "samples": names,
        }
        path = out_dir / MANIFEST_FILE
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
        return path

    @classmethod
    def load(cls, dataset_dir, model: RobotModel | None = None) -> SceneDataset:
        dataset_dir = Path(dataset_dir)
        manifest_path = dataset_dir / MANIFEST_FILE
        if not manifest_path.exists():
            raise ValidationError(f"dataset manifest not found: {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        model = model or load_robot(manifest["robot"])
        K = CameraIntrinsics.from_dict(manifest["intrinsics"])
        render = RenderConfig(**manifest.get("render", {}))
        samples = []
        for name in manifest["samples"]:
            with open(dataset_dir / name, "r", encoding="utf-8") as f:
                sample = sample_from_dict(json.load(f), model, K)
            if manifest.get("mask_cache"):
                png = dataset_dir / manifest["mask_cache"] / f"mask_{sample.index}.png"
                if png.exists():
                    sample = replace(sample, gt_mask=load_png(png))
            samples.append(sample)
        return cls(
            model=model,
            robot_path=manifest["robot"],
            intrinsics=K,
            samples=samples,
            master_seed=int(manifest.get("master_seed", 0)),
            ranges=RandomizationRanges.from_dict(manifest.get("ranges", {})),
            render=render,
        )
