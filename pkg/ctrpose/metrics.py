"""
Module: metrics.py
Description:
    Evaluation metrics: ADD between estimated and ground-truth camera-to-robot poses, area
    under the accuracy-vs-threshold curve, and PCK of 2D keypoint reprojections.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    ADD grid: 0 to 0.1 m in 1000 steps. PCK grid: 0 to 100 px in 1000 steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ctrpose.errors import EmptyInputError, EmptyPointsError, ValidationError
from ctrpose.geometry import SE3Pose, pose_vjp

ADD_MAX_THRESHOLD = 0.1
PCK_MAX_THRESHOLD = 100.0
AUC_STEPS = 1000
PCK_THRESHOLD = 50.0


def add_metric(est: SE3Pose, gt: SE3Pose, points) -> float:
    """(1/n) sum_i ||gt p_i - est p_i|| in meters."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyPointsError("ADD needs at least one point")
    diff = gt.transform_points(points) - est.transform_points(points)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def add_pose_vjp(est: SE3Pose, gt: SE3Pose, points) -> np.ndarray:
    """Gradient of ADD w.r.t. a left perturbation of `est`, as a 6-vector (omega, v)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyPointsError("ADD needs at least one point")
    moved = est.transform_points(points)
    diff = moved - gt.transform_points(points)
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    unit = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
    return pose_vjp(moved, unit / len(points))


def auc_curve(errors, max_threshold: float, steps: int = AUC_STEPS):
    """Thresholds max_threshold * k / steps (k = 0..steps) and the fraction of errors <= each."""
    errors = np.asarray(errors, dtype=float).ravel()
    if errors.size == 0:
        raise EmptyInputError("AUC needs at least one error value")
    if not max_threshold > 0 or steps < 1:
        raise ValidationError("AUC needs max_threshold > 0 and steps >= 1")
    thresholds = np.linspace(0.0, max_threshold, steps + 1)
    fractions = np.searchsorted(np.sort(errors), thresholds, side="right") / errors.size
    return thresholds, fractions


def auc(errors, max_threshold: float = ADD_MAX_THRESHOLD, steps: int = AUC_STEPS) -> float:
    """Mean accuracy over the threshold grid, as a percentage in [0, 100]."""
    _, fractions = auc_curve(errors, max_threshold, steps)
    return float(100.0 * fractions.mean())


def pck(errors2d, threshold: float = PCK_THRESHOLD) -> float:
    errors2d = np.asarray(errors2d, dtype=float).ravel()
    if errors2d.size == 0:
        raise EmptyInputError("PCK needs at least one error value")
    return float(np.mean(errors2d <= threshold))


def keypoint_errors(predicted, truth) -> np.ndarray:
    """Per-keypoint Euclidean reprojection errors in pixels."""
    predicted = np.asarray(predicted, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    return np.linalg.norm(predicted - truth, axis=1)


def mask_iou(a, b) -> float:
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


@dataclass
class MetricReport:
    per_frame_add: list[float]
    mean_add: float
    auc_add: float
    pck_at_threshold: float
    mean_2d_err: float
    auc_pck: float = 0.0
    pck_threshold: float = PCK_THRESHOLD
    residuals: list[float] = field(default_factory=list)
    confidence: list[float] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_frame_add": self.per_frame_add,
            "mean_add": self.mean_add,
            "auc_add": self.auc_add,
            "pck_at_threshold": self.pck_at_threshold,
            "pck_threshold": self.pck_threshold,
            "mean_2d_err": self.mean_2d_err,
            "auc_pck": self.auc_pck,
            "residuals": self.residuals,
            "confidence": self.confidence,
            "failures": self.failures,
        }


def build_report(
    per_frame_add,
    errors2d,
    residuals=(),
    s: float = 0.1,
    pck_threshold: float = PCK_THRESHOLD,
    failures: dict | None = None,
) -> MetricReport:
    """Aggregate per-frame ADD (m) and per-keypoint 2D errors (px) into a MetricReport."""
    per_frame_add = [float(x) for x in per_frame_add]
    if not per_frame_add:
        raise EmptyInputError("no frames were evaluated")
    errors2d = np.asarray(errors2d, dtype=float).ravel()
    residuals = [float(r) for r in residuals]
    return MetricReport(
        per_frame_add=per_frame_add,
        mean_add=float(np.mean(per_frame_add)),
        auc_add=auc(per_frame_add, ADD_MAX_THRESHOLD),
        pck_at_threshold=pck(errors2d, pck_threshold),
        mean_2d_err=float(errors2d.mean()),
        auc_pck=auc(errors2d, PCK_MAX_THRESHOLD),
        pck_threshold=pck_threshold,
        residuals=residuals,
        confidence=[float(np.exp(-s * r)) for r in residuals],
        failures=dict(failures or {}),
    )


def write_curve_csv(path, errors, max_threshold: float, steps: int = AUC_STEPS) -> Path:
    path = Path(path)
    thresholds, fractions = auc_curve(errors, max_threshold, steps)
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=["threshold", "fraction"])
        writer.writeheader()
        writer.writerows(
            {"threshold": repr(float(t)), "fraction": repr(float(f))}
            for t, f in zip(thresholds, fractions)
        )
    return path
