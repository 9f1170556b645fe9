"""
Module: pnp.py
Description:
    Differentiable Perspective-n-Point layer. pnp_solve minimizes the summed squared
    reprojection error over the SE(3) tangent with Levenberg-Marquardt; pnp_backward pulls a
    pose cotangent back onto the 2D keypoints through the stationarity condition of that
    optimum (implicit function theorem, Gauss-Newton Hessian).

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Residuals are r = o - pi(T p), interleaved (u0, v0, u1, v1, ...). The objective gradient
    on the left tangent is F = -2 J^T r with J = d pi / d xi.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from ctrpose.diff import VjpNode
from ctrpose.errors import (
    BehindCameraError,
    DivergedError,
    SingularHessianError,
    TooFewPointsError,
    ValidationError,
)
from ctrpose.geometry import (
    Z_MIN,
    CameraIntrinsics,
    SE3Pose,
    point_pose_jacobians,
    retract,
)

MIN_POINTS = 4
PLANAR_RATIO = 1e-6
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class Correspondences:
    points2d: np.ndarray
    points3d: np.ndarray

    def __post_init__(self):
        points2d = np.array(self.points2d, dtype=float).reshape(-1, 2)
        points3d = np.array(self.points3d, dtype=float).reshape(-1, 3)
        if len(points2d) != len(points3d):
            raise ValidationError(
                f"{len(points2d)} 2D points but {len(points3d)} 3D points in correspondences"
            )
        if len(points2d) < MIN_POINTS:
            raise TooFewPointsError(f"PnP needs at least {MIN_POINTS} points, got {len(points2d)}")
        if not (np.all(np.isfinite(points2d)) and np.all(np.isfinite(points3d))):
            raise ValidationError("correspondences contain non-finite values")
        points2d.setflags(write=False)
        points3d.setflags(write=False)
        object.__setattr__(self, "points2d", points2d)
        object.__setattr__(self, "points3d", points3d)

    @property
    def n(self) -> int:
        return len(self.points2d)

    def with_points2d(self, points2d) -> Correspondences:
        return Correspondences(points2d, self.points3d)


@dataclass(frozen=True)
class LmConfig:
    max_iterations: int = 100
    lambda_init: float = 1e-3
    lambda_factor: float = 10.0
    grad_tol: float = 1e-8
    loose_grad_tol: float = 1e-6
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    lambda_max: float = 1e12

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not (self.lambda_init > 0 and self.lambda_factor > 1):
            raise ValidationError("LM damping must start positive and grow by a factor > 1")


@dataclass(frozen=True, eq=False)
class PnpResult:
    pose: SE3Pose
    residual: float
    converged: bool
    iterations: int
    planar: bool = False
    gradient_norm: float = 0.0


# === Residuals and Jacobians ===
def _project_clamped(points_cam: np.ndarray, K: CameraIntrinsics):
    """Projection and d pi / d xi with depth clamped at Z_MIN (LM iterates only)."""
    x, y = points_cam[:, 0], points_cam[:, 1]
    z = np.maximum(points_cam[:, 2], Z_MIN)
    uv = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    d_pi = np.zeros((len(points_cam), 2, 3))
    d_pi[:, 0, 0] = K.fx / z
    d_pi[:, 0, 2] = -K.fx * x / z**2
    d_pi[:, 1, 1] = K.fy / z
    d_pi[:, 1, 2] = -K.fy * y / z**2
    clamped = np.column_stack([x, y, z])
    jac = (d_pi @ point_pose_jacobians(clamped)).reshape(-1, 6)
    return uv, jac


def linearize(c: Correspondences, K: CameraIntrinsics, pose: SE3Pose):
    """Interleaved residual r (2n,) and projection Jacobian J = d pi / d xi (2n, 6)."""
    uv, jac = _project_clamped(pose.transform_points(c.points3d), K)
    return (c.points2d - uv).ravel(), jac


def reprojection_error(c: Correspondences, K: CameraIntrinsics, pose: SE3Pose) -> float:
    """O = sum_i ||o_i - pi(p_i | T, K)||^2 in pixels^2."""
    r, _ = linearize(c, K, pose)
    return float(r @ r)


def objective_gradient(c: Correspondences, K: CameraIntrinsics, pose: SE3Pose) -> np.ndarray:
    """F = dO/dxi = -2 J^T r on the left tangent at `pose`."""
    r, jac = linearize(c, K, pose)
    return -2.0 * jac.T @ r


def is_planar(points3d) -> bool:
    centered = np.asarray(points3d, dtype=float)
    centered = centered - centered.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[0] <= 0 or s[2] / s[0] < PLANAR_RATIO)


# === Initialization ===
def closed_form_init(c: Correspondences, K: CameraIntrinsics) -> SE3Pose:
    """EPnP estimate, falling back to SQPnP when EPnP fails or lands behind the camera."""
    object_points = np.ascontiguousarray(c.points3d, dtype=np.float64)
    image_points = np.ascontiguousarray(c.points2d, dtype=np.float64)
    for flag in (cv2.SOLVEPNP_EPNP, cv2.SOLVEPNP_SQPNP):
        try:
            ok, rvec, tvec = cv2.solvePnP(object_points, image_points, K.matrix, None, flags=flag)
        except cv2.error:
            continue
        if not ok or not (np.all(np.isfinite(rvec)) and np.all(np.isfinite(tvec))):
            continue
        pose = SE3Pose(Rotation.from_rotvec(rvec.ravel()).as_matrix(), tvec.ravel())
        if np.any(pose.transform_points(c.points3d)[:, 2] > Z_MIN):
            return pose
    raise DivergedError("closed-form PnP initialisation failed")


# === Solver ===
def pnp_solve(
    c: Correspondences,
    K: CameraIntrinsics,
    init: SE3Pose | None = None,
    cfg: LmConfig | None = None,
) -> PnpResult:
    """
    Local minimizer of sum_i ||o_i - pi(p_i | T, K)||^2 by Levenberg-Marquardt on the
    SE(3) tangent with Marquardt scaling lambda * diag(J^T J).
    """
    cfg = cfg or LmConfig()
    pose = init if init is not None else closed_form_init(c, K)
    if np.all(pose.transform_points(c.points3d)[:, 2] <= Z_MIN):
        raise BehindCameraError("all 3D points are behind the camera at initialisation")

    r, jac = linearize(c, K, pose)
    cost = initial_cost = float(r @ r)
    grad = -2.0 * jac.T @ r
    lam = cfg.lambda_init
    converged = False
    iterations = 0

    while iterations < cfg.max_iterations:
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < cfg.grad_tol:
            converged = True
            break
        iterations += 1
        hessian = jac.T @ jac
        damping = lam * np.maximum(np.diag(hessian), 1e-12)
        try:
            step = np.linalg.solve(hessian + np.diag(damping), jac.T @ r)
        except np.linalg.LinAlgError:
            lam *= cfg.lambda_factor
            continue
        candidate = retract(pose, step)
        r_new, jac_new = linearize(c, K, candidate)
        cost_new = float(r_new @ r_new)
        grad_new = -2.0 * jac_new.T @ r_new
        gnorm_new = float(np.max(np.abs(grad_new)))
        # below round-off the cost cannot rank steps; fall back to the gradient
        flat = cost_new - cost <= 1e-14 * max(cost, 1.0) and gnorm_new < gnorm
        if cost_new < cost or flat:
            decrease = cost - cost_new
            pose, r, jac, cost, grad = candidate, r_new, jac_new, cost_new, grad_new
            lam = max(lam / cfg.lambda_factor, 1e-12)
            small_move = np.linalg.norm(step) < cfg.step_tol or decrease < cfg.cost_tol
            if gnorm_new < cfg.grad_tol or (small_move and gnorm_new < cfg.loose_grad_tol):
                converged = True
                break
        else:
            lam *= cfg.lambda_factor
            if lam > cfg.lambda_max or np.linalg.norm(step) < cfg.step_tol:
                converged = gnorm < cfg.loose_grad_tol
                break

    if not converged and cost >= initial_cost and initial_cost > 0:
        raise DivergedError(
            f"reprojection error did not decrease in {iterations} iterations ({cost:.3e} px^2)"
        )
    return PnpResult(
        pose=pose,
        residual=reprojection_error(c, K, pose),
        converged=converged,
        iterations=iterations,
        planar=is_planar(c.points3d),
        gradient_norm=float(np.max(np.abs(grad))),
    )


# === Implicit backward ===
def pnp_backward(
    c: Correspondences, K: CameraIntrinsics, result: PnpResult, pose_cotangent
) -> np.ndarray:
    """
    Cotangent on the interleaved 2D points given a cotangent on the solved pose.

    From F(o, T*) = 0: dg/do = -(dF/dT)^-1 dF/do with dF/dT ~ 2 J^T J and dF/do = -2 J^T,
    so the pulled-back cotangent is J (J^T J)^-1 c.
    """
    if not result.converged:
        raise DivergedError(
            f"implicit backward needs a converged PnP solution ({result.iterations} iterations)"
        )
    pose_cotangent = np.asarray(pose_cotangent, dtype=float).reshape(6)
    _, jac = linearize(c, K, result.pose)
    d_f_d_t = 2.0 * jac.T @ jac
    if np.linalg.cond(d_f_d_t) > MAX_CONDITION:
        raise SingularHessianError("PnP Hessian is singular (degenerate keypoint geometry)")
    d_f_d_o = -2.0 * jac.T
    return -d_f_d_o.T @ np.linalg.solve(d_f_d_t.T, pose_cotangent)


def pnp_node(
    c: Correspondences, K: CameraIntrinsics, init: SE3Pose | None = None
) -> VjpNode:
    """Solve and package the implicit backward as a VjpNode over (n, 2) keypoints."""
    result = pnp_solve(c, K, init)
    return VjpNode(
        result, lambda cot: pnp_backward(c, K, result, cot).reshape(-1, 2)
    )
