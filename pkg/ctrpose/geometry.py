"""
Module: geometry.py
Description:
    SE(3) pose algebra, the axis-angle tangent chart used by every optimizer, and pinhole
    projection with its analytic Jacobians.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Tangent vectors are ordered (omega, v). Pose perturbations act on the left:
    T <- exp(xi) * T, so the derivative of a transformed point p' is [-[p']x, I].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ctrpose.errors import BehindCameraError, InvalidPoseError, ValidationError

Z_MIN = 1e-6
SMALL_ANGLE = 1e-8
ORTHONORMAL_TOL = 1e-6


def _frozen(array, shape) -> np.ndarray:
    out = np.array(array, dtype=float).reshape(shape)
    out.setflags(write=False)
    return out


def skew(w) -> np.ndarray:
    """Cross-product matrix [w]x."""
    wx, wy, wz = np.asarray(w, dtype=float)
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform; maps points from its source frame into its target frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = _frozen(self.rotation, (3, 3))
        translation = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidPoseError("pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidPoseError("rotation is not orthonormal")
        if np.linalg.det(rotation) <= 0:
            raise InvalidPoseError("rotation has negative determinant")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> SE3Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> SE3Pose:
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_translation(cls, translation) -> SE3Pose:
        return cls(np.eye(3), translation)

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: SE3Pose) -> SE3Pose:
        return SE3Pose(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> SE3Pose:
        rt = self.rotation.T
        return SE3Pose(rt, -rt @ self.translation)

    def transform_points(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> SE3Pose:
        rotation = data.get("rotation", np.eye(3).tolist())
        rotation = np.asarray(rotation, dtype=float)
        if rotation.shape == (3,):
            rotation = Rotation.from_rotvec(rotation).as_matrix()
        return cls(rotation, data.get("translation", [0.0, 0.0, 0.0]))

    def __matmul__(self, other: SE3Pose) -> SE3Pose:
        return self.compose(other)


@dataclass(frozen=True, eq=False)
class SE3Tangent:
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(self.omega, (3,)))
        object.__setattr__(self, "v", _frozen(self.v, (3,)))

    @classmethod
    def from_vector(cls, xi) -> SE3Tangent:
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


def _left_jacobian_coeffs(theta: float) -> tuple[float, float]:
    if theta < SMALL_ANGLE:
        return 0.5 - theta**2 / 24.0, 1.0 / 6.0 - theta**2 / 120.0
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return b, c


def se3_exp(xi) -> SE3Pose:
    """Exponential map of a tangent (SE3Tangent or 6-vector (omega, v))."""
    if isinstance(xi, SE3Tangent):
        xi = xi.as_vector()
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    b, c = _left_jacobian_coeffs(theta)
    if theta < SMALL_ANGLE:
        rotation = np.eye(3) + w + 0.5 * w @ w
        # re-orthonormalize the truncated series
        u, _, vt = np.linalg.svd(rotation)
        rotation = u @ vt
    else:
        rotation = Rotation.from_rotvec(omega).as_matrix()
    left = np.eye(3) + b * w + c * w @ w
    return SE3Pose(rotation, left @ v)


def se3_log(pose: SE3Pose) -> SE3Tangent:
    omega = Rotation.from_matrix(pose.rotation).as_rotvec()
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0
    else:
        coeff = (1.0 - theta * np.sin(theta) / (4.0 * np.sin(0.5 * theta) ** 2)) / theta**2
    left_inv = np.eye(3) - 0.5 * w + coeff * w @ w
    return SE3Tangent(omega, left_inv @ pose.translation)


def pose_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    return a.compose(b)


def pose_invert(a: SE3Pose) -> SE3Pose:
    return a.inverse()


def retract(pose: SE3Pose, xi) -> SE3Pose:
    """Left update exp(xi) * pose."""
    return se3_exp(xi).compose(pose)


def rotation_angle(rotation) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    return float(np.linalg.norm(Rotation.from_matrix(np.asarray(rotation)).as_rotvec()))


def look_at(eye, target, up=(0.0, 0.0, 1.0), roll: float = 0.0) -> SE3Pose:
    """
    Camera pose T^c_w for a camera at `eye` whose optical axis passes through `target`.
    Uses the OpenCV convention (x right, y down, z forward); `roll` spins about the axis.
    """
    eye = np.asarray(eye, dtype=float)
    z_axis = np.asarray(target, dtype=float) - eye
    norm = np.linalg.norm(z_axis)
    if norm < 1e-12:
        raise ValidationError("look_at: eye and target coincide")
    z_axis /= norm
    down = -np.asarray(up, dtype=float)
    x_axis = np.cross(down, z_axis)
    if np.linalg.norm(x_axis) < 1e-9:
        # optical axis parallel to up; any perpendicular reference works
        x_axis = np.cross(np.array([0.0, 1.0, 0.0]), z_axis)
        if np.linalg.norm(x_axis) < 1e-9:
            x_axis = np.cross(np.array([1.0, 0.0, 0.0]), z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    cam_to_world = np.stack([x_axis, y_axis, z_axis], axis=1)
    world_to_cam = SE3Pose(cam_to_world.T, -cam_to_world.T @ eye)
    if roll:
        spin = SE3Pose(Rotation.from_rotvec([0.0, 0.0, roll]).as_matrix(), np.zeros(3))
        world_to_cam = spin.compose(world_to_cam)
    return world_to_cam


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics of the same camera sampled at `factor` times the resolution."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CameraIntrinsics:
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                width=int(data["width"]),
                height=int(data["height"]),
            )
        except KeyError as e:
            raise ValidationError(f"intrinsics missing field {e}") from e

    @classmethod
    def from_json(cls, path) -> CameraIntrinsics:
        with open(Path(path), "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def project_points(points, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (N, 3) to pixels (N, 2)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    z = points[:, 2]
    if np.any(z <= Z_MIN):
        raise BehindCameraError(f"{int(np.sum(z <= Z_MIN))} point(s) at or behind z_min")
    return np.stack([K.fx * points[:, 0] / z + K.cx, K.fy * points[:, 1] / z + K.cy], axis=1)


def project_point(p, K: CameraIntrinsics) -> np.ndarray:
    return project_points(np.asarray(p, dtype=float).reshape(1, 3), K)[0]


def projection_jacobians(points, K: CameraIntrinsics) -> np.ndarray:
    """d pi / d p for each camera-frame point, shape (N, 2, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    if np.any(z <= Z_MIN):
        raise BehindCameraError("cannot differentiate projection behind the camera")
    jac = np.zeros((len(points), 2, 3))
    jac[:, 0, 0] = K.fx / z
    jac[:, 0, 2] = -K.fx * x / z**2
    jac[:, 1, 1] = K.fy / z
    jac[:, 1, 2] = -K.fy * y / z**2
    return jac


def point_pose_jacobians(points) -> np.ndarray:
    """d p' / d xi of transformed points p' under a left perturbation, shape (N, 3, 6)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    jac = np.zeros((len(points), 3, 6))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    # -[p']x
    jac[:, 0, 1], jac[:, 0, 2] = z, -y
    jac[:, 1, 0], jac[:, 1, 2] = -z, x
    jac[:, 2, 0], jac[:, 2, 1] = y, -x
    jac[:, :, 3:] = np.eye(3)
    return jac


def pose_projection_jacobians(points, K: CameraIntrinsics) -> np.ndarray:
    """d pi(exp(xi) p') / d xi at xi = 0 for camera-frame points p', shape (N, 2, 6)."""
    return projection_jacobians(points, K) @ point_pose_jacobians(points)


def pose_vjp(points, cotangents) -> np.ndarray:
    """Pull (N, 3) cotangents on transformed points back to the 6-vector pose tangent."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cotangents = np.atleast_2d(np.asarray(cotangents, dtype=float))
    return np.concatenate(
        [np.cross(points, cotangents).sum(axis=0), cotangents.sum(axis=0)]
    )
