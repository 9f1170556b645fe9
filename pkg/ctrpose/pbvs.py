"""
Module: pbvs.py
Description:
    Position-based visual servoing simulator. Each control cycle estimates the
    camera-to-robot pose, moves the camera-frame goal into the robot base frame, solves IK
    for it and drives the joints toward the solution with a proportional, rate-limited law.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Joint controller at 120 Hz, pose estimate refreshed every 4th step (30 Hz).
    Estimator and IK faults hold the joints for that cycle and are recorded in the trace.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from ctrpose.errors import CtrposeError, UnreachableError, ValidationError
from ctrpose.geometry import CameraIntrinsics, SE3Pose, project_points, rotation_angle
from ctrpose.kinematics import (
    JointConfig,
    RobotModel,
    fk_frames,
    frame_jacobian,
    keypoints_3d,
)
from ctrpose.pnp import Correspondences, pnp_solve

PoseEstimator = Callable[["ServoState"], SE3Pose]
PosePath = Callable[[float], SE3Pose]


# === Inverse kinematics ===
@dataclass(frozen=True, eq=False)
class IkResult:
    q: JointConfig
    converged: bool
    position_error: float
    orientation_error: float
    iterations: int


def _ee_errors(model: RobotModel, q, target: SE3Pose) -> tuple[np.ndarray, np.ndarray]:
    ee = fk_frames(model, q)[model.ee_frame]
    e_pos = target.translation - ee.translation
    e_rot = Rotation.from_matrix(target.rotation @ ee.rotation.T).as_rotvec()
    return e_pos, e_rot


def ik_solve(
    model: RobotModel,
    target: SE3Pose,
    q0,
    max_iterations: int = 500,
    damping: float = 1e-2,
    position_tol: float = 1e-5,
    orientation_tol: float = 1e-4,
    unreachable_tol: float = 1e-2,
    max_step: float = 0.5,
) -> IkResult:
    """
    Damped least squares on the end-effector geometric Jacobian. Robots with fewer than six
    actuated joints track position only; orientation error is still reported.
    """
    if not (np.all(np.isfinite(target.rotation)) and np.all(np.isfinite(target.translation))):
        raise ValidationError("IK target must be finite")
    q = model.clamp(q0.q if isinstance(q0, JointConfig) else q0)
    full = model.n_dof >= 6
    best_q, best_err = q, np.inf
    iterations = 0
    for iterations in range(max_iterations + 1):
        e_pos, e_rot = _ee_errors(model, q, target)
        pos_err, rot_err = float(np.linalg.norm(e_pos)), float(np.linalg.norm(e_rot))
        if pos_err < best_err:
            best_q, best_err, best_rot = q, pos_err, rot_err
        if pos_err < position_tol and (not full or rot_err < orientation_tol):
            return IkResult(JointConfig(q), True, pos_err, rot_err, iterations)
        if iterations == max_iterations:
            break
        jac = frame_jacobian(model, q)
        err = np.concatenate([e_pos, e_rot])
        if not full:
            jac, err = jac[:3], e_pos
        dq = jac.T @ np.linalg.solve(jac @ jac.T + damping**2 * np.eye(len(err)), err)
        norm = np.linalg.norm(dq)
        if norm > max_step:
            dq *= max_step / norm
        q = model.clamp(q + dq)
    if best_err > unreachable_tol:
        raise UnreachableError(f"IK target out of reach (closest {best_err:.4f} m)")
    return IkResult(JointConfig(best_q), False, best_err, best_rot, iterations)


def ee_pose(model: RobotModel, q) -> SE3Pose:
    return fk_frames(model, q)[model.ee_frame]


# === Simulation state ===
@dataclass(frozen=True)
class ServoConfig:
    control_hz: float = 120.0
    refresh_every: int = 4
    rate_limit: float = 1.0

    def __post_init__(self):
        if not self.control_hz > 0 or self.refresh_every < 1 or not self.rate_limit > 0:
            raise ValidationError("servo needs control_hz > 0, refresh_every >= 1, rate_limit > 0")

    @property
    def dt(self) -> float:
        return 1.0 / self.control_hz


@dataclass(frozen=True, eq=False)
class ServoState:
    q: np.ndarray
    goal_cam: SE3Pose
    cam_pose_true: SE3Pose
    t: float = 0.0
    step: int = 0
    estimate: SE3Pose | None = None
    q_goal: np.ndarray | None = None
    camera_path: PosePath | None = None
    goal_path: PosePath | None = None
    fault: str | None = None


@dataclass
class ServoRecord:
    t: float
    translational_err: float
    rotational_err: float
    q: list[float]
    fault: str | None = None


@dataclass
class ServoTrace:
    records: list[ServoRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def translational(self) -> np.ndarray:
        return np.array([r.translational_err for r in self.records])

    @property
    def rotational(self) -> np.ndarray:
        return np.array([r.rotational_err for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def faults(self) -> list[tuple[float, str]]:
        return [(r.t, r.fault) for r in self.records if r.fault]

    def time_to_reach(self, threshold: float) -> float | None:
        hits = np.nonzero(self.translational < threshold)[0]
        return None if hits.size == 0 else float(self.records[hits[0]].t)

    def write_csv(self, path) -> Path:
        path = Path(path)
        n_dof = len(self.records[0].q) if self.records else 0
        fieldnames = ["t", "trans_err", "rot_err"] + [f"q{i}" for i in range(n_dof)] + ["fault"]
        with open(path, "w", newline="", encoding="utf-8") as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
            writer.writeheader()
            for r in self.records:
                row = {"t": repr(r.t), "trans_err": repr(r.translational_err)}
                row["rot_err"] = repr(r.rotational_err)
                row.update({f"q{i}": repr(v) for i, v in enumerate(r.q)})
                row["fault"] = r.fault or ""
                writer.writerow(row)
        return path


def goal_in_base(estimate: SE3Pose, goal_cam: SE3Pose) -> SE3Pose:
    """T^b_g = (T^c_b)^-1 T^c_g."""
    return estimate.inverse().compose(goal_cam)


def servo_errors(model: RobotModel, state: ServoState) -> tuple[float, float]:
    """Translational (m) and rotational (rad) end-effector error against the goal."""
    ee_cam = state.cam_pose_true.compose(ee_pose(model, state.q))
    trans = float(np.linalg.norm(ee_cam.translation - state.goal_cam.translation))
    rot = rotation_angle(state.goal_cam.rotation @ ee_cam.rotation.T)
    return trans, rot


def servo_step(
    state: ServoState,
    estimator: PoseEstimator,
    gain: float,
    model: RobotModel,
    cfg: ServoConfig | None = None,
) -> ServoState:
    """
    Advance one control tick. The estimate and IK goal refresh every `refresh_every` ticks;
    a failed refresh drops the goal, so the joints hold until an estimate succeeds.
    """
    cfg = cfg or ServoConfig()
    q_goal, estimate, fault = state.q_goal, state.estimate, None
    if q_goal is None or state.step % cfg.refresh_every == 0:
        try:
            estimate = estimator(state)
            ik = ik_solve(model, goal_in_base(estimate, state.goal_cam), state.q)
            q_goal = ik.q.q
        except CtrposeError as e:
            q_goal, fault = None, type(e).__name__

    if q_goal is None:
        q_next = state.q
    else:
        dq = gain * (q_goal - state.q)
        limit = cfg.rate_limit * cfg.dt
        peak = np.max(np.abs(dq)) if dq.size else 0.0
        if peak > limit:
            dq *= limit / peak
        q_next = model.clamp(state.q + dq)

    t_next = state.t + cfg.dt
    cam = state.camera_path(t_next) if state.camera_path else state.cam_pose_true
    goal = state.goal_path(t_next) if state.goal_path else state.goal_cam
    return replace(
        state,
        q=q_next,
        t=t_next,
        step=state.step + 1,
        estimate=estimate,
        q_goal=q_goal,
        cam_pose_true=cam,
        goal_cam=goal,
        fault=fault,
    )


def run_servo(
    initial: ServoState,
    estimator: PoseEstimator,
    gain: float,
    duration: float,
    model: RobotModel,
    cfg: ServoConfig | None = None,
    on_step: Callable[[ServoRecord], None] | None = None,
) -> ServoTrace:
    if not duration > 0:
        raise ValidationError("servo duration must be positive")
    cfg = cfg or ServoConfig()
    trace = ServoTrace()
    state = initial
    for _ in range(int(round(duration * cfg.control_hz))):
        state = servo_step(state, estimator, gain, model, cfg)
        trans, rot = servo_errors(model, state)
        record = ServoRecord(state.t, trans, rot, state.q.tolist(), state.fault)
        trace.records.append(record)
        if on_step is not None:
            on_step(record)
    return trace


# === Estimators ===
def ground_truth_estimator(state: ServoState) -> SE3Pose:
    return state.cam_pose_true


@dataclass
class BiasedEstimator:
    """Ground truth shifted by a constant camera-frame translation of the given magnitude."""

    magnitude: float
    seed: int = 0

    def __post_init__(self):
        direction = np.random.default_rng(self.seed).normal(size=3)
        self.offset = self.magnitude * direction / np.linalg.norm(direction)

    def __call__(self, state: ServoState) -> SE3Pose:
        return SE3Pose.from_translation(self.offset).compose(state.cam_pose_true)


@dataclass(eq=False)
class KeypointErrorModel:
    bias: np.ndarray
    spread: np.ndarray

    def to_dict(self) -> dict:
        return {"bias": self.bias.tolist(), "spread": self.spread.tolist()}


def fit_keypoint_error_model(predicted, labels) -> KeypointErrorModel:
    """Per-keypoint mean and spread of (predicted - label) over scenes, in pixels."""
    errors = np.asarray(predicted, dtype=float) - np.asarray(labels, dtype=float)
    if errors.ndim != 3 or errors.shape[-1] != 2:
        raise ValidationError("keypoint arrays must have shape (scenes, n, 2)")
    return KeypointErrorModel(errors.mean(axis=0), errors.std(axis=0))


class KeypointPnpEstimator:
    """
    Simulated keypoint detector plus PnP. True keypoints are projected, perturbed by the
    fitted per-keypoint error model and solved with PnP warm-started from the last estimate.
    """

    def __init__(
        self,
        model: RobotModel,
        K: CameraIntrinsics,
        error_model: KeypointErrorModel,
        seed: int = 0,
    ):
        self.model = model
        self.K = K
        self.error_model = error_model
        self.rng = np.random.default_rng(seed)
        self.last: SE3Pose | None = None

    def __call__(self, state: ServoState) -> SE3Pose:
        points = keypoints_3d(self.model, state.q)
        pixels = project_points(state.cam_pose_true.transform_points(points), self.K)
        noise = self.rng.normal(size=pixels.shape) * self.error_model.spread
        observed = pixels + self.error_model.bias + noise
        result = pnp_solve(Correspondences(observed, points), self.K, init=self.last)
        self.last = result.pose
        return result.pose


# === Camera and goal motion ===
def orbit_camera(cam_pose: SE3Pose, rate: float = 0.05) -> PosePath:
    """Camera circling the base z axis at `rate` rad/s: T^c_b(t) = T^c_b(0) Rz(-rate t)."""

    def path(t: float) -> SE3Pose:
        spin = Rotation.from_rotvec([0.0, 0.0, -rate * t]).as_matrix()
        return cam_pose.compose(SE3Pose(spin, np.zeros(3)))

    return path


def circle_goal(goal_cam: SE3Pose, radius: float = 0.05, rate: float = 0.5) -> PosePath:
    """Goal moving on a circle parallel to the image plane, starting at `goal_cam`."""

    def path(t: float) -> SE3Pose:
        shift = radius * np.array([np.cos(rate * t) - 1.0, np.sin(rate * t), 0.0])
        return SE3Pose.from_translation(shift).compose(goal_cam)

    return path


def random_servo_setup(
    model: RobotModel,
    cam_pose: SE3Pose,
    q0,
    seed: int,
    goal_offset: float = 0.3,
) -> ServoState:
    """Start at q0 with a reachable goal: the end effector at a nearby random configuration."""
    rng = np.random.default_rng(seed)
    q0 = model.clamp(q0)
    q_target = model.clamp(q0 + rng.uniform(-goal_offset, goal_offset, size=q0.shape))
    goal_cam = cam_pose.compose(ee_pose(model, q_target))
    return ServoState(q=q0, goal_cam=goal_cam, cam_pose_true=cam_pose)
