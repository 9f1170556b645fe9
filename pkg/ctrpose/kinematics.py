"""
Module: kinematics.py
Description:
    Articulated robot model: JSON/OBJ loading, forward kinematics over the joint chain,
    keypoints at frame origins, camera-frame mesh assembly with its pose VJP, and the
    geometric Jacobian used by inverse kinematics.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Frame 0 is the robot base; joint entry j produces frame j + 1. Fixed joints add rigid
    frames (tool, housings) without consuming a joint value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ctrpose.diff import VjpNode
from ctrpose.errors import InvalidRobotError, JointLimitError, ValidationError
from ctrpose.geometry import SE3Pose, pose_vjp

JOINT_TYPES = ("revolute", "prismatic", "fixed")
MIN_TRIANGLE_AREA = 1e-12
LIMIT_SLACK = 1e-12

REFERENCE_ROBOT = Path(__file__).resolve().parent.parent / "robots" / "arm3.json"


# === Meshes ===
@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidRobotError("triangle index out of range")
        if triangles.size:
            a, b, c = (vertices[triangles[:, i]] for i in range(3))
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            bad = int(np.sum(areas <= MIN_TRIANGLE_AREA))
            if bad:
                raise InvalidRobotError(f"{bad} degenerate triangle(s)")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def transformed(self, pose: SE3Pose) -> TriangleMesh:
        return TriangleMesh(pose.transform_points(self.vertices), self.triangles)

    def scaled_about_centroid(self, factor: float) -> TriangleMesh:
        centroid = self.vertices.mean(axis=0)
        return TriangleMesh(centroid + factor * (self.vertices - centroid), self.triangles)

    @staticmethod
    def concatenate(meshes) -> TriangleMesh:
        vertices, triangles, offset = [], [], 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            triangles.append(mesh.triangles + offset)
            offset += mesh.n_vertices
        if not vertices:
            return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriangleMesh(np.concatenate(vertices), np.concatenate(triangles))


def load_obj(path) -> TriangleMesh:
    """Read v/f records of an ASCII OBJ file; polygons are fan-triangulated."""
    vertices, triangles = [], []
    with open(Path(path), "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                for k in range(1, len(idx) - 1):
                    triangles.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(triangles).reshape(-1, 3))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def box_mesh(lower, upper) -> TriangleMesh:
    lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    corners = np.array(
        [[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)], dtype=float
    )
    faces = [
        (0, 2, 3, 1),  # corner index bits are (x, y, z)
        (4, 5, 7, 6),
        (0, 1, 5, 4),
        (2, 6, 7, 3),
        (0, 4, 6, 2),
        (1, 3, 7, 5),
    ]
    triangles = []
    for a, b, c, d in faces:
        triangles += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, triangles)


def cylinder_mesh(radius: float, span, axis: str = "z", segments: int = 16, center=(0, 0, 0)):
    """Closed cylinder along a coordinate axis between span[0] and span[1]."""
    if axis not in ("x", "y", "z"):
        raise InvalidRobotError(f"cylinder axis must be x, y or z, got {axis!r}")
    a = "xyz".index(axis)
    u, w = [k for k in range(3) if k != a]
    center = np.asarray(center, dtype=float)
    angles = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.zeros((segments, 3))
    ring[:, u] = radius * np.cos(angles)
    ring[:, w] = radius * np.sin(angles)
    bottom, top = ring.copy(), ring.copy()
    bottom[:, a], top[:, a] = span[0], span[1]
    caps = np.zeros((2, 3))
    caps[0, a], caps[1, a] = span[0], span[1]
    vertices = np.concatenate([bottom, top, caps]) + center
    triangles = []
    cb, ct = 2 * segments, 2 * segments + 1
    for i in range(segments):
        j = (i + 1) % segments
        triangles += [(i, j, segments + j), (i, segments + j, segments + i)]
        triangles += [(cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(vertices, triangles)


def _mesh_from_entry(entry, base_dir: Path) -> TriangleMesh | None:
    if entry is None:
        return None
    if isinstance(entry, str):
        return load_obj(base_dir / entry)
    kind = entry.get("primitive")
    if kind == "box":
        return box_mesh(entry["min"], entry["max"])
    if kind == "cylinder":
        return cylinder_mesh(
            entry["radius"],
            entry["span"],
            entry.get("axis", "z"),
            int(entry.get("segments", 16)),
            entry.get("center", (0.0, 0.0, 0.0)),
        )
    raise InvalidRobotError(f"unknown mesh entry: {entry!r}")


# === Robot model ===
@dataclass(frozen=True, eq=False)
class Joint:
    type: str
    axis: np.ndarray
    origin: SE3Pose
    limits: tuple[float, float] = (-np.inf, np.inf)
    name: str = ""

    def __post_init__(self):
        if self.type not in JOINT_TYPES:
            raise InvalidRobotError(f"joint type must be one of {JOINT_TYPES}, got {self.type!r}")
        axis = np.array(self.axis, dtype=float).reshape(3)
        if self.type != "fixed" and abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise InvalidRobotError("joint axis must be unit-norm")
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)
        lo, hi = float(self.limits[0]), float(self.limits[1])
        if lo > hi:
            raise InvalidRobotError("joint lower limit exceeds upper limit")
        object.__setattr__(self, "limits", (lo, hi))

    @property
    def actuated(self) -> bool:
        return self.type != "fixed"

    def motion(self, value: float) -> SE3Pose:
        if self.type == "revolute":
            return SE3Pose(Rotation.from_rotvec(self.axis * value).as_matrix(), np.zeros(3))
        if self.type == "prismatic":
            return SE3Pose(np.eye(3), self.axis * value)
        return SE3Pose.identity()


@dataclass(frozen=True, eq=False)
class RobotModel:
    joints: tuple
    link_meshes: tuple
    keypoint_frames: tuple
    name: str = "robot"

    def __post_init__(self):
        joints = tuple(self.joints)
        meshes = list(self.link_meshes)
        n_frames = len(joints) + 1
        if len(meshes) > n_frames:
            raise InvalidRobotError(f"{len(meshes)} meshes for {n_frames} frames")
        meshes += [None] * (n_frames - len(meshes))
        frames = tuple(int(i) for i in self.keypoint_frames)
        if not frames:
            raise InvalidRobotError("robot needs at least one keypoint frame")
        if min(frames) < 0 or max(frames) >= n_frames:
            raise InvalidRobotError("keypoint frame index out of range")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "link_meshes", tuple(meshes))
        object.__setattr__(self, "keypoint_frames", frames)

    @property
    def n_frames(self) -> int:
        return len(self.joints) + 1

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_frames)

    @property
    def actuated_joints(self) -> list[int]:
        return [j for j, joint in enumerate(self.joints) if joint.actuated]

    @property
    def n_dof(self) -> int:
        return len(self.actuated_joints)

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([self.joints[j].limits[0] for j in self.actuated_joints])

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([self.joints[j].limits[1] for j in self.actuated_joints])

    @property
    def ee_frame(self) -> int:
        return self.n_frames - 1

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower_limits, self.upper_limits)


@dataclass(frozen=True, eq=False)
class JointConfig:
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        q = np.array(self.q, dtype=float).ravel()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)


def _as_q(model: RobotModel, q) -> np.ndarray:
    if isinstance(q, JointConfig):
        q = q.q
    q = np.asarray(q, dtype=float).ravel()
    if q.size != model.n_dof:
        raise ValidationError(f"expected {model.n_dof} joint values, got {q.size}")
    if np.any(q < model.lower_limits - LIMIT_SLACK) or np.any(q > model.upper_limits + LIMIT_SLACK):
        raise JointLimitError(f"joint values {np.round(q, 4).tolist()} outside declared limits")
    return q


def robot_from_dict(data: dict, base_dir=".") -> RobotModel:
    base_dir = Path(base_dir)
    joints = []
    for i, spec in enumerate(data.get("joints", [])):
        limits = spec.get("limits") or [-np.inf, np.inf]
        joints.append(
            Joint(
                type=spec.get("type", "revolute"),
                axis=spec.get("axis", [0.0, 0.0, 1.0]),
                origin=SE3Pose.from_dict(spec.get("origin", {})),
                limits=(float(limits[0]), float(limits[1])),
                name=spec.get("name", f"joint{i}"),
            )
        )
    meshes = [_mesh_from_entry(entry, base_dir) for entry in data.get("meshes", [])]
    frames = data.get("keypoint_frames", list(range(len(joints) + 1)))
    return RobotModel(tuple(joints), tuple(meshes), tuple(frames), data.get("name", "robot"))


def load_robot(path=REFERENCE_ROBOT) -> RobotModel:
    path = Path(path)
    if not path.exists():
        raise InvalidRobotError(f"robot description not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return robot_from_dict(json.load(f), path.parent)


# === Kinematics ===
def fk_frames(model: RobotModel, q) -> list[SE3Pose]:
    """T^b_i for every frame i (frame 0 is the base)."""
    q = _as_q(model, q)
    frames = [SE3Pose.identity()]
    k = 0
    for joint in model.joints:
        value = 0.0
        if joint.actuated:
            value = q[k]
            k += 1
        frames.append(frames[-1].compose(joint.origin).compose(joint.motion(value)))
    return frames


def keypoints_3d(model: RobotModel, q) -> np.ndarray:
    """Keypoints p_i = T^b_i(q) [0, 0, 0, 1]^T, shape (n, 3)."""
    frames = fk_frames(model, q)
    return np.array([frames[i].translation for i in model.keypoint_frames])


def assemble_base_mesh(model: RobotModel, q) -> TriangleMesh:
    frames = fk_frames(model, q)
    parts = [
        mesh.transformed(frames[i]) for i, mesh in enumerate(model.link_meshes) if mesh is not None
    ]
    return TriangleMesh.concatenate(parts)


def assemble_camera_mesh(model: RobotModel, q, pose: SE3Pose) -> TriangleMesh:
    """Vertices v^c = T^c_b T^b_n(q) v^n with per-link topology reindexed and concatenated."""
    return assemble_base_mesh(model, q).transformed(pose)


def camera_mesh_vjp(mesh: TriangleMesh, vertex_cotangent) -> np.ndarray:
    """Pose cotangent (omega, v) of a camera-frame mesh given per-vertex cotangents."""
    return pose_vjp(mesh.vertices, np.asarray(vertex_cotangent, dtype=float).reshape(-1, 3))


def camera_mesh_node(model: RobotModel, q, pose: SE3Pose) -> VjpNode:
    mesh = assemble_camera_mesh(model, q, pose)
    return VjpNode(mesh, lambda cot: camera_mesh_vjp(mesh, cot))


def frame_jacobian(model: RobotModel, q, frame: int | None = None) -> np.ndarray:
    """Geometric Jacobian (6, n_dof) of a frame origin in the base frame: [linear; angular]."""
    frames = fk_frames(model, q)
    frame = model.ee_frame if frame is None else frame
    target = frames[frame].translation
    jac = np.zeros((6, model.n_dof))
    for col, j in enumerate(model.actuated_joints):
        if j + 1 > frame:
            break
        joint = model.joints[j]
        axis = frames[j + 1].rotation @ joint.axis
        if joint.type == "revolute":
            jac[:3, col] = np.cross(axis, target - frames[j + 1].translation)
            jac[3:, col] = axis
        else:
            jac[:3, col] = axis
    return jac


def planar_arm(link_lengths=(1.0, 1.0), limits=(-np.pi, np.pi)) -> RobotModel:
    """Planar revolute chain about z with keypoints at the joints and the tip."""
    joints = []
    offset = 0.0
    for length in link_lengths:
        joints.append(
            Joint("revolute", (0.0, 0.0, 1.0), SE3Pose.from_translation((offset, 0.0, 0.0)), limits)
        )
        offset = length
    joints.append(Joint("fixed", (0.0, 0.0, 1.0), SE3Pose.from_translation((offset, 0.0, 0.0))))
    meshes = [None] + [
        box_mesh((0.0, -0.05, -0.05), (length, 0.05, 0.05)) for length in link_lengths
    ]
    frames = tuple(range(1, len(joints) + 1))
    return RobotModel(tuple(joints), tuple(meshes), frames, "planar")
