"""
Module: softrender.py
Description:
    Differentiable silhouette rasterizer. Each pixel blends its k most influential projected
    triangles through a sigmoid of the signed squared distance to the triangle boundary and
    aggregates them as S = 1 - prod_j (1 - D_j). Gradients flow back to the camera-frame
    vertices and from there to the 6-DOF pose.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    Pixel (row i, column j) has its center at image coordinates (u, v) = (j, i).
    RenderConfig.sigma is expressed in normalised image units; the pixel-space softness is
    sigma * (W / 2) ** 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.special import expit, log_expit

from ctrpose.diff import VjpNode
from ctrpose.errors import EmptyFrustumError, ShapeMismatchError, ValidationError
from ctrpose.geometry import Z_MIN, CameraIntrinsics
from ctrpose.kinematics import TriangleMesh, camera_mesh_vjp

# H x W grid of soft occupancies in [0, 1]
SilhouetteImage = np.ndarray


@dataclass(frozen=True)
class RenderConfig:
    k_nearest: int = 20
    sigma: float = 1e-4
    blur_radius: float = 2.0
    max_pairs: int = 200_000

    def __post_init__(self):
        if self.k_nearest < 1:
            raise ValidationError("k_nearest must be >= 1")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.blur_radius < 0:
            raise ValidationError("blur_radius must be non-negative")

    def pixel_sigma(self, width: int) -> float:
        return self.sigma * (0.5 * width) ** 2

    def to_dict(self) -> dict:
        return {"k_nearest": self.k_nearest, "sigma": self.sigma, "blur_radius": self.blur_radius}


# === Clipping and projection ===
@dataclass(frozen=True, eq=False)
class _ClippedMesh:
    """Render vertices as fixed blends (1 - t) v[a] + t v[b] of camera-frame vertices."""

    src_a: np.ndarray
    src_b: np.ndarray
    t: np.ndarray
    triangles: np.ndarray

    def points(self, vertices: np.ndarray) -> np.ndarray:
        t = self.t[:, None]
        return (1.0 - t) * vertices[self.src_a] + t * vertices[self.src_b]


def _clip_mesh(mesh: TriangleMesh) -> _ClippedMesh:
    vertices, triangles = mesh.vertices, mesh.triangles
    z = vertices[:, 2]
    front = z > Z_MIN
    n_front = front[triangles].sum(axis=1)
    src_a = list(range(mesh.n_vertices))
    src_b = list(range(mesh.n_vertices))
    weights = [0.0] * mesh.n_vertices
    kept = [tri for tri in triangles[n_front == 3]]
    for tri in triangles[(n_front > 0) & (n_front < 3)]:
        polygon = []
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            if front[a]:
                polygon.append(a)
            if front[a] != front[b]:
                f, back = (a, b) if front[a] else (b, a)
                # t is held fixed in the backward pass
                t = (z[f] - Z_MIN) / (z[f] - z[back])
                src_a.append(f)
                src_b.append(back)
                weights.append(float(t))
                polygon.append(len(src_a) - 1)
        for k in range(1, len(polygon) - 1):
            kept.append([polygon[0], polygon[k], polygon[k + 1]])
    return _ClippedMesh(
        np.asarray(src_a, dtype=np.int64),
        np.asarray(src_b, dtype=np.int64),
        np.asarray(weights, dtype=float),
        np.asarray(kept, dtype=np.int64).reshape(-1, 3),
    )


def _project(points: np.ndarray, K: CameraIntrinsics):
    x, y = points[:, 0], points[:, 1]
    z = np.maximum(points[:, 2], Z_MIN)
    uv = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    jac = np.zeros((len(points), 2, 3))
    jac[:, 0, 0] = K.fx / z
    jac[:, 0, 2] = -K.fx * x / z**2
    jac[:, 1, 1] = K.fy / z
    jac[:, 1, 2] = -K.fy * y / z**2
    return uv, jac


def _edge_terms(px: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Squared point-to-segment distance, segment parameter, offset and edge cross product."""
    e = b - a
    w = px[:, None, :] - a[None, :, :]
    denom = np.maximum(np.sum(e * e, axis=1), 1e-12)
    t = np.clip(np.einsum("ptc,tc->pt", w, e) / denom, 0.0, 1.0)
    diff = w - t[..., None] * e[None, :, :]
    d2 = np.einsum("ptc,ptc->pt", diff, diff)
    cross = e[None, :, 0] * w[..., 1] - e[None, :, 1] * w[..., 0]
    return d2, t, diff, cross


def _row_chunks(height: int, width: int, n_tri: int, max_pairs: int):
    rows = max(1, max_pairs // max(1, width * n_tri))
    for r0 in range(0, height, rows):
        yield r0, min(height, r0 + rows)


def _pixel_centers(r0: int, r1: int, width: int) -> np.ndarray:
    rows, cols = np.arange(r0, r1, dtype=float), np.arange(width, dtype=float)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def _gather(a: np.ndarray, sel: np.ndarray) -> np.ndarray:
    """Gather along the triangle axis of a (P, T, ...) array with (P, k) indices."""
    index = sel.reshape(sel.shape + (1,) * (a.ndim - 2))
    return np.take_along_axis(a, index, axis=1)


# === Soft rasterization ===
@dataclass(eq=False)
class _ChunkRecord:
    pixels: np.ndarray  # flat pixel indices (P,)
    tri: np.ndarray  # selected triangle ids (P, k)
    valid: np.ndarray
    inside: np.ndarray
    edge: np.ndarray
    t: np.ndarray
    diff: np.ndarray  # (P, k, 2)
    soft: np.ndarray  # D_j


class RenderContext:
    """Forward render of one camera-frame mesh, kept for the backward pass."""

    def __init__(self, mesh: TriangleMesh, K: CameraIntrinsics, cfg: RenderConfig):
        if mesh.n_triangles == 0:
            raise ValidationError("cannot render an empty mesh")
        if not np.any(mesh.vertices[:, 2] > Z_MIN):
            raise EmptyFrustumError("no mesh vertex lies in front of the camera")
        self.mesh, self.K, self.cfg = mesh, K, cfg
        self.height, self.width = K.height, K.width
        self.sigma_px = cfg.pixel_sigma(K.width)
        self.clipped = _clip_mesh(mesh)
        self.uv, self.uv_jac = _project(self.clipped.points(mesh.vertices), K)
        self.records: list[_ChunkRecord] = []
        self.image = self._forward()

    def _visible_triangles(self, r0: int, r1: int) -> np.ndarray:
        corners = self.uv[self.clipped.triangles]
        lo, hi = corners.min(axis=1), corners.max(axis=1)
        pad = self.cfg.blur_radius
        hit = (
            (hi[:, 0] >= -pad)
            & (lo[:, 0] <= self.width - 1 + pad)
            & (hi[:, 1] >= r0 - pad)
            & (lo[:, 1] <= r1 - 1 + pad)
        )
        return np.flatnonzero(hit)

    def _forward(self) -> np.ndarray:
        if self._visible_triangles(0, self.height).size == 0:
            raise EmptyFrustumError("no triangle projects inside the image")
        blur2 = self.cfg.blur_radius**2
        log_empty = np.zeros(self.height * self.width)
        n_tri = len(self.clipped.triangles)
        for r0, r1 in _row_chunks(self.height, self.width, n_tri, self.cfg.max_pairs):
            tri_ids = self._visible_triangles(r0, r1)
            if tri_ids.size == 0:
                continue
            px = _pixel_centers(r0, r1, self.width)
            corners = self.uv[self.clipped.triangles[tri_ids]]
            terms = [_edge_terms(px, corners[:, k], corners[:, (k + 1) % 3]) for k in range(3)]
            d2_all = np.stack([term[0] for term in terms], axis=-1)
            cross = np.stack([term[3] for term in terms], axis=-1)
            edge = np.argmin(d2_all, axis=-1)
            d2 = np.take_along_axis(d2_all, edge[..., None], axis=-1)[..., 0]
            inside = np.all(cross >= 0, axis=-1) | np.all(cross <= 0, axis=-1)
            signed = np.where(inside, d2, -d2)
            candidate = inside | (d2 <= blur2)

            k = min(self.cfg.k_nearest, tri_ids.size)
            key = np.where(candidate, signed, -np.inf)
            if k < tri_ids.size:
                sel = np.argpartition(-key, k - 1, axis=1)[:, :k]
            else:
                sel = np.broadcast_to(np.arange(tri_ids.size), key.shape).copy()

            t_all = np.stack([term[1] for term in terms], axis=-1)
            diff_all = np.stack([term[2] for term in terms], axis=-2)
            edge_sel = _gather(edge, sel)
            t_sel = np.take_along_axis(_gather(t_all, sel), edge_sel[..., None], axis=-1)[..., 0]
            diff_sel = np.take_along_axis(
                _gather(diff_all, sel), edge_sel[..., None, None], axis=-2
            )[..., 0, :]

            valid = _gather(candidate, sel)
            x = _gather(signed, sel) / self.sigma_px
            soft = np.where(valid, expit(x), 0.0)
            log_keep = np.where(valid, log_expit(-x), 0.0)
            flat = np.arange(r0 * self.width, r1 * self.width)
            log_empty[flat] = log_keep.sum(axis=1)
            self.records.append(
                _ChunkRecord(
                    flat, tri_ids[sel], valid, _gather(inside, sel), edge_sel, t_sel, diff_sel, soft
                )
            )
        image = -np.expm1(log_empty)
        return np.clip(image, 0.0, 1.0).reshape(self.height, self.width)

    def vertex_backward(self, image_cotangent) -> np.ndarray:
        """Cotangent on the camera-frame mesh vertices (N, 3)."""
        cot = np.asarray(image_cotangent, dtype=float)
        if cot.shape != self.image.shape:
            raise ShapeMismatchError(f"cotangent shape {cot.shape} != image {self.image.shape}")
        cot, coverage = cot.ravel(), self.image.ravel()
        grad_uv = np.zeros_like(self.uv)
        for rec in self.records:
            g_x = (cot[rec.pixels] * (1.0 - coverage[rec.pixels]))[:, None] * rec.soft
            g_d2 = np.where(rec.valid, g_x * np.where(rec.inside, 1.0, -1.0), 0.0) / self.sigma_px
            local = self.clipped.triangles[rec.tri]
            start = np.take_along_axis(local, rec.edge[..., None], axis=-1)[..., 0]
            end = np.take_along_axis(local, ((rec.edge + 1) % 3)[..., None], axis=-1)[..., 0]
            base = -2.0 * g_d2[..., None] * rec.diff
            np.add.at(grad_uv, start.ravel(), (base * (1.0 - rec.t)[..., None]).reshape(-1, 2))
            np.add.at(grad_uv, end.ravel(), (base * rec.t[..., None]).reshape(-1, 2))
        grad_points = np.einsum("rc,rcd->rd", grad_uv, self.uv_jac)
        weights = self.clipped.t[:, None]
        grad_vertices = np.zeros_like(self.mesh.vertices)
        np.add.at(grad_vertices, self.clipped.src_a, (1.0 - weights) * grad_points)
        np.add.at(grad_vertices, self.clipped.src_b, weights * grad_points)
        return grad_vertices

    def pose_backward(self, image_cotangent) -> np.ndarray:
        """Cotangent on the left pose tangent (omega, v) that placed the mesh in camera frame."""
        return camera_mesh_vjp(self.mesh, self.vertex_backward(image_cotangent))


def rasterize(mesh: TriangleMesh, K: CameraIntrinsics, cfg: RenderConfig | None = None):
    return RenderContext(mesh, K, cfg or RenderConfig())


def render_silhouette(
    mesh: TriangleMesh, K: CameraIntrinsics, cfg: RenderConfig | None = None
) -> SilhouetteImage:
    return rasterize(mesh, K, cfg).image


def render_backward(
    mesh: TriangleMesh, K: CameraIntrinsics, cfg: RenderConfig | None, image_cotangent
) -> np.ndarray:
    return rasterize(mesh, K, cfg).pose_backward(image_cotangent)


def render_node(mesh: TriangleMesh, K: CameraIntrinsics, cfg: RenderConfig | None = None):
    """VjpNode from camera-frame vertices (N, 3) to the silhouette."""
    ctx = rasterize(mesh, K, cfg)
    return VjpNode(ctx.image, ctx.vertex_backward)


# === Hard rasterization ===
def rasterize_hard(mesh: TriangleMesh, K: CameraIntrinsics) -> np.ndarray:
    """Boolean coverage of pixel centers by any projected (clipped) triangle."""
    clipped = _clip_mesh(mesh)
    mask = np.zeros(K.height * K.width, dtype=bool)
    if clipped.triangles.size == 0:
        return mask.reshape(K.height, K.width)
    uv, _ = _project(clipped.points(mesh.vertices), K)
    corners = uv[clipped.triangles]
    for r0, r1 in _row_chunks(K.height, K.width, len(corners), 400_000):
        px = _pixel_centers(r0, r1, K.width)
        signs = []
        for k in range(3):
            a, b = corners[:, k], corners[:, (k + 1) % 3]
            e = b - a
            w = px[:, None, :] - a[None]
            signs.append(e[None, :, 0] * w[..., 1] - e[None, :, 1] * w[..., 0])
        signs = np.stack(signs, axis=-1)
        inside = np.all(signs >= 0, axis=-1) | np.all(signs <= 0, axis=-1)
        mask[r0 * K.width : r1 * K.width] = inside.any(axis=1)
    return mask.reshape(K.height, K.width)


# === PNG I/O ===
def save_png(image, path) -> Path:
    """8-bit grayscale PNG with value round(255 * S)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(255.0 * np.clip(np.asarray(image, dtype=float), 0.0, 1.0)).astype(np.uint8)
    if not cv2.imwrite(str(path), pixels):
        raise ValidationError(f"could not write PNG to {path}")
    return path


def load_png(path) -> np.ndarray:
    pixels = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if pixels is None:
        raise ValidationError(f"could not read PNG from {path}")
    return pixels.astype(float) / 255.0
