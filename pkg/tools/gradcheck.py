"""
Module: gradcheck.py
Description:
    Checks every analytic pullback in the pipeline against central finite differences:
    projection, mesh placement, spatial softmax, bump model, implicit PnP backward,
    silhouette renderer, and the composed keypoints -> PnP -> render -> mask-loss chain.

Usage:
    python cli.py gradcheck --all [--seed 0] [--out dir]
    python cli.py gradcheck --stage pnp --stage render

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * VERBOSE
    - Writes gradcheck.json; exits with status 2 when any stage fails.
"""

import json
from pathlib import Path

import numpy as np
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from ctrpose.diff import GradcheckResult, fd_check
from ctrpose.errors import GradientMismatchError, ValidationError
from ctrpose.geometry import SE3Pose, pose_projection_jacobians, project_points, retract, se3_log
from ctrpose.kinematics import (
    REFERENCE_ROBOT,
    assemble_camera_mesh,
    camera_mesh_vjp,
    keypoints_3d,
    load_robot,
)
from ctrpose.perception import init_params, predict_keypoints, spatial_softmax, spatial_softmax_vjp
from ctrpose.pnp import Correspondences, pnp_backward, pnp_solve
from ctrpose.selftrain import mask_loss
from ctrpose.softrender import rasterize, render_silhouette
from ctrpose.synthgen import sample_scene
from utils.config import RunManifest, fresh_output_dir, resolve_config, resolve_intrinsics
from utils.env import env_flag

console = Console()

# === Setup paths and environment ===
base_path = Path(__file__).resolve().parent
env_path = base_path.parent / ".env"
load_dotenv(dotenv_path=env_path)

VERBOSE = env_flag("VERBOSE")

DEFAULTS = {"stages": None, "seed": 0, "instances": 3}


def _scene(rng):
    model = load_robot(REFERENCE_ROBOT)
    K = resolve_intrinsics(REFERENCE_ROBOT)
    sample = sample_scene(model, K, int(rng.integers(2**31)))
    return model, K, sample


def _perturbed(pose: SE3Pose, rng, rot=0.03, trans=0.02) -> SE3Pose:
    xi = np.concatenate([rng.normal(scale=rot, size=3), rng.normal(scale=trans, size=3)])
    return retract(pose, xi)


# === Stages ===
def check_projection(rng) -> float:
    model, K, sample = _scene(rng)
    points = keypoints_3d(model, sample.q)
    cot = rng.normal(size=(len(points), 2))

    def f(xi):
        moved = retract(sample.gt_pose, xi).transform_points(points)
        return float(np.sum(cot * project_points(moved, K)))

    jac = pose_projection_jacobians(sample.gt_pose.transform_points(points), K)
    return fd_check(f, np.zeros(6), np.einsum("nij,ni->j", jac, cot))


def check_mesh(rng) -> float:
    model, _, sample = _scene(rng)
    mesh = assemble_camera_mesh(model, sample.q, sample.gt_pose)
    cot = rng.normal(size=mesh.vertices.shape)

    def f(xi):
        moved = assemble_camera_mesh(model, sample.q, retract(sample.gt_pose, xi))
        return float(np.sum(cot * moved.vertices))

    return fd_check(f, np.zeros(6), camera_mesh_vjp(mesh, cot))


def check_spatial_softmax(rng) -> float:
    heatmaps = 3.0 * rng.normal(size=(2, 8, 8))
    cot = rng.normal(size=(2, 2))
    temperature = float(rng.uniform(0.5, 2.0))

    def f(flat):
        return float(np.sum(cot * spatial_softmax(flat.reshape(heatmaps.shape), temperature)))

    return fd_check(f, heatmaps.ravel(), spatial_softmax_vjp(heatmaps, temperature, cot))


def check_heatmap_model(rng) -> float:
    centers = rng.uniform(4.0, 12.0, size=(1, 3, 2))
    params = init_params(centers, heatmap_size=(16, 16), sharpness=0.5)
    cot = rng.normal(size=(3, 2))
    n = centers.size

    def f(theta):
        trial = params.replace(
            centers=theta[:n].reshape(centers.shape), log_sharpness=theta[n:].reshape(1, 3)
        )
        return float(np.sum(cot * predict_keypoints(trial, 0).value))

    grads = predict_keypoints(params, 0).pullback(cot)
    theta = np.concatenate([params.centers.ravel(), params.log_sharpness.ravel()])
    analytic = np.concatenate([grads["centers"].ravel(), grads["log_sharpness"].ravel()])
    return fd_check(f, theta, analytic)


def check_pnp(rng) -> float:
    model, K, sample = _scene(rng)
    points = keypoints_3d(model, sample.q)
    observed = sample.gt_keypoints2d + rng.normal(scale=0.5, size=sample.gt_keypoints2d.shape)
    c = Correspondences(observed, points)
    result = pnp_solve(c, K, init=sample.gt_pose)
    cot = rng.normal(size=6)

    def f(flat):
        solved = pnp_solve(c.with_points2d(flat.reshape(-1, 2)), K, init=result.pose)
        return float(cot @ se3_log(solved.pose.compose(result.pose.inverse())).as_vector())

    return fd_check(f, observed.ravel(), pnp_backward(c, K, result, cot), h=1e-4)


def check_render(rng) -> float:
    model, K, sample = _scene(rng)
    target = render_silhouette(assemble_camera_mesh(model, sample.q, sample.gt_pose), K) >= 0.5
    pose = _perturbed(sample.gt_pose, rng)

    def f(xi):
        image = render_silhouette(assemble_camera_mesh(model, sample.q, retract(pose, xi)), K)
        return mask_loss(image, target)[0]

    ctx = rasterize(assemble_camera_mesh(model, sample.q, pose), K)
    _, cot = mask_loss(ctx.image, target)
    return fd_check(f, np.zeros(6), ctx.pose_backward(cot))


def check_end_to_end(rng) -> float:
    model, K, sample = _scene(rng)
    target = render_silhouette(assemble_camera_mesh(model, sample.q, sample.gt_pose), K) >= 0.5
    offsets = rng.normal(scale=1.0, size=sample.gt_keypoints2d.shape)
    params = init_params((sample.gt_keypoints2d + offsets)[None], image_width=K.width)
    points = keypoints_3d(model, sample.q)
    warm = pnp_solve(Correspondences(predict_keypoints(params, 0, 1.0, K.width).value, points), K)

    def loss_and_grad(trial, with_grad):
        node = predict_keypoints(trial, 0, 1.0, K.width)
        c = Correspondences(node.value, points)
        result = pnp_solve(c, K, init=warm.pose)
        ctx = rasterize(assemble_camera_mesh(model, sample.q, result.pose), K)
        loss, cot = mask_loss(ctx.image, target)
        if not with_grad:
            return loss, None
        kp_cot = pnp_backward(c, K, result, ctx.pose_backward(cot)).reshape(-1, 2)
        return loss, node.pullback(kp_cot)["centers"]

    def f(flat):
        return loss_and_grad(params.replace(centers=flat.reshape(params.centers.shape)), False)[0]

    _, grad = loss_and_grad(params, True)
    return fd_check(f, params.centers.ravel(), grad, h=1e-4)


STAGES = {
    "projection": (check_projection, 1e-4),
    "mesh": (check_mesh, 1e-4),
    "spatial_softmax": (check_spatial_softmax, 1e-4),
    "heatmap_model": (check_heatmap_model, 1e-4),
    "pnp": (check_pnp, 1e-3),
    "render": (check_render, 2e-2),
    "end_to_end": (check_end_to_end, 1e-2),
}


def run_stage(name: str, seed: int, instances: int = 3) -> GradcheckResult:
    check, tolerance = STAGES[name]
    rng = np.random.default_rng([seed, list(STAGES).index(name)])
    worst = max(check(rng) for _ in range(instances))
    return GradcheckResult(name, worst, tolerance)


def main(stages=None, seed=None, config=None, out=None) -> Path:
    cfg = resolve_config(DEFAULTS, config, {"stages": stages or None, "seed": seed})
    names = list(cfg["stages"] or STAGES)
    unknown = [n for n in names if n not in STAGES]
    if unknown:
        raise ValidationError(f"--stage: unknown stage(s) {', '.join(unknown)}")
    out_dir = fresh_output_dir(out, "gradcheck")

    console.print("[bold white]\n🧮 Finite-difference gradient checks[/bold white]\n")
    results = []
    for name in names:
        result = run_stage(name, cfg["seed"], cfg["instances"])
        results.append(result)
        icon = "✅" if result.passed else "❌"
        if VERBOSE:
            console.print(f"{icon} {name}: max rel err {result.max_rel_err:.2e}")

    report_path = out_dir / "gradcheck.json"
    payload = {"stages": [r.to_dict() for r in results], "pass": all(r.passed for r in results)}
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    RunManifest("gradcheck", cfg, cfg["seed"], [report_path]).write(out_dir)

    table = Table(title="📊 Gradient checks")
    table.add_column("Stage")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Pass", justify="center")
    for r in results:
        icon = "✅" if r.passed else "❌"
        table.add_row(r.stage, f"{r.max_rel_err:.2e}", f"{r.tolerance:.0e}", icon)
    console.print(table)

    failed = [r.stage for r in results if not r.passed]
    if failed:
        raise GradientMismatchError(f"gradient check failed for: {', '.join(failed)}")
    console.print(f"[bold green]✅ All stages passed; report at {report_path}[/bold green]")
    return out_dir
