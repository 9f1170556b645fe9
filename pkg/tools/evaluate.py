"""
Module: evaluate.py
Description:
    Evaluates a checkpoint on a dataset: keypoints + PnP (optionally refined by rendering)
    per scene, then ADD / AUC / PCK with per-frame reprojection residuals and confidences.

Usage:
    python cli.py eval --dataset output/gen_x --checkpoint output/train_x [--method pnp|render]
        [--scale 1.0] [--scenes scenes.txt] [--out dir]

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * CTRPOSE_SCENES_FILE
        * CTRPOSE_THREADS
        * VERBOSE
    - Writes metrics.json, per_frame.csv, add_curve.csv and pck_curve.csv.
    - `--scale f` evaluates with intrinsics and keypoints scaled by f.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from ctrpose.errors import ComputationError, ValidationError
from ctrpose.geometry import project_points
from ctrpose.kinematics import assemble_camera_mesh, keypoints_3d, load_robot
from ctrpose.metrics import (
    ADD_MAX_THRESHOLD,
    PCK_MAX_THRESHOLD,
    add_metric,
    build_report,
    keypoint_errors,
    write_curve_csv,
)
from ctrpose.perception import load_checkpoint
from ctrpose.selftrain import estimate_pose, refine_pose_by_rendering
from ctrpose.softrender import render_silhouette
from ctrpose.synthgen import SceneDataset
from utils.config import RunManifest, fresh_output_dir, resolve_config
from utils.env import env_flag, env_threads
from utils.scene_filter import filter_scenes, load_selected_scenes

console = Console()

# === Setup paths and environment ===
base_path = Path(__file__).resolve().parent
env_path = base_path.parent / ".env"
load_dotenv(dotenv_path=env_path)

THREADS = env_threads()
VERBOSE = env_flag("VERBOSE")

METHODS = ("pnp", "render")

DEFAULTS = {
    "robot": None,
    "dataset": None,
    "checkpoint": None,
    "method": "pnp",
    "scale": 1.0,
    "s": 0.1,
    "temperature": 1.0,
    "pck_threshold": 50.0,
    "refine_steps": 200,
    "scenes": None,
    "seed": 0,
}


def evaluate_scene(sample, params, model, cfg):
    """(add, 2D errors, residual) for one scene; the rendering method refines the PnP pose."""
    K = sample.intrinsics.scaled(cfg["scale"]) if cfg["scale"] != 1.0 else sample.intrinsics
    result, keypoints = estimate_pose(params, sample.index, model, sample.q, K, cfg["temperature"])
    pose = result.pose
    if cfg["method"] == "render":
        target = render_silhouette(assemble_camera_mesh(model, sample.q, sample.gt_pose), K) >= 0.5
        refined = refine_pose_by_rendering(
            model, sample.q, K, target.astype(float), pose, steps=cfg["refine_steps"]
        )
        pose = refined.pose
    points = keypoints_3d(model, sample.q)
    truth2d = project_points(sample.gt_pose.transform_points(points), K)
    add = add_metric(pose, sample.gt_pose, points)
    return add, keypoint_errors(keypoints, truth2d), result.residual


def main(
    robot=None,
    dataset=None,
    checkpoint=None,
    method=None,
    scale=None,
    scenes=None,
    config=None,
    out=None,
) -> Path:
    cfg = resolve_config(
        DEFAULTS,
        config,
        {
            "robot": robot,
            "dataset": dataset,
            "checkpoint": checkpoint,
            "method": method,
            "scale": scale,
            "scenes": scenes,
        },
    )
    if not cfg["dataset"] or not cfg["checkpoint"]:
        raise ValidationError("--dataset and --checkpoint are required")
    if cfg["method"] not in METHODS:
        raise ValidationError(f"--method: expected one of {METHODS}, got {cfg['method']!r}")
    if not cfg["scale"] > 0:
        raise ValidationError("--scale: must be positive")

    model = load_robot(cfg["robot"]) if cfg["robot"] else None
    data = SceneDataset.load(cfg["dataset"], model)
    params = load_checkpoint(cfg["checkpoint"])
    samples = filter_scenes(data.samples, load_selected_scenes(cfg["scenes"]))
    out_dir = fresh_output_dir(out, "eval")

    console.print(
        f"[bold white]\n🎯 Evaluating {len(samples)} scenes ({cfg['method']}, "
        f"scale {cfg['scale']})[/bold white]\n"
    )

    def run(sample):
        try:
            return sample, evaluate_scene(sample, params, data.model, cfg), None
        except ComputationError as e:
            return sample, None, type(e).__name__

    rows, per_frame_add, errors2d, residuals, failures = [], [], [], [], {}
    with ThreadPoolExecutor(max_workers=THREADS) as pool:
        progress_bar = tqdm(
            pool.map(run, samples),
            total=len(samples),
            desc="🔍 Scenes",
            unit="scene",
            ncols=console.size.width,
        )
        for sample, outcome, fault in progress_bar:
            if fault is not None:
                failures[str(sample.index)] = fault
                if VERBOSE:
                    progress_bar.write(f"❌ scene {sample.index}: {fault}")
                continue
            add, errs, residual = outcome
            per_frame_add.append(add)
            errors2d.extend(errs.tolist())
            residuals.append(residual)
            rows.append(
                {"index": sample.index, "add": add, "err2d": errs.mean(), "residual": residual}
            )
            progress_bar.set_postfix_str(f"#{sample.index} ADD={1000 * add:.1f}mm")

    report = build_report(
        per_frame_add, errors2d, residuals, cfg["s"], cfg["pck_threshold"], failures
    )

    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w", encoding="utf-8") as f:
        json.dump({"method": cfg["method"], "scale": cfg["scale"], **report.to_dict()}, f, indent=2)
    frames_path = out_dir / "per_frame.csv"
    with open(frames_path, "w", newline="", encoding="utf-8") as csvfile:
        fieldnames = ["index", "add", "mean_2d_err", "residual", "confidence"]
        writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
        writer.writeheader()
        for row, confidence in zip(rows, report.confidence):
            writer.writerow(
                {
                    "index": row["index"],
                    "add": repr(float(row["add"])),
                    "mean_2d_err": repr(float(row["err2d"])),
                    "residual": repr(float(row["residual"])),
                    "confidence": repr(confidence),
                }
            )
    add_curve = write_curve_csv(out_dir / "add_curve.csv", per_frame_add, ADD_MAX_THRESHOLD)
    pck_curve = write_curve_csv(out_dir / "pck_curve.csv", errors2d, PCK_MAX_THRESHOLD)
    artifacts = [metrics_path, frames_path, add_curve, pck_curve]
    RunManifest("eval", cfg, cfg["seed"], artifacts).write(out_dir)

    table = Table(title="📊 Evaluation report")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_row("Mean ADD (mm)", f"{1000 * report.mean_add:.2f}")
    table.add_row("ADD AUC", f"{report.auc_add:.2f}")
    table.add_row(f"PCK@{report.pck_threshold:g}px", f"{report.pck_at_threshold:.3f}")
    table.add_row("PCK AUC", f"{report.auc_pck:.2f}")
    table.add_row("Mean 2D error (px)", f"{report.mean_2d_err:.3f}")
    table.add_row("Failures", str(len(failures)))
    console.print(table)
    console.print(f"[bold green]✅ Metrics written to {metrics_path}[/bold green]")
    return out_dir
