"""
Module: servo.py
Description:
    Position-based visual servoing simulation of the reference arm toward a goal given in the
    camera frame, with a choice of camera-to-robot pose estimator.

Usage:
    python cli.py servo --estimator gt|biased:<m>|ctrnet:<checkpoint> [--gain 0.5]
        [--duration 5] [--camera-motion static|orbit] [--goal fixed|circle] [--out dir]

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * VERBOSE
    - Writes servo_trace.csv, servo_summary.json and distance_to_goal.png.
    - The ctrnet estimator (heatmap keypoints + PnP, alias `keypoint:`) fits a per-keypoint error
      model from the checkpoint's keypoints against the labels of its training dataset.
"""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
from dotenv import load_dotenv
from matplotlib.figure import Figure
from rich.console import Console
from tqdm import tqdm

from ctrpose.errors import ValidationError
from ctrpose.kinematics import load_robot
from ctrpose.pbvs import (
    BiasedEstimator,
    KeypointPnpEstimator,
    ServoConfig,
    circle_goal,
    fit_keypoint_error_model,
    ground_truth_estimator,
    orbit_camera,
    random_servo_setup,
    run_servo,
)
from ctrpose.perception import CHECKPOINT_FILE, load_checkpoint, predict_keypoints
from ctrpose.synthgen import SceneDataset, sample_scene
from utils.config import (
    RunManifest,
    fresh_output_dir,
    resolve_config,
    resolve_intrinsics,
)
from utils.env import env_flag

console = Console()

# === Setup paths and environment ===
base_path = Path(__file__).resolve().parent
env_path = base_path.parent / ".env"
load_dotenv(dotenv_path=env_path)

VERBOSE = env_flag("VERBOSE")

DEFAULTS = {
    "robot": "robots/arm3.json",
    "estimator": "gt",
    "gain": 0.5,
    "duration": 5.0,
    "camera_motion": "static",
    "goal": "fixed",
    "goal_radius": 0.05,
    "orbit_rate": 0.05,
    "seed": 0,
}


# "keypoint" is accepted as an alias
KEYPOINT_ESTIMATORS = ("ctrnet", "keypoint")


def checkpoint_error_model(checkpoint: str):
    """Keypoint error statistics of a checkpoint against its training dataset's labels."""
    path = Path(checkpoint)
    path = path / CHECKPOINT_FILE if path.is_dir() else path
    params = load_checkpoint(path)
    with open(path, "r", encoding="utf-8") as f:
        dataset_dir = json.load(f).get("dataset")
    if not dataset_dir:
        raise ValidationError(f"--estimator: checkpoint {path} does not name its dataset")
    data = SceneDataset.load(dataset_dir)
    width = data.intrinsics.width
    predicted = np.stack([predict_keypoints(params, i, 1.0, width).value for i in range(len(data))])
    return fit_keypoint_error_model(predicted, data.keypoints2d())


def build_estimator(spec: str, model, K, seed: int):
    kind, _, arg = spec.partition(":")
    if kind == "gt":
        return ground_truth_estimator
    if kind == "biased":
        try:
            return BiasedEstimator(float(arg), seed)
        except ValueError:
            raise ValidationError(f"--estimator: bad bias magnitude {arg!r}") from None
    if kind in KEYPOINT_ESTIMATORS and arg:
        return KeypointPnpEstimator(model, K, checkpoint_error_model(arg), seed)
    raise ValidationError(f"--estimator: expected gt, biased:<m> or ctrnet:<ckpt>, got {spec!r}")


def plot_trace(trace, path: Path) -> Path:
    fig = Figure(figsize=(6, 3.5))
    ax = fig.subplots()
    ax.plot(trace.times, 1000.0 * trace.translational, label="translational (mm)")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("distance to goal (mm)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def main(
    robot=None,
    estimator=None,
    gain=None,
    duration=None,
    camera_motion=None,
    goal=None,
    seed=None,
    config=None,
    out=None,
) -> Path:
    cfg = resolve_config(
        DEFAULTS,
        config,
        {
            "robot": robot,
            "estimator": estimator,
            "gain": gain,
            "duration": duration,
            "camera_motion": camera_motion,
            "goal": goal,
            "seed": seed,
        },
    )
    if cfg["camera_motion"] not in ("static", "orbit"):
        raise ValidationError("--camera-motion: expected static or orbit")
    if cfg["goal"] not in ("fixed", "circle"):
        raise ValidationError("--goal: expected fixed or circle")
    if not 0 <= cfg["gain"] <= 1:
        raise ValidationError("--gain: must lie in [0, 1]")

    model = load_robot(cfg["robot"])
    K = resolve_intrinsics(cfg["robot"])
    pose_estimator = build_estimator(cfg["estimator"], model, K, cfg["seed"])
    scene = sample_scene(model, K, cfg["seed"])
    state = random_servo_setup(model, scene.gt_pose, scene.q, cfg["seed"])
    if cfg["camera_motion"] == "orbit":
        state = replace(state, camera_path=orbit_camera(scene.gt_pose, cfg["orbit_rate"]))
    if cfg["goal"] == "circle":
        state = replace(state, goal_path=circle_goal(state.goal_cam, cfg["goal_radius"]))
    out_dir = fresh_output_dir(out, "servo")

    servo_cfg = ServoConfig()
    n_steps = int(round(cfg["duration"] * servo_cfg.control_hz))
    console.print(
        f"[bold white]\n🤖 Servoing for {cfg['duration']} s with estimator '{cfg['estimator']}'"
        f"[/bold white]\n"
    )
    progress_bar = tqdm(total=n_steps, desc="⏱️ Steps", unit="step", ncols=console.size.width)

    def on_step(record):
        progress_bar.update(1)
        if record.fault and VERBOSE:
            progress_bar.write(f"⚠️ t={record.t:.3f}s: {record.fault}, holding joints")
        progress_bar.set_postfix_str(f"err={1000 * record.translational_err:.2f}mm")

    trace = run_servo(
        state, pose_estimator, cfg["gain"], cfg["duration"], model, servo_cfg, on_step
    )
    progress_bar.close()

    trace_path = trace.write_csv(out_dir / "servo_trace.csv")
    plot_path = plot_trace(trace, out_dir / "distance_to_goal.png")
    summary = {
        "final_translational_err": float(trace.translational[-1]),
        "final_rotational_err": float(trace.rotational[-1]),
        "time_to_1mm": trace.time_to_reach(1e-3),
        "time_to_5mm": trace.time_to_reach(5e-3),
        "faults": len(trace.faults),
    }
    summary_path = out_dir / "servo_summary.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    RunManifest("servo", cfg, cfg["seed"], [trace_path, plot_path, summary_path]).write(out_dir)

    console.print(
        f"[bold green]✅ Final error {1000 * summary['final_translational_err']:.2f} mm, "
        f"{summary['final_rotational_err']:.4f} rad; trace at {trace_path}[/bold green]"
    )
    return out_dir
