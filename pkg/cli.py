"""
Module: cli.py
Description:
    Typer-based command-line interface for ctrpose: dataset generation, pretraining,
    self-training, evaluation, gradient checking and visual-servoing simulation.

Usage:
    python cli.py [subcommand] [options]

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * CTRPOSE_SCENES_FILE
        * CTRPOSE_THREADS
        * VERBOSE
    - Every subcommand accepts `--config file.toml|file.json`; explicit flags win.
    - Exit status: 0 success, 1 usage/validation error, 2 numerical fault.
"""

import sys
from typing import List, Optional

import click
import typer
from rich.console import Console

from ctrpose.errors import ComputationError, ValidationError

console = Console()

app = typer.Typer(help="ctrpose CLI – camera-to-robot pose estimation at desk scale.")

CONFIG_HELP = "TOML or JSON file with defaults for this command; flags override it."
OUT_HELP = "Output directory (must be new or empty). Defaults to a timestamped run directory."


def _import_error(what: str, e: ImportError) -> None:
    console.print(f"[bold red]Error:[/bold red] Could not import {what}.\n[dim]Details: {e}[/dim]")
    raise typer.Exit(1)


# === DATA ===
@app.command("gen")
def gen(
    robot: Optional[str] = typer.Option(None, "--robot", help="Robot description JSON."),
    n: Optional[int] = typer.Option(None, "--n", help="Number of scenes to sample."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed."),
    cache_masks: Optional[bool] = typer.Option(
        None, "--cache-masks/--no-cache-masks", help="Also write mask PNGs."
    ),
    intrinsics: Optional[str] = typer.Option(
        None, "--intrinsics", help="Intrinsics JSON; defaults to the robot file's entry."
    ),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """Generate a synthetic scene dataset (joint configurations + camera poses)."""
    try:
        from tools.gen_dataset import main as run_gen
    except ImportError as e:
        _import_error("dataset generator", e)
    run_gen(robot, n, seed, cache_masks, intrinsics, config, out)


# === TRAINING ===
@app.command("pretrain")
def pretrain(
    dataset: Optional[str] = typer.Option(None, "--dataset", help="Dataset directory."),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Pretraining epochs."),
    lr: Optional[float] = typer.Option(None, "--lr", help="Adam learning rate."),
    perturb: Optional[float] = typer.Option(
        None, "--perturb", help="Offset fitted centers by this many heatmap pixels."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for the perturbation."),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """Fit the keypoint bump model to the dataset's labels (supervised)."""
    try:
        from tools.pretrain import main as run_pretrain
    except ImportError as e:
        _import_error("pretraining tool", e)
    run_pretrain(dataset, epochs, lr, perturb, seed, config, out)


@app.command("train")
def train(
    robot: Optional[str] = typer.Option(None, "--robot", help="Override the dataset's robot."),
    dataset: Optional[str] = typer.Option(None, "--dataset", help="Dataset directory."),
    checkpoint: Optional[str] = typer.Option(
        None, "--checkpoint", help="Checkpoint file or directory to start from."
    ),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Self-training epochs."),
    lr: Optional[float] = typer.Option(None, "--lr", help="Learning rate of the bump parameters."),
    s: Optional[float] = typer.Option(None, "--s", help="Reprojection weight scale s."),
    clip: Optional[float] = typer.Option(None, "--clip", help="Gradient norm clip."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for mask corruption."),
    mask_mode: Optional[str] = typer.Option(
        None, "--mask-mode", help="Mask source: oracle, corrupted or trainable."
    ),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """Self-supervised training through PnP and the differentiable renderer."""
    try:
        from tools.train import main as run_train
    except ImportError as e:
        _import_error("training tool", e)
    run_train(robot, dataset, checkpoint, epochs, lr, s, clip, seed, mask_mode, config, out)


# === EVALUATION ===
@app.command("eval")
def evaluate(
    robot: Optional[str] = typer.Option(None, "--robot", help="Override the dataset's robot."),
    dataset: Optional[str] = typer.Option(None, "--dataset", help="Dataset directory."),
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint", help="Checkpoint to evaluate."),
    method: Optional[str] = typer.Option(
        None, "--method", help="pnp, or render (PnP refined by render-and-compare)."
    ),
    scale: Optional[float] = typer.Option(None, "--scale", help="Evaluation resolution factor."),
    scenes: Optional[str] = typer.Option(
        None, "--scenes", help="Text file of scene indices. Overrides CTRPOSE_SCENES_FILE."
    ),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """Report ADD, AUC and PCK of a checkpoint on a dataset."""
    try:
        from tools.evaluate import main as run_eval
    except ImportError as e:
        _import_error("evaluation tool", e)
    run_eval(robot, dataset, checkpoint, method, scale, scenes, config, out)


@app.command("gradcheck")
def gradcheck(
    all_stages: bool = typer.Option(False, "--all", help="Check every stage (the default)."),
    stage: Optional[List[str]] = typer.Option(None, "--stage", help="Stage to check; repeatable."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for the random instances."),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """Compare every analytic pullback with central finite differences."""
    try:
        from tools.gradcheck import main as run_gradcheck
    except ImportError as e:
        _import_error("gradient checker", e)
    run_gradcheck(None if all_stages else stage, seed, config, out)


# === SERVOING ===
@app.command("servo")
def servo(
    robot: Optional[str] = typer.Option(None, "--robot", help="Robot description JSON."),
    estimator: Optional[str] = typer.Option(
        None, "--estimator", help="gt, biased:<meters> or ctrnet:<checkpoint> (alias keypoint:)."
    ),
    gain: Optional[float] = typer.Option(None, "--gain", help="Proportional joint gain in [0, 1]."),
    duration: Optional[float] = typer.Option(None, "--duration", help="Simulated seconds."),
    camera_motion: Optional[str] = typer.Option(
        None, "--camera-motion", help="static or orbit."
    ),
    goal: Optional[str] = typer.Option(None, "--goal", help="fixed or circle."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Scene and goal seed."),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """Simulate position-based visual servoing with a chosen pose estimator."""
    try:
        from tools.servo import main as run_servo
    except ImportError as e:
        _import_error("servo simulator", e)
    run_servo(robot, estimator, gain, duration, camera_motion, goal, seed, config, out)


def run_command(argv: List[str]) -> int:
    """Run one subcommand and map failures to exit statuses (1 validation, 2 runtime)."""
    try:
        result = app(args=list(argv), standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        console.print(f"[bold red]❌ Usage error:[/bold red] {e.format_message()}")
        return 1
    except click.exceptions.Abort:
        return 1
    except ValidationError as e:
        console.print(f"[bold red]❌ {type(e).__name__}:[/bold red] {e}")
        return 1
    except ComputationError as e:
        console.print(f"[bold red]❌ {type(e).__name__}:[/bold red] {e}")
        return 2
    return result if isinstance(result, int) else 0


# === ENTRY POINT ===
if __name__ == "__main__":
    sys.exit(run_command(sys.argv[1:]))
