"""
Module: train.py
Description:
    Self-supervised training: keypoints -> PnP -> rendered silhouette -> mask loss, with the
    rendering refining trainable masks through the reprojection-weighted BCE.

Usage:
    python cli.py train --dataset output/gen_x --checkpoint output/pretrain_x [--epochs 200]
        [--lr 1e-2] [--s 0.1] [--clip 10] [--seed 0] [--mask-mode corrupted] [--out dir]

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * CTRPOSE_THREADS
        * VERBOSE
    - Writes train_log.jsonl (one TrainRecord per line) and checkpoint.json.
    - Scenes whose PnP or rendering fails are skipped for that epoch and listed in the log.
"""

import json
from pathlib import Path

from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from ctrpose.errors import ShapeMismatchError, ValidationError
from ctrpose.kinematics import load_robot
from ctrpose.perception import init_params, load_checkpoint, save_checkpoint
from ctrpose.selftrain import TrainConfig, TrainingScenes, TrainState, train_epoch
from ctrpose.softrender import RenderConfig
from ctrpose.synthgen import SceneDataset
from utils.config import RunManifest, fresh_output_dir, resolve_config
from utils.env import env_flag, env_threads

console = Console()

# === Setup paths and environment ===
base_path = Path(__file__).resolve().parent
env_path = base_path.parent / ".env"
load_dotenv(dotenv_path=env_path)

THREADS = env_threads()
VERBOSE = env_flag("VERBOSE")

DEFAULTS = {
    "robot": None,
    "dataset": None,
    "checkpoint": None,
    "epochs": 200,
    "lr": 1e-2,
    "seg_lr": 0.5,
    "s": 0.1,
    "clip": 10.0,
    "seed": 0,
    "mask_mode": "corrupted",
    "alternation": False,
    "temperature": 1.0,
    "radius": 1,
    "flip_rate": 0.01,
    "render": {},
}


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"],
        seg_lr=cfg["seg_lr"],
        epochs=cfg["epochs"],
        grad_clip=cfg["clip"],
        s=cfg["s"],
        seed=cfg["seed"],
        alternation=cfg["alternation"],
        temperature=cfg["temperature"],
        mask_mode=cfg["mask_mode"],
        threads=THREADS,
        render=RenderConfig(**cfg["render"]),
    )


def main(
    robot=None,
    dataset=None,
    checkpoint=None,
    epochs=None,
    lr=None,
    s=None,
    clip=None,
    seed=None,
    mask_mode=None,
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
            "epochs": epochs,
            "lr": lr,
            "s": s,
            "clip": clip,
            "seed": seed,
            "mask_mode": mask_mode,
        },
    )
    if not cfg["dataset"]:
        raise ValidationError("--dataset: a dataset directory is required")
    train_cfg = build_train_config(cfg)
    model = load_robot(cfg["robot"]) if cfg["robot"] else None
    data = SceneDataset.load(cfg["dataset"], model)

    if cfg["checkpoint"]:
        params = load_checkpoint(cfg["checkpoint"])
    else:
        console.print("[yellow]⚠️ No --checkpoint; starting from the keypoint labels[/yellow]")
        params = init_params(data.keypoints2d(), image_width=data.intrinsics.width)
    if params.n_scenes != len(data):
        raise ShapeMismatchError(
            f"--checkpoint: {params.n_scenes} scenes in checkpoint, {len(data)} in dataset"
        )

    scenes = TrainingScenes.from_dataset(data, cfg["radius"], cfg["flip_rate"], cfg["seed"])
    if train_cfg.mask_mode == "trainable" and params.mask_logits.shape[0] == 0:
        params = params.replace(mask_logits=scenes.provider.initial_logits())
    out_dir = fresh_output_dir(out, "train")

    console.print(
        f"[bold white]\n🔁 Self-training on {len(scenes)} scenes "
        f"({train_cfg.mask_mode} masks, {THREADS} threads)[/bold white]\n"
    )
    state = TrainState.start(params, train_cfg)
    records = []
    progress_bar = tqdm(
        range(train_cfg.epochs), desc="📉 Epochs", unit="epoch", ncols=console.size.width
    )
    for _ in progress_bar:
        state, record = train_epoch(state, scenes, train_cfg)
        records.append(record)
        progress_bar.set_postfix_str(
            f"mask={record.mask_loss:.2f} ADD={record.mean_add:.1f}mm lr={record.lr:.0e}"
        )
        if VERBOSE and record.skipped:
            progress_bar.write(f"⚠️ epoch {record.epoch}: skipped scenes {record.faults}")

    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict()) + "\n")
    ckpt_path = save_checkpoint(state.params, out_dir, {"dataset": str(cfg["dataset"])})
    RunManifest("train", cfg, cfg["seed"], [ckpt_path, log_path] + _logits(out_dir)).write(out_dir)

    if records:
        table = Table(title="📊 Self-training summary")
        table.add_column("Epoch", justify="right")
        table.add_column("Mask loss", justify="right")
        table.add_column("Seg loss", justify="right")
        table.add_column("Mean ADD (mm)", justify="right")
        for record in (records[0], records[-1]):
            table.add_row(
                str(record.epoch),
                f"{record.mask_loss:.3f}",
                f"{record.seg_loss:.4f}",
                f"{record.mean_add:.2f}",
            )
        console.print(table)
    console.print(f"[bold green]✅ Checkpoint written to {ckpt_path}[/bold green]")
    return out_dir


def _logits(out_dir: Path) -> list:
    path = out_dir / "mask_logits.npy"
    return [path] if path.exists() else []
