"""
Module: pretrain.py
Description:
    Supervised pretraining of the keypoint heads: least-squares fit of the per-scene bump
    centers to the dataset's keypoint labels, with plateau learning-rate decay. An optional
    seeded center perturbation simulates the synthetic-to-real gap before self-training.

Usage:
    python cli.py pretrain --dataset output/gen_x [--epochs 300] [--perturb 4] [--out dir]

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * VERBOSE
    - Writes checkpoint.json and pretrain_log.jsonl.
"""

import json
from pathlib import Path

from dotenv import load_dotenv
from rich.console import Console
from tqdm import tqdm

from ctrpose.errors import ValidationError
from ctrpose.perception import perturb_centers, save_checkpoint
from ctrpose.selftrain import PretrainConfig, pretrain
from ctrpose.synthgen import SceneDataset
from utils.config import RunManifest, fresh_output_dir, resolve_config
from utils.env import env_flag

console = Console()

# === Setup paths and environment ===
base_path = Path(__file__).resolve().parent
env_path = base_path.parent / ".env"
load_dotenv(dotenv_path=env_path)

VERBOSE = env_flag("VERBOSE")

DEFAULTS = {
    "dataset": None,
    "epochs": 300,
    "lr": 0.5,
    "temperature": 1.0,
    "sharpness": 1.0,
    "perturb": 0.0,
    "seed": 0,
    "heatmap_size": [64, 64],
}


def main(
    dataset=None, epochs=None, lr=None, perturb=None, seed=None, config=None, out=None
) -> Path:
    cfg = resolve_config(
        DEFAULTS,
        config,
        {"dataset": dataset, "epochs": epochs, "lr": lr, "perturb": perturb, "seed": seed},
    )
    if not cfg["dataset"]:
        raise ValidationError("--dataset: a dataset directory is required")
    data = SceneDataset.load(cfg["dataset"])
    pre_cfg = PretrainConfig(
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        temperature=cfg["temperature"],
        sharpness=cfg["sharpness"],
        heatmap_size=tuple(cfg["heatmap_size"]),
    )
    out_dir = fresh_output_dir(out, "pretrain")

    console.print(f"[bold white]\n📐 Pretraining bump model on {len(data)} scenes[/bold white]\n")
    progress_bar = tqdm(
        total=pre_cfg.epochs, desc="📉 Epochs", unit="epoch", ncols=console.size.width
    )

    def on_epoch(record):
        progress_bar.update(1)
        progress_bar.set_postfix_str(f"loss={record.keypoint_loss:.3e} lr={record.lr:.1e}")

    params, records = pretrain(
        data.keypoints2d(), data.intrinsics.width, pre_cfg, on_epoch=on_epoch
    )
    progress_bar.close()

    if cfg["perturb"] > 0:
        params = perturb_centers(params, cfg["perturb"], cfg["seed"])
        console.print(f"[yellow]⚠️ Centers perturbed by {cfg['perturb']} heatmap px[/yellow]")

    log_path = out_dir / "pretrain_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict()) + "\n")
    ckpt_path = save_checkpoint(params, out_dir, {"dataset": str(cfg["dataset"])})
    RunManifest("pretrain", cfg, cfg["seed"], [ckpt_path, log_path]).write(out_dir)

    console.print(
        f"[bold green]✅ Final keypoint loss {records[-1].keypoint_loss:.3e} px²; "
        f"checkpoint at {ckpt_path}[/bold green]"
    )
    return out_dir
