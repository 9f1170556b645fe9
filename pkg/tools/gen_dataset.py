"""
Module: gen_dataset.py
Description:
    Generates a synthetic scene dataset: random joint configurations seen from look-at
    cameras around the robot, stored as a manifest plus one JSON file per sample.

Usage:
    python cli.py gen --robot robots/arm3.json --n 20 --seed 7 [--cache-masks] [--out dir]

Notes:
    Reads configuration from `.env`.
    - Required/used env vars:
        * CTRPOSE_OUTPUT_DIR
        * CTRPOSE_THREADS
        * VERBOSE
    - Labels (keypoints, masks) are regenerated from (q, pose) on load; `--cache-masks`
      additionally writes mask PNGs.
"""

from pathlib import Path

from dotenv import load_dotenv
from rich.console import Console
from tqdm import tqdm

from ctrpose.kinematics import load_robot
from ctrpose.synthgen import RandomizationRanges, SceneDataset, generate_samples
from utils.config import RunManifest, fresh_output_dir, resolve_config, resolve_intrinsics
from utils.env import env_flag, env_threads

console = Console()

# === Setup paths and environment ===
base_path = Path(__file__).resolve().parent
env_path = base_path.parent / ".env"
load_dotenv(dotenv_path=env_path)

THREADS = env_threads()
VERBOSE = env_flag("VERBOSE")

DEFAULTS = {
    "robot": "robots/arm3.json",
    "intrinsics": None,
    "n": 20,
    "seed": 0,
    "cache_masks": False,
    "ranges": {},
}


def main(
    robot=None, n=None, seed=None, cache_masks=None, intrinsics=None, config=None, out=None
) -> Path:
    cfg = resolve_config(
        DEFAULTS,
        config,
        {
            "robot": robot,
            "n": n,
            "seed": seed,
            "cache_masks": cache_masks,
            "intrinsics": intrinsics,
        },
    )
    model = load_robot(cfg["robot"])
    K = resolve_intrinsics(cfg["robot"], cfg["intrinsics"])
    ranges = RandomizationRanges.from_dict(cfg["ranges"])
    out_dir = fresh_output_dir(out, "gen")

    console.print(f"[bold white]\n🎲 Generating {cfg['n']} scenes of {model.name}[/bold white]\n")
    progress_bar = tqdm(total=cfg["n"], desc="🎬 Scenes", unit="scene", ncols=console.size.width)

    def on_sample(sample):
        progress_bar.update(1)
        progress_bar.set_postfix_str(f"#{sample.index} seed={sample.seed}")

    samples = generate_samples(
        model, K, cfg["n"], cfg["seed"], ranges, threads=THREADS, on_sample=on_sample
    )
    progress_bar.close()

    dataset = SceneDataset(model, cfg["robot"], K, samples, cfg["seed"], ranges)
    manifest_path = dataset.save(out_dir, cache_masks=cfg["cache_masks"])

    artifacts = [manifest_path] + [out_dir / f"sample_{s.index}.json" for s in samples]
    if cfg["cache_masks"]:
        artifacts += [out_dir / "masks" / f"mask_{s.index}.png" for s in samples]
    RunManifest("gen", cfg, cfg["seed"], artifacts).write(out_dir)

    console.print(f"[bold green]✅ Dataset written to {out_dir}[/bold green]")
    if VERBOSE:
        console.print(f"[dim]{len(samples)} samples, intrinsics {K.width}x{K.height}[/dim]")
    return out_dir
