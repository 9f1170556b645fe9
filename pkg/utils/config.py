"""
Run configuration helpers shared by every command.

- resolve_config: built-in defaults < --config file (TOML or JSON) < explicit flags
- config_hash: SHA-256 over the canonical (sorted-key) JSON of a resolved config
- fresh_output_dir: user-named or timestamped output directory, never an existing non-empty one
- RunManifest: command, config hash, seed and artifact paths written next to the outputs
"""

from __future__ import annotations

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from ctrpose.errors import ValidationError
from ctrpose.geometry import CameraIntrinsics
from utils.env import output_root

MANIFEST_NAME = "run_manifest.json"


def load_config_file(path) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"--config: file not found: {p}")
    if p.suffix == ".toml":
        with p.open("rb") as f:
            return tomllib.load(f)
    if p.suffix == ".json":
        with p.open("r", encoding="utf-8") as f:
            return json.load(f)
    raise ValidationError(f"--config: expected a .toml or .json file, got {p.name}")


def resolve_config(
    defaults: Dict[str, Any],
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Merge the three layers. Keys in the file must be known defaults; flags left at None
    do not override anything.
    """
    resolved = dict(defaults)
    if config_path:
        file_cfg = load_config_file(config_path)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ValidationError(f"--config: unknown keys {', '.join(unknown)}")
        resolved.update(file_cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            resolved[key] = value
    return resolved


def _canonical(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def canonical_json(cfg: Dict[str, Any]) -> str:
    return json.dumps(
        {k: _canonical(v) for k, v in cfg.items()}, sort_keys=True, separators=(",", ":")
    )


def config_hash(cfg: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def fresh_output_dir(out: Optional[str], command: str) -> Path:
    if out:
        path = Path(out)
        if path.exists() and any(path.iterdir()):
            raise ValidationError(f"--out: refusing to write into non-empty directory {path}")
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    path = output_root() / f"{command}_{stamp}"
    suffix = 1
    while path.exists():
        path = output_root() / f"{command}_{stamp}_{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def _relative(path, root: Path) -> Path:
    try:
        return Path(path).resolve().relative_to(root.resolve())
    except ValueError:
        return Path(path)


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: int
    artifact_paths: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "config": json.loads(canonical_json(self.config)),
            "artifact_paths": sorted(str(p) for p in self.artifact_paths),
        }

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        self.artifact_paths = [_relative(p, out_dir) for p in self.artifact_paths]
        path = out_dir / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        return path


def resolve_intrinsics(robot_path, intrinsics_path: Optional[str] = None) -> CameraIntrinsics:
    """Intrinsics from an explicit JSON file, else the robot file's `intrinsics` entry."""
    if intrinsics_path:
        return CameraIntrinsics.from_json(intrinsics_path)
    with open(robot_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if "intrinsics" not in data:
        raise ValidationError(f"--intrinsics: {robot_path} has no intrinsics; pass a file")
    return CameraIntrinsics.from_dict(data["intrinsics"])
