"""
Helpers for restricting a command to a subset of dataset scenes.

- load_selected_scenes: reads scene indices from a text file (CLI or .env)
- filter_scenes: keeps only the selected samples, preserving dataset order

Priority of selection:
1. CLI argument (--scenes)
2. .env variable (CTRPOSE_SCENES_FILE)
3. None (process ALL scenes)
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Optional, Set

from ctrpose.errors import ValidationError


def load_selected_scenes(cli_file: Optional[str] = None) -> Optional[Set[int]]:
    """
    Load scene indices from a .txt file, one per line (blank lines and `#` comments skipped).
    Relative paths resolve against the repository root.

    Returns:
        Set of scene indices, or None if no file is configured.
    """
    file_path = cli_file or os.getenv("CTRPOSE_SCENES_FILE")
    if not file_path:
        return None

    p = Path(file_path)
    if not p.is_absolute():
        project_root = Path(__file__).resolve().parent.parent
        p = (project_root / p).resolve()

    if not p.exists():
        raise ValidationError(f"Scenes file not found: {p}")

    scenes: Set[int] = set()
    with p.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                scenes.add(int(line))
            except ValueError:
                raise ValidationError(f"{p}:{lineno}: not a scene index: {line!r}") from None

    return scenes or None


def filter_scenes(samples: Iterable, selected: Optional[Set[int]]) -> list:
    """Samples whose `.index` is in `selected`; everything when `selected` is None."""
    samples = list(samples)
    if not selected:
        return samples
    kept = [s for s in samples if s.index in selected]
    if not kept:
        raise ValidationError("scene selection matches no samples in the dataset")
    return kept
