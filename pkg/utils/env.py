"""
Environment-backed settings shared by the tools.

- env_flag: boolean switches such as VERBOSE
- env_threads: worker cap from CTRPOSE_THREADS
- output_root: base directory for timestamped run folders (CTRPOSE_OUTPUT_DIR)
"""

import os
from pathlib import Path

from rich.console import Console

console = Console()

PROJECT_ROOT = Path(__file__).resolve().parent.parent


def env_flag(name: str, default: bool = True) -> bool:
    return os.getenv(name, str(default)).strip().lower() in ("1", "true", "yes")


def env_threads(default: int = 1) -> int:
    """Worker cap from CTRPOSE_THREADS (at least 1)."""
    raw = os.getenv("CTRPOSE_THREADS", str(default))
    try:
        return max(1, int(raw))
    except ValueError:
        console.print(f"[yellow]⚠️ Ignoring invalid CTRPOSE_THREADS={raw!r}[/yellow]")
        return max(1, default)


def output_root() -> Path:
    root = Path(os.getenv("CTRPOSE_OUTPUT_DIR", "output"))
    return root if root.is_absolute() else PROJECT_ROOT / root
