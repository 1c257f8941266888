from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

MANIFEST = "manifest.json"
CONTROLLER = "controller.json"
LYAPUNOV = "lyapunov.json"
TRAIN_LOG = "log.jsonl"
SUMMARY = "summary.json"
REPORT = "report.json"
BENCH = "bench.csv"
CHECKPOINTS = "checkpoints"


def nsc_home() -> Path:
    override = os.environ.get("NSC_HOME")
    if override:
        return Path(override).expanduser().resolve()
    return (Path.home() / ".nsc").resolve()


def default_config_path() -> Path:
    return nsc_home() / "config.json"


def trajectory_csv(index: int) -> str:
    return f"traj_{int(index)}.csv"


def checkpoint_dir(out_dir: Path, iteration: int) -> Path:
    return Path(out_dir) / CHECKPOINTS / f"iter_{int(iteration):06d}"


def ensure_out_dir(out_dir: Union[str, Path]) -> Path:
    p = resolve_user_path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def resolve_user_path(path: Union[str, Path], *, base: Optional[Path] = None) -> Path:
    """Resolve a user-provided path.

    - "~" expands to the user's home.
    - Relative paths resolve against `base` when given, else the working directory.
    """

    p = Path(path).expanduser()
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return p.resolve()
