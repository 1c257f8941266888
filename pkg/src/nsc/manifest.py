from __future__ import annotations

import platform
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .config import NscConfig, config_as_dict
from .paths import MANIFEST
from .runlog import read_json, write_json


def _git_stamp() -> Optional[str]:
    try:
        res = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            check=True,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return res.stdout.strip() or None
    except Exception:
        return None


@dataclass(frozen=True)
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seeds: Dict[str, int]
    outputs: List[str]
    nsc_version: str = __version__
    git: Optional[str] = None
    python_version: str = field(default_factory=lambda: sys.version.split()[0])
    platform: str = field(default_factory=platform.platform)


def build_manifest(
    *,
    command: str,
    argv: List[str],
    cfg: NscConfig,
    seeds: Dict[str, int],
    outputs: List[str],
    extra: Optional[Dict[str, Any]] = None,
) -> RunManifest:
    resolved = config_as_dict(cfg)
    if extra:
        resolved = {**resolved, **extra}
    return RunManifest(
        command=command,
        argv=list(argv),
        config=resolved,
        seeds={k: int(v) for k, v in seeds.items()},
        outputs=sorted(outputs),
        git=_git_stamp(),
    )


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    return write_json(Path(out_dir) / MANIFEST, asdict(manifest))


def load_manifest(path: Path) -> RunManifest:
    raw = read_json(path)
    return RunManifest(
        command=str(raw["command"]),
        argv=[str(a) for a in raw.get("argv") or []],
        config=dict(raw.get("config") or {}),
        seeds={str(k): int(v) for k, v in (raw.get("seeds") or {}).items()},
        outputs=[str(o) for o in raw.get("outputs") or []],
        nsc_version=str(raw.get("nsc_version", "0.0.0")),
        git=raw.get("git"),
        python_version=str(raw.get("python_version", "")),
        platform=str(raw.get("platform", "")),
    )
