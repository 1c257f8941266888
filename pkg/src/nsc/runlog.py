from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional


def jsonable(obj: Any) -> Any:
    """Recursively convert numpy/torch scalars and arrays to plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(x) for x in obj]
    if hasattr(obj, "tolist"):
        return jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


@dataclass(frozen=True)
class LogEvent:
    kind: str
    payload: Dict[str, Any]

    def to_json_line(self) -> str:
        return json.dumps({"kind": self.kind, **jsonable(self.payload)}, sort_keys=True)


class RunLog:
    """Append-only JSON-lines log for one run directory."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def append(self, kind: str, payload: Dict[str, Any]) -> None:
        ev = LogEvent(kind=kind, payload=payload)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(ev.to_json_line() + "\n")


def iter_events(path: Path, *, kind: Optional[str] = None) -> Iterable[Dict[str, Any]]:
    try:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            ev = json.loads(line)
            if kind is None or ev.get("kind") == kind:
                yield ev
    except FileNotFoundError:
        return


def write_json(path: Path, obj: Any) -> Path:
    Path(path).write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
