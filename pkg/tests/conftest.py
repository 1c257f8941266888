from __future__ import annotations

import sys
from pathlib import Path

import pytest


# Ensure the src-layout package is importable when running `pytest` without
# installing the project.
_ROOT = Path(__file__).resolve().parents[1]
_SRC = _ROOT / "src"
if _SRC.exists() and str(_SRC) not in sys.path:
    sys.path.insert(0, str(_SRC))
if str(_ROOT / "tests") not in sys.path:
    sys.path.insert(0, str(_ROOT / "tests"))


@pytest.fixture()
def tmp_out(tmp_path: Path) -> Path:
    out = tmp_path / "out"
    out.mkdir()
    return out


@pytest.fixture()
def tmp_nsc_home(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    home = tmp_path / "nsc_home"
    home.mkdir()
    monkeypatch.setenv("NSC_HOME", str(home))
    monkeypatch.delenv("NSC_SEED", raising=False)
    monkeypatch.delenv("NSC_WORKERS", raising=False)
    return home
