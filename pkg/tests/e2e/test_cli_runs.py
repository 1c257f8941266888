from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path


def _env(home: Path) -> dict:
    src_dir = Path(__file__).resolve().parents[2] / "src"
    env = {
        **os.environ,
        "NSC_HOME": str(home),
        # Ensure `python -m nsc ...` works from a source checkout (without requiring
        # an editable install).
        "PYTHONPATH": str(src_dir) + (os.pathsep + os.environ.get("PYTHONPATH", ""))
        if os.environ.get("PYTHONPATH")
        else str(src_dir),
    }
    env.pop("NSC_SEED", None)
    return env


def _nsc(home: Path, *args: str, check: bool = True) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "nsc", *args],
        env=_env(home),
        check=check,
        capture_output=True,
        text=True,
    )


def test_nsc_systems_lists_catalogue(tmp_nsc_home: Path):
    res = _nsc(tmp_nsc_home, "systems")
    names = [line.split("\t")[0] for line in res.stdout.splitlines()]
    assert "prop1" in names and "gbm" in names


def test_nsc_bounds_writes_report(tmp_nsc_home: Path, tmp_out: Path):
    res = _nsc(
        tmp_nsc_home,
        "bounds", "--theorem", "3", "--k", "2", "--L", "1", "--x0", "1", "--eps", "0.1", "--out-dir", str(tmp_out),
    )
    first = (res.stdout.splitlines() or [""])[0]
    report = json.loads(Path(first.strip()).read_text(encoding="utf-8"))
    assert abs(report["T_eps"] - 2.302585) < 1e-6


def test_nsc_simulate_then_replay(tmp_nsc_home: Path, tmp_path: Path):
    run, again = tmp_path / "run", tmp_path / "again"
    _nsc(tmp_nsc_home, "--seed", "5", "simulate", "--system", "gbm", "--n", "4", "--T", "0.1", "--dt", "0.01", "--out-dir", str(run))
    _nsc(tmp_nsc_home, "replay", str(run / "manifest.json"), "--out-dir", str(again))
    for i in range(4):
        assert (run / f"traj_{i}.csv").read_bytes() == (again / f"traj_{i}.csv").read_bytes()


def test_nsc_usage_error_exit_code(tmp_nsc_home: Path, tmp_out: Path):
    res = _nsc(tmp_nsc_home, "simulate", "--system", "pendulum", "--out-dir", str(tmp_out), check=False)
    assert res.returncode == 2
    assert "unknown system" in res.stderr
