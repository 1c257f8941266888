from __future__ import annotations

import json
import math

import numpy as np
import torch

from nsc.config import NscConfig, load_config, merge_overrides
from nsc.manifest import build_manifest, load_manifest, write_manifest
from nsc.paths import MANIFEST, checkpoint_dir, default_config_path, nsc_home, resolve_user_path, trajectory_csv
from nsc.runlog import RunLog, iter_events, jsonable, read_json, write_json


def test_defaults_without_file(tmp_nsc_home):
    cfg = load_config(None)
    assert cfg == NscConfig()
    assert cfg.dt is None and cfg.horizon is None and cfg.es_b == 2.5 and cfg.as_alpha == 0.5
    assert default_config_path() == tmp_nsc_home.resolve() / "config.json"
    assert nsc_home() == tmp_nsc_home.resolve()


def test_file_values_and_unknown_keys(tmp_nsc_home):
    path = tmp_nsc_home / "config.json"
    path.write_text(json.dumps({"dt": 0.01, "icnn_hidden": [8, 4], "colour": "blue"}), encoding="utf-8")
    cfg = load_config(path)
    assert cfg.dt == 0.01
    assert cfg.icnn_hidden == [8, 4]
    assert cfg.max_iters == NscConfig().max_iters


def test_missing_file_falls_back_to_defaults(tmp_nsc_home):
    assert load_config(tmp_nsc_home / "absent.json") == NscConfig()


def test_environment_overrides(tmp_nsc_home, monkeypatch):
    monkeypatch.setenv("NSC_SEED", "17")
    monkeypatch.setenv("NSC_WORKERS", "0")
    cfg = load_config(None)
    assert cfg.base_seed == 17
    assert cfg.ensemble_workers == 1


def test_merge_overrides_skips_none(tmp_nsc_home):
    cfg = load_config(None)
    assert merge_overrides(cfg, {"dt": None}) is cfg
    out = merge_overrides(cfg, {"dt": "0.02", "base_seed": 5, "lr": None})
    assert out.dt == 0.02 and out.base_seed == 5 and out.lr == cfg.lr


def test_paths():
    assert trajectory_csv(3) == "traj_3.csv"
    assert checkpoint_dir("runs", 12).parts[-2:] == ("checkpoints", "iter_000012")
    base = resolve_user_path("a/b", base=resolve_user_path("/tmp"))
    assert base.parts[-2:] == ("a", "b")


def test_jsonable_converts_arrays_and_non_finite():
    out = jsonable({"a": np.array([1.0, np.inf]), "b": torch.tensor(2.5), "c": (math.nan,), 3: "x"})
    assert out == {"a": [1.0, None], "b": 2.5, "c": [None], "3": "x"}


def test_runlog_appends_and_filters(tmp_out):
    log = RunLog(tmp_out / "log.jsonl")
    log.append("loss", {"iteration": 0, "loss": 1.5})
    log.append("loss", {"iteration": 1, "loss": float("inf")})
    log.append("stop", {"converged": False})
    losses = list(iter_events(log.path, kind="loss"))
    assert [e["iteration"] for e in losses] == [0, 1]
    assert losses[1]["loss"] is None
    assert len(list(iter_events(log.path))) == 3
    assert list(iter_events(tmp_out / "missing.jsonl")) == []
    assert [e["kind"] for e in iter_events(log.path)] == ["loss", "loss", "stop"]


def test_write_and_read_json(tmp_out):
    path = write_json(tmp_out / "x.json", {"v": np.float64(0.25)})
    assert read_json(path) == {"v": 0.25}


def test_manifest_roundtrip(tmp_out, tmp_nsc_home):
    cfg = load_config(None)
    m = build_manifest(
        command="simulate",
        argv=["simulate", "--system", "gbm"],
        cfg=cfg,
        seeds={"base_seed": 4},
        outputs=["summary.json", "manifest.json"],
        extra={"system": "gbm"},
    )
    path = write_manifest(tmp_out, m)
    assert path.name == MANIFEST
    back = load_manifest(path)
    assert back.command == "simulate"
    assert back.seeds == {"base_seed": 4}
    assert back.outputs == ["manifest.json", "summary.json"]
    assert back.config["system"] == "gbm"
    assert back.config["dt"] == cfg.dt
    assert back.nsc_version == m.nsc_version
