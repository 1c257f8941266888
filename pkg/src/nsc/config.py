from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional


_TRUTHY = {"1", "true", "yes", "y", "on"}


@dataclass(frozen=True)
class NscConfig:
    # Integration. None falls back to the system catalogue entry.
    dt: Optional[float] = None
    horizon: Optional[float] = None
    divergence_threshold: float = 1e8
    base_seed: int = 0

    # Networks
    relu_knot: float = 0.1
    lyapunov_eps: float = 1e-3
    icnn_hidden: List[int] = field(default_factory=lambda: [32, 32])
    quadratic_hidden: List[int] = field(default_factory=lambda: [32])
    controller_hidden: List[int] = field(default_factory=lambda: [32, 32])

    # Optimizer (Adam)
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    # Losses and training loop
    es_b: float = 2.5
    as_alpha: float = 0.5
    n_samples: int = 500
    zero_streak: int = 10
    max_iters: int = 2000
    exclusion_factor: float = 1e-3
    checkpoint_every: int = 0
    log_every: int = 50

    # Ensembles
    ensemble_workers: int = 4
    ensemble_chunk: int = 64


def _load_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return {}


def _opt_float(raw: Any) -> Optional[float]:
    return None if raw is None else float(raw)


def _int_list(raw: Any, default: List[int]) -> List[int]:
    if raw is None:
        return list(default)
    return [int(x) for x in raw]


def _coerce(cfg: Dict[str, Any]) -> NscConfig:
    # Keep this explicit so unknown keys are ignored.
    d = NscConfig()
    return NscConfig(
        dt=_opt_float(cfg.get("dt")),
        horizon=_opt_float(cfg.get("horizon")),
        divergence_threshold=float(cfg.get("divergence_threshold", d.divergence_threshold)),
        base_seed=int(cfg.get("base_seed", d.base_seed)),
        relu_knot=float(cfg.get("relu_knot", d.relu_knot)),
        lyapunov_eps=float(cfg.get("lyapunov_eps", d.lyapunov_eps)),
        icnn_hidden=_int_list(cfg.get("icnn_hidden"), d.icnn_hidden),
        quadratic_hidden=_int_list(cfg.get("quadratic_hidden"), d.quadratic_hidden),
        controller_hidden=_int_list(cfg.get("controller_hidden"), d.controller_hidden),
        lr=float(cfg.get("lr", d.lr)),
        beta1=float(cfg.get("beta1", d.beta1)),
        beta2=float(cfg.get("beta2", d.beta2)),
        adam_eps=float(cfg.get("adam_eps", d.adam_eps)),
        es_b=float(cfg.get("es_b", d.es_b)),
        as_alpha=float(cfg.get("as_alpha", d.as_alpha)),
        n_samples=int(cfg.get("n_samples", d.n_samples)),
        zero_streak=int(cfg.get("zero_streak", d.zero_streak)),
        max_iters=int(cfg.get("max_iters", d.max_iters)),
        exclusion_factor=float(cfg.get("exclusion_factor", d.exclusion_factor)),
        checkpoint_every=int(cfg.get("checkpoint_every", d.checkpoint_every)),
        log_every=int(cfg.get("log_every", d.log_every)),
        ensemble_workers=int(cfg.get("ensemble_workers", d.ensemble_workers)),
        ensemble_chunk=int(cfg.get("ensemble_chunk", d.ensemble_chunk)),
    )


def env_truthy(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in _TRUTHY


def load_config(path: Optional[Path] = None) -> NscConfig:
    """Load config (defaults, then optional JSON file, then environment)."""
    cfg = _coerce(_load_json(Path(path))) if path else NscConfig()

    # Environment overrides (highest precedence below explicit CLI flags).
    env_seed = os.environ.get("NSC_SEED")
    if env_seed is not None and env_seed.strip() != "":
        cfg = replace(cfg, base_seed=int(env_seed.strip()))

    env_workers = os.environ.get("NSC_WORKERS")
    if env_workers is not None and env_workers.strip() != "":
        cfg = replace(cfg, ensemble_workers=max(1, int(env_workers.strip())))

    return cfg


def config_as_dict(cfg: NscConfig) -> Dict[str, Any]:
    return asdict(cfg)


def merge_overrides(cfg: NscConfig, overrides: Dict[str, Any]) -> NscConfig:
    """Apply explicit (non-None) overrides on top of a loaded config."""
    picked = {k: v for k, v in overrides.items() if v is not None}
    if not picked:
        return cfg
    return _coerce({**asdict(cfg), **picked})
