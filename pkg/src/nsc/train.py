"""Empirical stabilization losses and the training loop.

ES pairs a learned Lyapunov function with the controller and penalizes
    relu(b LV/V - ||grad V^T g_u||^2 / V^2)
per sample. AS trains the controller alone against
    relu((alpha - 2) ||x^T g_u||^2 + ||x||^2 (c <x, f> + ||g_u||_F^2)).
Both are evaluated in the system's error coordinates.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import NscConfig
from .control import Controller, controller_to_dict
from .diffnet import (
    DTYPE,
    ArrayLike,
    adam_step,
    as_tensor,
    batched_value_grad_hess,
    bind,
    make_adam,
    param_gradient,
    params_of,
)
from .errors import ConfigurationError, InvalidParameterError, LyapunovInvariantError
from .lyapunov import LyapunovNet, generator_terms, lyapunov_to_dict
from .paths import CONTROLLER, LYAPUNOV, checkpoint_dir
from .runlog import RunLog, write_json
from .sde import SdeSystem

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]


class LossKind(str, Enum):
    ES = "es"
    AS = "as"


class DriftFactor(str, Enum):
    TWO = "two"
    ONE = "one"

    @property
    def coefficient(self) -> float:
        return 2.0 if self is DriftFactor.TWO else 1.0


class Schedule(str, Enum):
    JOINT = "joint"
    ALTERNATE = "alternate"


@dataclass(frozen=True)
class Box:
    low: Tuple[float, ...]
    high: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "low", tuple(float(v) for v in self.low))
        object.__setattr__(self, "high", tuple(float(v) for v in self.high))
        if len(self.low) != len(self.high) or not self.low:
            raise InvalidParameterError("box bounds must be non-empty and of equal length")
        if any(not (lo < hi) for lo, hi in zip(self.low, self.high)):
            raise InvalidParameterError(f"box needs low < high in every coordinate, got {self.low} / {self.high}")

    @classmethod
    def cube(cls, half: float, d: int) -> "Box":
        return cls((-float(half),) * int(d), (float(half),) * int(d))

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def radius(self) -> float:
        """Largest distance from 0 to a point of the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.low), np.abs(self.high))))

    @property
    def min_half_width(self) -> float:
        return float(min(hi - lo for lo, hi in zip(self.low, self.high)) / 2.0)


def _rng(seed: Seed) -> np.random.Generator:
    entropy = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else int(seed)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_domain(box: Box, n: int, seed: Seed = 0, exclusion: float = 0.0) -> torch.Tensor:
    """n i.i.d. uniform points of the box with ||x|| >= exclusion, by rejection."""
    if int(n) < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n!r}")
    if exclusion < 0 or exclusion >= box.min_half_width:
        raise InvalidParameterError(
            f"exclusion radius {exclusion!r} must be in [0, {box.min_half_width!r})"
        )
    rng = _rng(seed)
    lo = np.asarray(box.low)
    hi = np.asarray(box.high)
    kept: List[np.ndarray] = []
    count = drawn = 0
    while count < n:
        m = max(2 * (n - count), 64)
        pts = lo + (hi - lo) * rng.random((m, box.dim))
        drawn += m
        ok = pts[np.linalg.norm(pts, axis=1) >= exclusion]
        kept.append(ok)
        count += len(ok)
        if drawn >= 1000 and 1.0 - count / drawn > 0.99:
            raise ConfigurationError(f"rejection rate above 0.99 for exclusion radius {exclusion!r}")
    return torch.as_tensor(np.concatenate(kept)[: int(n)], dtype=DTYPE)


# --------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------


def _error_coordinates(
    sys: SdeSystem, u: Optional[Controller], x: torch.Tensor, u_params: Optional[Mapping[str, torch.Tensor]] = None
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(Px, Pf(x), P g_u(x)) for a batch of states."""
    G = sys.diffusion(x)
    if u is not None:
        G = G + bind(u, u_params)(x)
    return sys.error(x), sys.error(sys.drift(x)), sys.error_diffusion(G)


def es_parts(
    V: LyapunovNet,
    u: Optional[Controller],
    sys: SdeSystem,
    samples: ArrayLike,
    *,
    params: Optional[Mapping[str, Any]] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample (V, LV, ||grad V^T g_u||^2)."""
    params = params or {}
    x = as_tensor(samples)
    e, fe, G = _error_coordinates(sys, u, x, params.get("u"))
    v, grad, hess = batched_value_grad_hess(bind(V, params.get("V")), e)
    bad = torch.nonzero(v <= 0)
    if bad.numel():
        i = int(bad[0, 0])
        raise LyapunovInvariantError(i, float(v[i]))
    lv, flow = generator_terms(grad, hess, fe, G)
    return v, lv, flow


def es_terms(V, u, sys, samples, b: float, *, params=None) -> torch.Tensor:
    v, lv, flow = es_parts(V, u, sys, samples, params=params)
    return F.relu(b * lv / v - flow / (v * v))


def as_parts(
    u: Optional[Controller],
    sys: SdeSystem,
    samples: ArrayLike,
    *,
    params: Optional[Mapping[str, Any]] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample (||x||^2, <x, f>, ||g_u||_F^2, ||x^T g_u||^2) in error coordinates."""
    params = params or {}
    x = as_tensor(samples)
    e, fe, G = _error_coordinates(sys, u, x, params.get("u"))
    xg = torch.einsum("ni,nir->nr", e, G)
    return (e * e).sum(-1), (e * fe).sum(-1), (G * G).sum((-2, -1)), (xg * xg).sum(-1)


def as_terms(u, sys, samples, alpha: float, drift_factor: DriftFactor = DriftFactor.TWO, *, params=None) -> torch.Tensor:
    n2, xf, gf, xg = as_parts(u, sys, samples, params=params)
    c = DriftFactor(drift_factor).coefficient
    return F.relu((alpha - 2.0) * xg + n2 * (c * xf + gf))


def _check_b(b: float) -> float:
    if not float(b) > 2.0:
        raise InvalidParameterError(f"ES loss needs b > 2, got {b!r}")
    return float(b)


def _check_alpha(alpha: float) -> float:
    if not 0.0 < float(alpha) < 1.0:
        raise InvalidParameterError(f"AS loss needs alpha in (0, 1), got {alpha!r}")
    return float(alpha)


def es_loss(V: LyapunovNet, u: Optional[Controller], sys: SdeSystem, samples: ArrayLike, b: float) -> float:
    b = _check_b(b)
    with torch.no_grad():
        return float(es_terms(V, u, sys, samples, b).mean())


def as_loss(
    u: Optional[Controller],
    sys: SdeSystem,
    samples: ArrayLike,
    alpha: float,
    drift_factor: DriftFactor = DriftFactor.TWO,
) -> float:
    alpha = _check_alpha(alpha)
    with torch.no_grad():
        return float(as_terms(u, sys, samples, alpha, drift_factor).mean())


def es_margins(V: LyapunovNet, u: Optional[Controller], sys: SdeSystem, samples: ArrayLike, b: float) -> torch.Tensor:
    """||grad V^T g_u||^2 / V^2 - b LV / V; the exponential condition holds where this is >= 0."""
    v, lv, flow = es_parts(V, u, sys, samples)
    return (flow / (v * v) - float(b) * lv / v).detach()


def as_margins(u: Optional[Controller], sys: SdeSystem, samples: ArrayLike, alpha: float) -> torch.Tensor:
    """||x||^2 (2<x,f> + ||g_u||_F^2) - (2 - alpha)||x^T g_u||^2; attractiveness holds where this is <= 0."""
    with torch.no_grad():
        n2, xf, gf, xg = as_parts(u, sys, samples)
        return n2 * (2.0 * xf + gf) - (2.0 - float(alpha)) * xg


# --------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    box: Box
    loss: LossKind = LossKind.AS
    b: float = 2.5
    alpha: float = 0.5
    drift_factor: DriftFactor = DriftFactor.TWO
    n_samples: int = 500
    resample: bool = True
    max_iters: int = 2000
    zero_streak: int = 10
    seed: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0
    lr_step: int = 0
    schedule: Schedule = Schedule.JOINT
    exclusion: Optional[float] = None
    exclusion_factor: float = 1e-3
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "drift_factor", DriftFactor(self.drift_factor))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        if self.loss is LossKind.ES:
            _check_b(self.b)
        else:
            _check_alpha(self.alpha)
        for name in ("n_samples", "max_iters", "zero_streak"):
            if int(getattr(self, name)) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise InvalidParameterError(f"learning rate must be positive, got {self.lr!r}")

    @property
    def exclusion_radius(self) -> float:
        return float(self.exclusion) if self.exclusion is not None else self.exclusion_factor * self.box.radius

    def lr_at(self, iteration: int) -> float:
        if self.lr_step > 0 and self.lr_decay != 1.0:
            return self.lr * self.lr_decay ** (iteration // self.lr_step)
        return self.lr

    @classmethod
    def from_config(cls, cfg: NscConfig, *, box: Box, loss: Union[str, LossKind], **overrides: Any) -> "TrainConfig":
        base = cls(
            box=box,
            loss=LossKind(loss),
            b=cfg.es_b,
            alpha=cfg.as_alpha,
            n_samples=cfg.n_samples,
            max_iters=cfg.max_iters,
            zero_streak=cfg.zero_streak,
            seed=cfg.base_seed,
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            adam_eps=cfg.adam_eps,
            exclusion_factor=cfg.exclusion_factor,
            checkpoint_every=cfg.checkpoint_every,
            log_every=cfg.log_every,
        )
        picked = {k: v for k, v in overrides.items() if v is not None}
        return replace(base, **picked) if picked else base


@dataclass(frozen=True)
class LossReport:
    iteration: int
    loss: float
    active: int
    wall_time: float
    lr: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    V: Optional[LyapunovNet]
    u: Controller
    reports: List[LossReport]
    converged: bool
    best_loss: float
    best_iteration: int
    wall_time: float
    extra: Dict[str, Any] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Any]:
        return iter((self.V, self.u, self.reports))

    @property
    def iterations(self) -> int:
        return len(self.reports)

    @property
    def final_loss(self) -> float:
        return self.reports[-1].loss if self.reports else math.nan

    @property
    def time_per_iteration(self) -> float:
        return self.wall_time / max(1, self.iterations)


def _snapshot(nets: Mapping[str, torch.nn.Module]) -> Dict[str, Dict[str, torch.Tensor]]:
    return {name: {k: v.detach().clone() for k, v in net.state_dict().items()} for name, net in nets.items()}


def write_checkpoint(out_dir: Path, V: Optional[LyapunovNet], u: Controller) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / CONTROLLER, controller_to_dict(u))
    if V is not None:
        write_json(out_dir / LYAPUNOV, lyapunov_to_dict(V))
    return out_dir


def train(
    cfg: TrainConfig,
    sys: SdeSystem,
    V: Optional[LyapunovNet],
    u: Controller,
    *,
    log_path: Optional[Path] = None,
    checkpoint_root: Optional[Path] = None,
) -> TrainResult:
    """Adam descent on the selected loss; stop after `zero_streak` consecutive exact-zero batches.

    Without convergence the best-so-far parameters are restored and the
    result is flagged `converged=False`.
    """
    if cfg.loss is LossKind.ES and V is None:
        raise ConfigurationError("ES training needs a Lyapunov network")
    if (u.d, u.r) != (sys.d, sys.r):
        raise ConfigurationError(f"controller is {u.d}x{u.r}, system needs {sys.d}x{sys.r}")
    if cfg.box.dim != sys.d:
        raise ConfigurationError(f"training box has dimension {cfg.box.dim}, system has {sys.d}")

    nets: Dict[str, torch.nn.Module] = {"u": u}
    if cfg.loss is LossKind.ES:
        nets["V"] = V
    params = {name: params_of(net) for name, net in nets.items()}
    if not any(params.values()):
        raise ConfigurationError("nothing to train: the networks have no parameters")
    optimizers = {
        name: make_adam(p, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        for name, p in params.items()
        if p
    }

    excl = cfg.exclusion_radius
    fixed = None if cfg.resample else sample_domain(cfg.box, cfg.n_samples, cfg.seed, excl)
    run_log = RunLog(log_path) if log_path is not None else None

    def loss_fn(p: Dict[str, Any], batch: torch.Tensor):
        if cfg.loss is LossKind.ES:
            terms = es_terms(V, u, sys, batch, cfg.b, params=p)
        else:
            terms = as_terms(u, sys, batch, cfg.alpha, cfg.drift_factor, params=p)
        return terms.mean(), terms, None

    reports: List[LossReport] = []
    best = _snapshot(nets)
    best_loss, best_it = math.inf, -1
    streak = 0
    converged = False
    started = time.perf_counter()

    for it in range(cfg.max_iters):
        tick = time.perf_counter()
        lr = cfg.lr_at(it)
        for opt in optimizers.values():
            opt.set_lr(lr)
        batch = fixed if fixed is not None else sample_domain(cfg.box, cfg.n_samples, (cfg.seed, it), excl)

        res = param_gradient(lambda p: loss_fn(p, batch), params)
        active = int((res.terms > 0).sum())

        if res.loss < best_loss:
            best_loss, best_it = res.loss, it
            best = _snapshot(nets)

        if res.loss == 0.0:
            streak += 1
        else:
            streak = 0
        if streak < cfg.zero_streak:
            if cfg.schedule is Schedule.ALTERNATE and len(optimizers) > 1:
                active_nets = ["V"] if it % 2 == 0 else ["u"]
            else:
                active_nets = list(optimizers)
            for name in active_nets:
                adam_step(optimizers[name], params[name], res.grads[name])

        report = LossReport(iteration=it, loss=res.loss, active=active, wall_time=time.perf_counter() - tick, lr=lr)
        reports.append(report)
        if run_log is not None:
            run_log.append("loss", report.to_dict())
        if cfg.log_every and it % cfg.log_every == 0:
            logger.info("iter %d loss %.6g active %d/%d lr %.3g", it, res.loss, active, cfg.n_samples, lr)
        if checkpoint_root is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            write_checkpoint(checkpoint_dir(checkpoint_root, it + 1), V if "V" in nets else None, u)

        if streak >= cfg.zero_streak:
            converged = True
            break

    wall = time.perf_counter() - started
    if not converged:
        with torch.no_grad():
            for name, net in nets.items():
                net.load_state_dict(best[name])
        logger.warning("no convergence after %d iterations; best loss %.6g at iteration %d", cfg.max_iters, best_loss, best_it)
    else:
        logger.info("converged after %d iterations (%.2fs)", len(reports), wall)
    if run_log is not None:
        run_log.append(
            "stop",
            {"converged": converged, "iterations": len(reports), "wall_time": wall, "best_loss": best_loss, "best_iteration": best_it},
        )
    return TrainResult(
        V=V,
        u=u,
        reports=reports,
        converged=converged,
        best_loss=best_loss,
        best_iteration=best_it,
        wall_time=wall,
    )
