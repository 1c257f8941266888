"""Benchmark suites: train where needed, simulate, and tabulate one row per method."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import NscConfig
from .control import Controller, LinearController, build_controller, square_law_controller
from .errors import ConfigurationError, NscError
from .lyapunov import build_lyapunov
from .sde import DEFAULT_DT, EnsembleResult, SdeSystem, X0Sampler, ensemble
from .systems import annulus_sampler, get_system, make_prop1, make_stuart_coupled, sync_error_map
from .train import Box, LossKind, TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

BENCH_COLUMNS = [
    "suite",
    "method",
    "status",
    "train_iters",
    "train_time",
    "time_per_iter",
    "final_loss",
    "n",
    "fraction_converged",
    "mean_hitting_time",
    "mean_energy",
    "distance_at_T",
    "convergence_time",
    "n_diverged",
    "note",
]


@dataclass
class BenchRow:
    suite: str
    method: str
    status: str = "ok"
    metrics: Dict[str, Any] = field(default_factory=dict)
    note: str = ""

    def as_csv(self) -> Dict[str, Any]:
        row = {c: "" for c in BENCH_COLUMNS}
        row.update(suite=self.suite, method=self.method, status=self.status, note=self.note)
        for k, v in self.metrics.items():
            if k in row:
                row[k] = "" if v is None else (f"{v:.10g}" if isinstance(v, float) else v)
        return row


def write_bench_csv(path: Path, rows: Sequence[BenchRow]) -> Path:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())
    return Path(path)


def _dt(cfg: NscConfig, fallback: float = DEFAULT_DT) -> float:
    return cfg.dt if cfg.dt is not None else fallback


def _ensemble_metrics(res: EnsembleResult, eps: float) -> Dict[str, Any]:
    return {
        "n": res.n,
        "fraction_converged": res.fraction_converged(eps, res.T),
        "mean_hitting_time": res.mean_hitting_time(eps),
        "mean_energy": res.mean_energy(res.T, eps),
        "distance_at_T": res.distance_at(res.T),
        "convergence_time": res.convergence_time(0.05),
        "n_diverged": res.n_diverged(),
    }


def _train_metrics(result: TrainResult) -> Dict[str, Any]:
    return {
        "train_iters": result.iterations,
        "train_time": result.wall_time,
        "time_per_iter": result.time_per_iteration,
        "final_loss": result.final_loss,
    }


def _guarded(suite: str, method: str, fn: Callable[[], BenchRow]) -> BenchRow:
    try:
        return fn()
    except NscError as exc:
        logger.warning("%s/%s failed: %s", suite, method, exc)
        return BenchRow(suite=suite, method=method, status="error", note=f"{type(exc).__name__}: {exc}")


# --------------------------------------------------------------------
# Linear gain sweep
# --------------------------------------------------------------------


@dataclass
class GainSweep:
    gains: List[float]
    mean_log1p: List[float]
    fractions: List[float]
    threshold: float
    k_star: Optional[float]


def linear_gain_sweep(
    sys: SdeSystem,
    gains: Sequence[float],
    x0: X0Sampler | Sequence[float],
    *,
    n: int = 100,
    dt: float = 1e-3,
    T: float = 1.0,
    eps: float = 0.1,
    base_seed: int = 0,
    threshold: float = 0.9,
    workers: int = 4,
) -> GainSweep:
    """Per gain k: mean log(1 + |x(T)|) and fraction converged under u = kx.

    k_star is the smallest swept gain from which every larger gain reaches
    `threshold` convergence.
    """
    logs: List[float] = []
    fracs: List[float] = []
    for k in gains:
        res = ensemble(sys, LinearController(sys.d, float(k)), x0, n, dt, T, eps, base_seed, workers=workers)
        final = np.array([np.linalg.norm(t.states[-1]) if not t.diverged else math.inf for t in res.trajectories])
        with np.errstate(over="ignore"):
            logs.append(float(np.mean(np.log1p(final))))
        fracs.append(res.fraction_converged(eps, T))
        logger.info("gain %.2f: fraction converged %.2f", k, fracs[-1])
    k_star = None
    for k, frac in zip(reversed(list(gains)), reversed(fracs)):
        if frac < threshold:
            break
        k_star = float(k)
    return GainSweep(gains=[float(k) for k in gains], mean_log1p=logs, fractions=fracs, threshold=threshold, k_star=k_star)


# --------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------


def _train_as(cfg: NscConfig, name: str, *, alpha: Optional[float] = None, seed_offset: int = 0, **kw: Any) -> TrainResult:
    sys, spec = get_system(name)
    p = spec.params()
    low, high = spec.box(p)
    u = build_controller(spec.controller, sys.d, sys.r, hidden=cfg.controller_hidden, seed=cfg.base_seed + seed_offset, **kw)
    tc = TrainConfig.from_config(cfg, box=Box(low, high), loss=LossKind.AS, alpha=alpha)
    return train(tc, sys, None, u)


def suite_prop1(cfg: NscConfig) -> List[BenchRow]:
    sys = make_prop1()
    sampler = annulus_sampler(0.1, 2.0)
    rows = []
    methods: Dict[str, Optional[Controller]] = {
        "square-law": square_law_controller(2.0),
        "linear-k1": LinearController(1, 1.0),
        "linear-k2": LinearController(1, 2.0),
        "uncontrolled": None,
    }
    for method, u in methods.items():
        def run(u=u, method=method) -> BenchRow:
            res = ensemble(sys, u, sampler, 100, _dt(cfg), 10.0, 0.05, cfg.base_seed, workers=cfg.ensemble_workers)
            return BenchRow("prop1", method, metrics=_ensemble_metrics(res, 0.05))

        rows.append(_guarded("prop1", method, run))

    # Outside |x0| < exp(k^2/2) the linear gains lose almost every path.
    for k, lo, hi in [(1.0, 3.0, 6.0), (2.0, 20.0, 40.0)]:
        def run_far(k=k, lo=lo, hi=hi) -> BenchRow:
            res = ensemble(sys, LinearController(1, k), annulus_sampler(lo, hi), 100, _dt(cfg), 10.0, 0.05, cfg.base_seed, workers=cfg.ensemble_workers)
            return BenchRow("prop1", f"linear-k{k:g}-far", metrics=_ensemble_metrics(res, 0.05), note=f"|x0| in [{lo:g}, {hi:g}]")

        rows.append(_guarded("prop1", f"linear-k{k:g}-far", run_far))
    return rows


def suite_energy_compare(cfg: NscConfig) -> List[BenchRow]:
    sys, spec = get_system("log1p")
    sampler = spec.x0_sampler(spec.params())
    rows: List[BenchRow] = []

    def run_linear() -> BenchRow:
        res = ensemble(sys, LinearController(1, 6.0), sampler, 100, _dt(cfg), 1.0, 0.1, cfg.base_seed, workers=cfg.ensemble_workers)
        return BenchRow("energy-compare", "linear-k6", metrics=_ensemble_metrics(res, 0.1))

    def run_as() -> BenchRow:
        trained = _train_as(cfg, "log1p", alpha=0.9)
        res = ensemble(sys, trained.u, sampler, 100, _dt(cfg), 1.0, 0.1, cfg.base_seed, workers=cfg.ensemble_workers)
        note = "" if trained.converged else "training did not converge"
        return BenchRow("energy-compare", "as", metrics={**_train_metrics(trained), **_ensemble_metrics(res, 0.1)}, note=note)

    rows.append(_guarded("energy-compare", "linear-k6", run_linear))
    rows.append(_guarded("energy-compare", "as", run_as))

    def run_sweep() -> BenchRow:
        sweep = linear_gain_sweep(sys, [0.2 * j for j in range(1, 51)], [200.0], n=100, dt=_dt(cfg), base_seed=cfg.base_seed, workers=cfg.ensemble_workers)
        k = "none" if sweep.k_star is None else f"{sweep.k_star:.1f}"
        return BenchRow("energy-compare", "linear-sweep", metrics={"n": 100}, note=f"k_star={k}")

    rows.append(_guarded("energy-compare", "linear-sweep", run_sweep))
    return rows


def suite_harmonic(cfg: NscConfig) -> List[BenchRow]:
    sys, spec = get_system("harmonic")
    p = spec.params()
    box = Box(*spec.box(p))
    sampler = spec.x0_sampler(p)
    rows: List[BenchRow] = []

    def method_row(method: str, loss: LossKind, lyapunov: Optional[str]) -> BenchRow:
        u = build_controller(spec.controller, sys.d, sys.r, hidden=cfg.controller_hidden, seed=cfg.base_seed)
        V = None
        if lyapunov is not None:
            hidden = cfg.icnn_hidden if lyapunov == "icnn" else cfg.quadratic_hidden
            V = build_lyapunov(lyapunov, sys.d, hidden=hidden, eps=cfg.lyapunov_eps, knot=cfg.relu_knot, seed=cfg.base_seed)
        trained = train(TrainConfig.from_config(cfg, box=box, loss=loss), sys, V, u)
        res = ensemble(sys, trained.u, sampler, 20, _dt(cfg), 4.0, 0.05, cfg.base_seed, workers=cfg.ensemble_workers)
        note = "" if trained.converged else "training did not converge"
        return BenchRow("harmonic", method, metrics={**_train_metrics(trained), **_ensemble_metrics(res, 0.05)}, note=note)

    for method, loss, lyap in [("ES(+ICNN)", LossKind.ES, "icnn"), ("ES(+Quadratic)", LossKind.ES, "quadratic"), ("AS", LossKind.AS, None)]:
        rows.append(_guarded("harmonic", method, lambda m=method, l=loss, v=lyap: method_row(m, l, v)))

    def uncontrolled() -> BenchRow:
        res = ensemble(sys, None, sampler, 20, _dt(cfg), 4.0, 0.05, cfg.base_seed, workers=cfg.ensemble_workers)
        return BenchRow("harmonic", "uncontrolled", metrics=_ensemble_metrics(res, 0.05))

    rows.append(_guarded("harmonic", "uncontrolled", uncontrolled))
    return rows


def suite_stuart_single(cfg: NscConfig) -> List[BenchRow]:
    sys, spec = get_system("stuart-single")
    sampler = spec.x0_sampler(spec.params())
    rows: List[BenchRow] = []

    def controlled() -> BenchRow:
        trained = _train_as(cfg, "stuart-single")
        res = ensemble(sys, trained.u, sampler, 30, _dt(cfg, spec.dt), spec.horizon, spec.eps, cfg.base_seed, workers=cfg.ensemble_workers)
        near = float(np.mean(res.distances_at(spec.horizon) < 0.1))
        return BenchRow(
            "stuart-single", "as",
            metrics={**_train_metrics(trained), **_ensemble_metrics(res, spec.eps)},
            note=f"fraction |rho(T)-rho*|<0.1: {near:.3f}",
        )

    def uncontrolled() -> BenchRow:
        inside = annulus_sampler(0.5, 4.5)
        res = ensemble(sys, None, lambda rng: -np.abs(inside(rng)), 30, _dt(cfg, spec.dt), spec.horizon, spec.eps, cfg.base_seed, workers=cfg.ensemble_workers)
        rho_star = sys.params["rho_star"]
        collapsed = float(np.mean([abs(t.states[-1, 0] + rho_star) < 0.1 for t in res.trajectories]))
        return BenchRow("stuart-single", "uncontrolled-inside", metrics=_ensemble_metrics(res, spec.eps), note=f"fraction rho(T)~0: {collapsed:.3f}")

    rows.append(_guarded("stuart-single", "as", controlled))
    rows.append(_guarded("stuart-single", "uncontrolled-inside", uncontrolled))
    return rows


def suite_stuart_coupled(cfg: NscConfig) -> List[BenchRow]:
    sys, spec = get_system("stuart-coupled")
    p = spec.params()
    sampler = spec.x0_sampler(p)
    rows: List[BenchRow] = []

    def on_manifold() -> BenchRow:
        z = np.tile([0.6, -0.3], int(p["n"]))
        res = ensemble(sys, None, z, 1, _dt(cfg), spec.horizon, None, cfg.base_seed, workers=1)
        worst = float(np.max(res.trajectories[0].distance))
        return BenchRow("stuart-coupled", "uncontrolled-on-manifold", metrics={"n": 1, "distance_at_T": res.distance_at(spec.horizon)}, note=f"max deviation {worst:.3g}")

    def controlled() -> BenchRow:
        P = sync_error_map(int(p["n"]))
        trained = _train_as(cfg, "stuart-coupled", input_map=P.numpy())
        res = ensemble(sys, trained.u, sampler, 20, _dt(cfg), spec.horizon, spec.eps, cfg.base_seed, workers=cfg.ensemble_workers)
        return BenchRow("stuart-coupled", "as", metrics={**_train_metrics(trained), **_ensemble_metrics(res, spec.eps)})

    rows.append(_guarded("stuart-coupled", "uncontrolled-on-manifold", on_manifold))
    rows.append(_guarded("stuart-coupled", "as", controlled))
    return rows


SUITES: Dict[str, Callable[[NscConfig], List[BenchRow]]] = {
    "prop1": suite_prop1,
    "energy-compare": suite_energy_compare,
    "harmonic": suite_harmonic,
    "stuart-single": suite_stuart_single,
    "stuart-coupled": suite_stuart_coupled,
}


def run_suite(name: str, cfg: NscConfig) -> List[BenchRow]:
    try:
        suite = SUITES[name]
    except KeyError:
        raise ConfigurationError(f"unknown suite {name!r} (known: {', '.join(sorted(SUITES))})") from None
    return suite(cfg)
