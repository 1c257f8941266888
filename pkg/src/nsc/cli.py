from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .bench import SUITES, run_suite, write_bench_csv
from .bounds import (
    BoundResult,
    GainEstimate,
    controller_gain,
    estimate_delta_eps,
    estimate_es_constants,
    estimate_L,
    inapplicable_report,
    thm3_bounds,
    thm4_bounds,
    thm5_bounds,
    validate_bound,
)
from .config import NscConfig, env_truthy, load_config, merge_overrides
from .control import Controller, LinearController, build_controller, controller_from_dict, controller_to_dict
from .diffnet import as_tensor
from .errors import BoundInapplicableError, ConfigurationError, DivergenceError, NscError
from .lyapunov import LyapunovNet, build_lyapunov, lyap_value, lyapunov_from_dict, lyapunov_to_dict
from .manifest import build_manifest, load_manifest, write_manifest
from .paths import BENCH, CONTROLLER, LYAPUNOV, REPORT, SUMMARY, TRAIN_LOG, default_config_path, ensure_out_dir, resolve_user_path
from .runlog import read_json, write_json
from .sde import DEFAULT_DT, SdeSystem, ensemble
from .systems import CATALOGUE, SystemSpec, get_system, make_linear, parse_overrides, system_names
from .train import Box, LossKind, TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_NOT_CONVERGED = 4

REPLAY_CONFIG = "replay_config.json"


def _configure_logging(verbose: bool) -> None:
    if env_truthy("NSC_DEBUG"):
        level = logging.DEBUG
    elif verbose:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args: argparse.Namespace, **overrides: Any) -> NscConfig:
    path = resolve_user_path(args.config) if getattr(args, "config", None) else default_config_path()
    cfg = load_config(path)
    if getattr(args, "seed", None) is not None:
        overrides["base_seed"] = args.seed
    return merge_overrides(cfg, overrides)


def _parse_vector(raw: str) -> List[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {raw!r}") from None


def _system(args: argparse.Namespace) -> Tuple[SdeSystem, SystemSpec, Dict[str, float]]:
    sys_, spec = get_system(args.system, parse_overrides(args.param))
    return sys_, spec, spec.params(parse_overrides(args.param))


def _read_controller(path: str, sys_: SdeSystem) -> Controller:
    u = controller_from_dict(read_json(resolve_user_path(path)))
    if (u.d, u.r) != (sys_.d, sys_.r):
        raise ConfigurationError(f"controller is {u.d}x{u.r}, system {sys_.label} needs {sys_.d}x{sys_.r}")
    return u


def _read_lyapunov(path: str, sys_: SdeSystem) -> LyapunovNet:
    V = lyapunov_from_dict(read_json(resolve_user_path(path)))
    if V.dim != sys_.d:
        raise ConfigurationError(f"Lyapunov function has dimension {V.dim}, system needs {sys_.d}")
    return V


def _finish(args: argparse.Namespace, cfg: NscConfig, out_dir: Path, outputs: List[str], extra: Optional[Dict[str, Any]] = None) -> None:
    m = build_manifest(
        command=args.cmd,
        argv=list(args.argv),
        cfg=cfg,
        seeds={"base_seed": cfg.base_seed},
        outputs=outputs,
        extra=extra,
    )
    write_manifest(out_dir, m)


# --------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------


def cmd_version(_: argparse.Namespace) -> int:
    print(__version__)
    return EXIT_OK


def cmd_systems(_: argparse.Namespace) -> int:
    for name in system_names():
        spec = CATALOGUE[name]
        print(f"{name}\t{spec.controller.value}\t{spec.description}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load(args, max_iters=args.max_iters, n_samples=args.n_samples, lr=args.lr, checkpoint_every=args.checkpoint_every)
    sys_, spec, params = _system(args)
    out_dir = ensure_out_dir(args.out_dir)
    loss = LossKind(args.loss)

    kind = args.controller_kind or spec.controller.value
    input_map = sys_.error_map.numpy() if sys_.error_map is not None else None
    u = build_controller(kind, sys_.d, sys_.r, hidden=cfg.controller_hidden, seed=cfg.base_seed, k=args.k, input_map=input_map)
    V = None
    if loss is LossKind.ES:
        hidden = cfg.icnn_hidden if args.lyapunov == "icnn" else cfg.quadratic_hidden
        V = build_lyapunov(args.lyapunov, sys_.d, hidden=hidden, eps=cfg.lyapunov_eps, knot=cfg.relu_knot, seed=cfg.base_seed)

    tc = TrainConfig.from_config(
        cfg,
        box=Box(*spec.box(params)),
        loss=loss,
        b=args.b,
        alpha=args.alpha,
        drift_factor=args.drift_factor,
        schedule=args.schedule,
        lr_decay=args.lr_decay,
        lr_step=args.lr_step,
    )
    result = train(
        tc,
        sys_,
        V,
        u,
        log_path=out_dir / TRAIN_LOG,
        checkpoint_root=out_dir if tc.checkpoint_every else None,
    )

    outputs = [CONTROLLER, TRAIN_LOG, SUMMARY]
    write_json(out_dir / CONTROLLER, controller_to_dict(result.u))
    if result.V is not None:
        write_json(out_dir / LYAPUNOV, lyapunov_to_dict(result.V))
        outputs.append(LYAPUNOV)
    summary = {
        "system": args.system,
        "loss": loss.value,
        "converged": result.converged,
        "iterations": result.iterations,
        "final_loss": result.final_loss,
        "best_loss": result.best_loss,
        "best_iteration": result.best_iteration,
        "wall_time": result.wall_time,
        "time_per_iteration": result.time_per_iteration,
    }
    write_json(out_dir / SUMMARY, summary)
    _finish(args, cfg, out_dir, outputs, extra={"system": args.system, "system_params": params, "train": asdict(tc)})
    print(str(out_dir / CONTROLLER))
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args, dt=args.dt, horizon=args.T)
    sys_, spec, params = _system(args)
    out_dir = ensure_out_dir(args.out_dir)
    u = _read_controller(args.controller, sys_) if args.controller else None
    x0 = _parse_vector(args.x0) if args.x0 else spec.x0_sampler(params)
    dt = cfg.dt if cfg.dt is not None else spec.dt
    T = cfg.horizon if cfg.horizon is not None else spec.horizon
    eps = args.eps if args.eps is not None else spec.eps

    res = ensemble(
        sys_,
        u,
        x0,
        args.n,
        dt,
        T,
        eps,
        cfg.base_seed,
        workers=cfg.ensemble_workers,
        chunk=cfg.ensemble_chunk,
        threshold=cfg.divergence_threshold,
    )
    written = res.write(out_dir, csv=not args.no_csv)
    _finish(
        args,
        cfg,
        out_dir,
        [p.name for p in written],
        extra={"system": args.system, "system_params": params, "dt": dt, "T": T, "eps": eps},
    )
    print(str(out_dir / SUMMARY))
    if res.n_diverged() == res.n:
        logger.error("all %d trajectories diverged", res.n)
        return EXIT_DIVERGED
    return EXIT_OK


def _bounds_report(args: argparse.Namespace, cfg: NscConfig) -> Tuple[BoundResult, SdeSystem, Optional[Controller], np.ndarray]:
    x0 = np.asarray(_parse_vector(args.x0), dtype=np.float64)
    if args.system is None:
        if args.theorem != 3 or args.k is None or args.L is None:
            raise ConfigurationError("without --system only theorem 3 with --k and --L is available")
        # Scalar test bed dx = L x dt with u = k x.
        sys_ = make_linear(a=args.L, d=x0.size)
        u: Optional[Controller] = LinearController(x0.size, args.k)
        return thm3_bounds(args.L, args.k, float(np.linalg.norm(x0)), args.eps), sys_, u, x0

    sys_, spec, params = _system(args)
    if x0.size != sys_.d:
        raise ConfigurationError(f"--x0 has {x0.size} entries, system {args.system} needs {sys_.d}")
    box = Box(*spec.box(params))
    u = _read_controller(args.controller, sys_) if args.controller else None
    x0_err = sys_.error(as_tensor(x0))
    x0_norm = float(x0_err.norm())
    L = args.L if args.L is not None else estimate_L(sys_, box, args.samples, cfg.base_seed)[0]
    gain = GainEstimate(args.gain)

    if args.theorem == 3:
        if args.k is not None:
            k = args.k
            if u is None:
                if sys_.r != 1:
                    raise ConfigurationError(f"--k gives u = kx on one noise channel, system {args.system} has {sys_.r}")
                u = LinearController(sys_.d, k)
        elif isinstance(u, LinearController):
            k = controller_gain(u, box, method=gain, seed=cfg.base_seed)
        else:
            raise ConfigurationError("theorem 3 needs --k or a linear controller file")
        return thm3_bounds(L, k, x0_norm, args.eps), sys_, u, x0

    k_u = 0.0 if u is None else controller_gain(u, box, method=gain, seed=cfg.base_seed)
    if args.theorem == 4:
        if args.lyapunov is None:
            raise ConfigurationError("theorem 4 needs --lyapunov")
        V = _read_lyapunov(args.lyapunov, sys_)
        c = estimate_es_constants(V, sys_, u, box, args.samples, cfg.base_seed)
        V_x0 = lyap_value(V, x0_err)
        result = thm4_bounds(c.c1, c.c2, c.c3, c.p, V_x0, L, k_u, x0_norm, args.eps)
        result.estimates = c.to_dict()
        return result, sys_, u, x0

    alpha = args.alpha if args.alpha is not None else cfg.as_alpha
    delta = estimate_delta_eps(sys_, u, alpha, args.eps, box, args.samples, cfg.base_seed)
    return thm5_bounds(alpha, delta.delta, L, k_u, x0_norm, args.eps), sys_, u, x0


def cmd_bounds(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out_dir = ensure_out_dir(args.out_dir)
    try:
        result, sys_, u, x0 = _bounds_report(args, cfg)
    except BoundInapplicableError as exc:
        logger.warning("%s", exc)
        report = inapplicable_report(args.theorem, {"x0": args.x0, "eps": args.eps, "system": args.system}, exc.reason)
    else:
        if args.validate:
            result.monte_carlo = validate_bound(
                sys_,
                u,
                result.T_eps,
                x0,
                args.eps,
                n=args.n,
                dt=args.dt if args.dt is not None else (cfg.dt if cfg.dt is not None else DEFAULT_DT),
                base_seed=cfg.base_seed,
                workers=cfg.ensemble_workers,
                chunk=cfg.ensemble_chunk,
            )
        report = result.to_dict()
    write_json(out_dir / REPORT, report)
    _finish(args, cfg, out_dir, [REPORT], extra={"theorem": args.theorem})
    print(str(out_dir / REPORT))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load(args, max_iters=args.max_iters)
    out_dir = ensure_out_dir(args.out_dir)
    rows = run_suite(args.suite, cfg)
    write_bench_csv(out_dir / BENCH, rows)
    failed = [r.method for r in rows if r.status != "ok"]
    if failed:
        logger.warning("%s: %d method(s) failed: %s", args.suite, len(failed), ", ".join(failed))
    _finish(args, cfg, out_dir, [BENCH], extra={"suite": args.suite})
    print(str(out_dir / BENCH))
    return EXIT_OK


def _strip_flags(argv: List[str], flags: Tuple[str, ...]) -> List[str]:
    """Drop `--flag value` and `--flag=value` occurrences of the given flags."""
    out: List[str] = []
    skip = False
    for a in argv:
        if skip:
            skip = False
        elif a in flags:
            skip = True
        elif not a.startswith(tuple(f + "=" for f in flags)):
            out.append(a)
    return out


def cmd_replay(args: argparse.Namespace) -> int:
    """Re-run the command recorded in a manifest with its resolved config and seed."""
    manifest = load_manifest(resolve_user_path(args.manifest))
    out_dir = ensure_out_dir(args.out_dir)
    cfg_path = write_json(out_dir / REPLAY_CONFIG, manifest.config)
    argv = _strip_flags(manifest.argv, ("--config", "--seed", "--out-dir"))
    seed = manifest.seeds.get("base_seed", int(manifest.config.get("base_seed", 0)))
    logger.info("replaying %s", " ".join(argv))
    return main(["--config", str(cfg_path), "--seed", str(seed), *argv, "--out-dir", str(out_dir)])


# --------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------


def _add_system(p: argparse.ArgumentParser, *, required: bool = True) -> None:
    p.add_argument("--system", required=required, default=None, help="Catalogue system name (see `nsc systems`)")
    p.add_argument("--param", action="append", default=None, metavar="KEY=VALUE", help="Override a system parameter (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsc")
    p.add_argument("--config", default=None, help="JSON config file (default: $NSC_HOME/config.json)")
    p.add_argument("--seed", type=int, default=None, help="Base seed (overrides NSC_SEED and the config file)")
    p.add_argument("-v", "--verbose", action="store_true", help="INFO-level logging")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("version").set_defaults(fn=cmd_version)
    sub.add_parser("systems", help="List catalogue systems").set_defaults(fn=cmd_systems)

    tr = sub.add_parser("train", help="Learn a stabilizing controller (ES or AS loss)")
    _add_system(tr)
    tr.add_argument("--loss", choices=[k.value for k in LossKind], default="as")
    tr.add_argument("--lyapunov", choices=["icnn", "quadratic"], default="icnn", help="Lyapunov network for the ES loss")
    tr.add_argument("--controller-kind", choices=["neural_shift", "neural_diag", "linear"], default=None)
    tr.add_argument("--k", type=float, default=None, help="Gain for a linear controller")
    tr.add_argument("--b", type=float, default=None)
    tr.add_argument("--alpha", type=float, default=None)
    tr.add_argument("--drift-factor", choices=["two", "one"], default=None)
    tr.add_argument("--schedule", choices=["joint", "alternate"], default=None)
    tr.add_argument("--max-iters", type=int, default=None)
    tr.add_argument("--n-samples", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--lr-decay", type=float, default=None)
    tr.add_argument("--lr-step", type=int, default=None)
    tr.add_argument("--checkpoint-every", type=int, default=None)
    tr.add_argument("--out-dir", required=True)
    tr.set_defaults(fn=cmd_train)

    sim = sub.add_parser("simulate", help="Euler-Maruyama ensemble with an optional controller")
    _add_system(sim)
    sim.add_argument("--controller", default=None, help="controller.json (omit for the uncontrolled system)")
    sim.add_argument("--x0", default=None, help="Fixed initial state, comma separated (default: the system's sampler)")
    sim.add_argument("--n", type=int, default=20)
    sim.add_argument("--dt", type=float, default=None)
    sim.add_argument("--T", type=float, default=None)
    sim.add_argument("--eps", type=float, default=None)
    sim.add_argument("--no-csv", action="store_true", help="Skip per-trajectory CSV files")
    sim.add_argument("--out-dir", required=True)
    sim.set_defaults(fn=cmd_simulate)

    bd = sub.add_parser("bounds", help="Convergence-time and energy bounds")
    _add_system(bd, required=False)
    bd.add_argument("--theorem", type=int, choices=[3, 4, 5], required=True)
    bd.add_argument("--controller", default=None)
    bd.add_argument("--lyapunov", default=None, help="lyapunov.json (theorem 4)")
    bd.add_argument("--k", type=float, default=None)
    bd.add_argument("--L", type=float, default=None, help="Lipschitz constant of f (estimated on the box when omitted)")
    bd.add_argument("--alpha", type=float, default=None)
    bd.add_argument("--x0", required=True)
    bd.add_argument("--eps", type=float, required=True)
    bd.add_argument("--gain", choices=[g.value for g in GainEstimate], default="upper")
    bd.add_argument("--samples", type=int, default=10_000, help="Box samples for the constant estimates")
    bd.add_argument("--validate", action="store_true", help="Attach a Monte Carlo check of T_eps")
    bd.add_argument("--n", type=int, default=500)
    bd.add_argument("--dt", type=float, default=None)
    bd.add_argument("--out-dir", required=True)
    bd.set_defaults(fn=cmd_bounds)

    be = sub.add_parser("bench", help="Run a benchmark suite and write bench.csv")
    be.add_argument("suite", help=f"one of: {', '.join(sorted(SUITES))}")
    be.add_argument("--max-iters", type=int, default=None)
    be.add_argument("--out-dir", required=True)
    be.set_defaults(fn=cmd_bench)

    rp = sub.add_parser("replay", help="Re-run a recorded manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out-dir", required=True)
    rp.set_defaults(fn=cmd_replay)

    return p


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.argv = argv
    _configure_logging(bool(args.verbose))
    try:
        return int(args.fn(args))
    except ConfigurationError as exc:
        print(f"nsc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"nsc: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NscError as exc:
        print(f"nsc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
