"""Acceptance-scale runs. Deselected by default; run with `pytest -m slow`."""

from __future__ import annotations

import math

import numpy as np
import pytest

from nsc.bench import linear_gain_sweep
from nsc.bounds import thm3_bounds, validate_bound
from nsc.config import NscConfig
from nsc.control import LinearController, NeuralDiag, build_controller, square_law_controller
from nsc.lyapunov import QuadraticV, build_lyapunov
from nsc.sde import ensemble
from nsc.systems import annulus_sampler, get_system, make_linear, make_log1p, make_prop1, make_stuart_coupled, sync_error_map
from nsc.train import Box, DriftFactor, LossKind, TrainConfig, as_margins, es_margins, sample_domain, train

pytestmark = pytest.mark.slow


def _final_below(res, tol: float) -> int:
    return sum(1 for t in res.trajectories if not t.diverged and abs(float(t.distance[-1])) < tol)


def test_square_law_stabilizes_log_drift():
    res = ensemble(make_prop1(), square_law_controller(2.0), annulus_sampler(0.1, 2.0), 100, 1e-3, 10.0, 0.05, 0)
    assert _final_below(res, 0.05) >= 95


@pytest.mark.parametrize("k, lo, hi", [(1.0, 3.0, 6.0), (2.0, 20.0, 40.0)])
def test_linear_gain_loses_paths_outside_its_basin(k, lo, hi):
    res = ensemble(make_prop1(), LinearController(1, k), annulus_sampler(lo, hi), 100, 1e-3, 10.0, 0.05, 0)
    assert _final_below(res, 0.05) < 50


def test_linear_bound_holds_in_monte_carlo():
    bound = thm3_bounds(L=1.0, k=2.0, x0_norm=1.0, eps=0.1)
    assert bound.T_eps == pytest.approx(2.302585, abs=1e-6)
    out = validate_bound(make_linear(a=1.0), LinearController(1, 2.0), bound.T_eps, [1.0], 0.1, n=500, dt=1e-3)
    assert out["pass"], out


def test_gain_sweep_transition():
    sweep = linear_gain_sweep(make_log1p(), [0.2 * j for j in range(1, 51)], [200.0], n=100, dt=1e-3, T=1.0, eps=0.1)
    assert sweep.k_star is not None
    assert 4.8 <= sweep.k_star <= 6.4


def test_uncontrolled_radii_inside_the_cycle_collapse():
    sys, spec = get_system("stuart-single")
    rho_star = sys.params["rho_star"]
    inside = annulus_sampler(0.5, 4.5)
    res = ensemble(sys, None, lambda rng: -np.abs(inside(rng)), 30, spec.dt, spec.horizon, None, 0)
    collapsed = [abs(t.states[-1, 0] + rho_star) < 0.1 for t in res.trajectories]
    assert np.mean(collapsed) >= 0.9


def test_synchronization_manifold_is_invariant():
    n = 20
    sys = make_stuart_coupled(n=n)
    res = ensemble(sys, None, np.tile([0.6, -0.3], n), 1, 1e-3, 4.0, None, 0, workers=1)
    assert float(np.max(res.trajectories[0].distance)) < 1e-6


def test_zero_es_loss_certifies_fresh_samples():
    sys = make_linear(a=1.0)
    box = Box([-2.0], [2.0])
    V = QuadraticV(1, [16], eps=1e-3, seed=0)
    u = NeuralDiag(1, hidden=[16], seed=0)
    result = train(TrainConfig(box=box, loss=LossKind.ES, max_iters=3000, n_samples=256), sys, V, u)
    assert result.converged, f"ES training stopped at loss {result.final_loss:.3g}"
    x = sample_domain(box, 10_000, seed=12345, exclusion=1e-3)
    margins = es_margins(V, u, sys, x, 2.5)
    assert float((margins >= 0).double().mean()) >= 0.99



def test_zero_as_loss_certifies_fresh_samples():
    sys = make_linear(a=1.0)
    box = Box([-2.0], [2.0])
    u = NeuralDiag(1, hidden=[16], seed=0)
    result = train(TrainConfig(box=box, loss=LossKind.AS, alpha=0.5, drift_factor=DriftFactor.TWO, max_iters=3000, n_samples=256), sys, None, u)
    assert result.converged, f"AS training stopped at loss {result.final_loss:.3g}"
    x = sample_domain(box, 10_000, seed=54321, exclusion=1e-3)
    margins = as_margins(u, sys, x, 0.5)
    assert float((margins <= 0).double().mean()) >= 0.99


def _train_as_on(name: str, *, alpha: float = 0.5, **kw):
    cfg = NscConfig()
    sys, spec = get_system(name)
    p = spec.params()
    u = build_controller(spec.controller, sys.d, sys.r, hidden=cfg.controller_hidden, seed=0, **kw)
    result = train(TrainConfig.from_config(cfg, box=Box(*spec.box(p)), loss=LossKind.AS, alpha=alpha), sys, None, u)
    return sys, spec, p, result


def test_trained_as_controller_beats_linear_energy():
    sys, spec, p, result = _train_as_on("log1p", alpha=0.9)
    sampler = spec.x0_sampler(p)
    learned = ensemble(sys, result.u, sampler, 100, 1e-3, 1.0, 0.1, 0)
    linear = ensemble(sys, LinearController(1, 6.0), sampler, 100, 1e-3, 1.0, 0.1, 0)
    assert learned.fraction_converged(0.1, 1.0) >= 0.9
    assert linear.fraction_converged(0.1, 1.0) >= 0.9
    learned_energy = learned.mean_energy(1.0, 0.1)
    assert math.isfinite(learned_energy)
    assert 5.0 * learned_energy <= linear.mean_energy(1.0, 0.1)


def test_harmonic_methods_stabilize_with_cost_ordering():
    cfg = NscConfig()
    sys, spec = get_system("harmonic")
    p = spec.params()
    box = Box(*spec.box(p))
    sampler = spec.x0_sampler(p)
    per_iter = {}
    for method, loss, lyapunov in [("icnn", LossKind.ES, "icnn"), ("quadratic", LossKind.ES, "quadratic"), ("as", LossKind.AS, None)]:
        u = build_controller(spec.controller, sys.d, sys.r, hidden=cfg.controller_hidden, seed=0)
        V = None
        if lyapunov is not None:
            hidden = cfg.icnn_hidden if lyapunov == "icnn" else cfg.quadratic_hidden
            V = build_lyapunov(lyapunov, sys.d, hidden=hidden, eps=cfg.lyapunov_eps, knot=cfg.relu_knot, seed=0)
        result = train(TrainConfig.from_config(cfg, box=box, loss=loss), sys, V, u)
        assert result.converged, f"{method} stopped at loss {result.final_loss:.3g}"
        res = ensemble(sys, result.u, sampler, 20, 1e-3, 4.0, 0.05, 0)
        assert int((res.distances_at(4.0) < 0.05).sum()) >= 18, method
        per_iter[method] = result.time_per_iteration
    assert per_iter["as"] < per_iter["quadratic"] < per_iter["icnn"]


def test_trained_radial_controller_holds_the_cycle():
    sys, spec, p, result = _train_as_on("stuart-single")
    res = ensemble(sys, result.u, spec.x0_sampler(p), 30, spec.dt, spec.horizon, spec.eps, 0)
    assert float(np.mean(res.distances_at(spec.horizon) < 0.1)) >= 0.9


def test_trained_coupled_controller_synchronizes():
    n = int(get_system("stuart-coupled")[1].params()["n"])
    sys, spec, p, result = _train_as_on("stuart-coupled", input_map=sync_error_map(n).numpy())
    res = ensemble(sys, result.u, spec.x0_sampler(p), 20, spec.dt, spec.horizon, spec.eps, 0)
    assert res.distance_at(spec.horizon) < 0.05
