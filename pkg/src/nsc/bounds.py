"""Convergence-time and energy-cost bounds, and sample estimates of their constants.

All constants estimated here are sample extrema over a box, so the bounds
computed from them are estimates rather than certificates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np
import torch

from .control import Controller, controller_lipschitz
from .diffnet import ArrayLike, as_tensor, empirical_lipschitz
from .errors import BoundInapplicableError, InvalidParameterError
from .lyapunov import LyapunovNet
from .sde import SdeSystem, ensemble
from .train import Box, as_parts, es_parts, sample_domain

logger = logging.getLogger(__name__)


class GainEstimate(str, Enum):
    UPPER = "upper"
    EMPIRICAL = "empirical"


@dataclass
class BoundResult:
    theorem: int
    inputs: Dict[str, float]
    T_eps: float
    energy_bound: float
    flags: Dict[str, bool] = field(default_factory=dict)
    monte_carlo: Optional[Dict[str, Any]] = None
    estimates: Optional[Dict[str, Any]] = None

    def __iter__(self) -> Iterator[float]:
        return iter((self.T_eps, self.energy_bound))

    @property
    def valid(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theorem": self.theorem,
            "inputs": dict(self.inputs),
            "T_eps": self.T_eps,
            "energy_bound": self.energy_bound,
            "validity_flags": {**self.flags, "valid": self.valid},
            "monte_carlo": self.monte_carlo,
            "estimates": self.estimates,
        }


def inapplicable_report(theorem: int, inputs: Dict[str, Any], reason: str) -> Dict[str, Any]:
    return {
        "theorem": int(theorem),
        "inputs": dict(inputs),
        "T_eps": None,
        "energy_bound": None,
        "validity_flags": {"valid": False},
        "reason": reason,
        "monte_carlo": None,
        "estimates": None,
    }


def _check_eps(theorem: int, x0_norm: float, eps: float) -> None:
    if not eps > 0:
        raise BoundInapplicableError(theorem, f"eps must be positive, got {eps!r}")
    if eps > x0_norm:
        raise BoundInapplicableError(theorem, f"eps={eps!r} exceeds ||x0||={x0_norm!r}")


def energy_bound(gain: float, L: float, x0_norm: float, T_eps: float) -> float:
    """gain^2 ||x0||^2 / (gain^2 + 2L) * (exp((gain^2 + 2L) T_eps) - 1)."""
    k2 = float(gain) ** 2
    if k2 == 0.0 or T_eps == 0.0:
        return 0.0
    c = k2 + 2.0 * float(L)
    scale = k2 * float(x0_norm) ** 2
    if c == 0.0:
        return scale * T_eps
    try:
        return scale * math.expm1(c * T_eps) / c
    except OverflowError:
        return math.inf


def thm3_bounds(L: float, k: float, x0_norm: float, eps: float) -> BoundResult:
    """Linear controller u = kx: T_eps = 2 log(||x0||/eps) / (k^2 - 2L)."""
    rate = float(k) ** 2 - 2.0 * float(L)
    if not rate > 0:
        raise BoundInapplicableError(3, f"needs k^2 > 2L, got k={k!r}, L={L!r}")
    _check_eps(3, x0_norm, eps)
    T = 2.0 * math.log(x0_norm / eps) / rate
    return BoundResult(
        theorem=3,
        inputs={"L": float(L), "k": float(k), "x0_norm": float(x0_norm), "eps": float(eps)},
        T_eps=T,
        energy_bound=energy_bound(k, L, x0_norm, T),
        flags={"rate_positive": True},
    )


def thm4_bounds(
    c1: float,
    c2: float,
    c3: float,
    p: float,
    V_x0: float,
    L: float,
    k_u: float,
    x0_norm: float,
    eps: float,
) -> BoundResult:
    """ES controller: T_eps = 2 log(V(x0) / (c1 eps^p)) / (c3 - 2 c2)."""
    rate = float(c3) - 2.0 * float(c2)
    if not rate > 0:
        raise BoundInapplicableError(4, f"needs c3 - 2 c2 > 0, got {rate!r}")
    if not (c1 > 0 and p > 0):
        raise BoundInapplicableError(4, f"needs c1 > 0 and p > 0, got c1={c1!r}, p={p!r}")
    _check_eps(4, x0_norm, eps)
    T = max(0.0, 2.0 * math.log(float(V_x0) / (float(c1) * float(eps) ** float(p))) / rate)
    return BoundResult(
        theorem=4,
        inputs={
            "c1": float(c1), "c2": float(c2), "c3": float(c3), "p": float(p), "V_x0": float(V_x0),
            "L": float(L), "k_u": float(k_u), "x0_norm": float(x0_norm), "eps": float(eps),
        },
        T_eps=T,
        energy_bound=energy_bound(k_u, L, x0_norm, T),
        flags={"rate_positive": True},
    )


def thm5_bounds(alpha: float, delta_eps: float, L: float, k_u: float, x0_norm: float, eps: float) -> BoundResult:
    """AS controller: T_eps = 2 (||x0||^alpha - eps^alpha) / (delta_eps alpha)."""
    if not 0.0 < alpha < 1.0:
        raise BoundInapplicableError(5, f"needs alpha in (0, 1), got {alpha!r}")
    if not delta_eps > 0:
        raise BoundInapplicableError(5, f"needs delta_eps > 0, got {delta_eps!r}")
    _check_eps(5, x0_norm, eps)
    T = 2.0 * (float(x0_norm) ** alpha - float(eps) ** alpha) / (float(delta_eps) * alpha)
    return BoundResult(
        theorem=5,
        inputs={
            "alpha": float(alpha), "delta_eps": float(delta_eps), "L": float(L), "k_u": float(k_u),
            "x0_norm": float(x0_norm), "eps": float(eps),
        },
        T_eps=T,
        energy_bound=energy_bound(k_u, L, x0_norm, T),
        flags={"rate_positive": True},
    )


# --------------------------------------------------------------------
# Estimators
# --------------------------------------------------------------------


def _samples(box: Box, n: int, seed: int, exclusion: Optional[float] = None) -> torch.Tensor:
    excl = 1e-6 * box.min_half_width if exclusion is None else float(exclusion)
    return sample_domain(box, n, seed, excl)


def estimate_L_from_samples(sys: SdeSystem, samples: ArrayLike) -> Tuple[float, np.ndarray]:
    x = as_tensor(samples)
    with torch.no_grad():
        e = sys.error(x)
        fe = sys.error(sys.drift(x))
        n2 = (e * e).sum(-1)
        keep = n2 > 0
        ratio = (e * fe).sum(-1)[keep] / n2[keep]
    i = int(torch.argmax(ratio))
    return float(ratio[i]), x[keep][i].numpy()


def estimate_L(sys: SdeSystem, box: Box, n_samples: int = 10_000, seed: int = 0) -> Tuple[float, np.ndarray]:
    """max <x, f(x)> / ||x||^2 over samples, with the maximizing point."""
    L, at = estimate_L_from_samples(sys, _samples(box, n_samples, seed))
    logger.debug("L estimate %.6g at %s", L, at.tolist())
    return L, at


@dataclass(frozen=True)
class EsConstants:
    c1: float
    c2: float
    c3: float
    p: float
    argmax_c2: np.ndarray
    argmin_c3: np.ndarray

    @property
    def rate(self) -> float:
        return self.c3 - 2.0 * self.c2

    @property
    def valid(self) -> bool:
        return self.rate > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "c1": self.c1, "c2": self.c2, "c3": self.c3, "p": self.p, "valid": self.valid,
            "argmax_c2": self.argmax_c2.tolist(), "argmin_c3": self.argmin_c3.tolist(),
        }


def estimate_es_constants(
    V: LyapunovNet,
    sys: SdeSystem,
    u: Optional[Controller],
    box: Box,
    n_samples: int = 10_000,
    seed: int = 0,
) -> EsConstants:
    """c1 = eps and p = 2 from the construction; c2 = max LV/V, c3 = min ||grad V^T g_u||^2 / V^2."""
    x = _samples(box, n_samples, seed)
    v, lv, flow = (t.detach() for t in es_parts(V, u, sys, x))
    growth = lv / v
    spread = flow / (v * v)
    i2, i3 = int(torch.argmax(growth)), int(torch.argmin(spread))
    out = EsConstants(
        c1=float(V.eps),
        c2=float(growth[i2]),
        c3=float(spread[i3]),
        p=2.0,
        argmax_c2=x[i2].numpy(),
        argmin_c3=x[i3].numpy(),
    )
    logger.debug("ES constants c2=%.6g at %s, c3=%.6g at %s", out.c2, out.argmax_c2.tolist(), out.c3, out.argmin_c3.tolist())
    return out


@dataclass(frozen=True)
class DeltaEstimate:
    delta: float
    argmax: np.ndarray

    @property
    def valid(self) -> bool:
        return self.delta > 0


def estimate_delta_eps(
    sys: SdeSystem,
    u: Optional[Controller],
    alpha: float,
    eps: float,
    box: Box,
    n_samples: int = 10_000,
    seed: int = 0,
) -> DeltaEstimate:
    """delta_eps = -max ||x||^(alpha-4) (||x||^2 (2<x,f> + ||g_u||_F^2) - (2-alpha)||x^T g_u||^2) on eps <= ||x||."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must be in (0, 1), got {alpha!r}")
    x = _samples(box, n_samples, seed, exclusion=eps)
    with torch.no_grad():
        n2, xf, gf, xg = as_parts(u, sys, x)
        score = n2 ** ((alpha - 4.0) / 2.0) * (n2 * (2.0 * xf + gf) - (2.0 - alpha) * xg)
    i = int(torch.argmax(score))
    est = DeltaEstimate(delta=-float(score[i]), argmax=x[i].numpy())
    logger.debug("delta_eps %.6g at %s", est.delta, est.argmax.tolist())
    return est


def controller_gain(
    u: Controller,
    box: Box,
    *,
    method: GainEstimate = GainEstimate.UPPER,
    n_pairs: int = 10_000,
    seed: int = 0,
) -> float:
    """k_u for the energy bounds: spectral upper bound (default) or sampled pairwise slope."""
    if GainEstimate(method) is GainEstimate.EMPIRICAL:
        return empirical_lipschitz(u, box.low, box.high, n_pairs=n_pairs, seed=seed)
    return controller_lipschitz(u, radius=box.radius)


# --------------------------------------------------------------------
# Monte Carlo validation
# --------------------------------------------------------------------


def validate_bound(
    sys: SdeSystem,
    u: Optional[Controller],
    bound_T_eps: float,
    x0: ArrayLike,
    eps: float,
    n: int = 500,
    dt: float = 1e-3,
    base_seed: int = 0,
    *,
    workers: int = 4,
    chunk: int = 64,
) -> Dict[str, Any]:
    """Compare the sample mean of tau_eps with the bound.

    Paths are integrated up to 10 * bound_T_eps; those that have not hit eps
    by then are censored and enter the mean at the horizon.
    """
    x0 = as_tensor(x0).reshape(sys.d)
    x0_norm = float(sys.error(x0).norm())
    if eps >= x0_norm:
        return {"mean": 0.0, "stderr": 0.0, "n": int(n), "censored": 0, "horizon": 0.0, "pass": True, "trivial": True}
    if not (math.isfinite(bound_T_eps) and bound_T_eps > 0):
        raise InvalidParameterError(f"bound must be positive and finite, got {bound_T_eps!r}")

    steps = max(1, math.ceil(10.0 * bound_T_eps / dt))
    horizon = steps * dt
    res = ensemble(sys, u, x0.numpy(), n, dt, horizon, eps, base_seed, workers=workers, chunk=chunk, stop_eps=eps)
    hits = res.hitting_times(eps)
    censored = sum(1 for h in hits if h is None)
    taus = np.array([horizon if h is None else h for h in hits])
    mean = float(taus.mean())
    stderr = float(taus.std(ddof=1) / math.sqrt(len(taus))) if len(taus) > 1 else 0.0
    ok = mean <= bound_T_eps + 2.0 * stderr
    logger.info("tau_eps mean %.4f +- %.4f vs bound %.4f (%d censored): %s", mean, stderr, bound_T_eps, censored, "PASS" if ok else "FAIL")
    return {
        "mean": mean,
        "stderr": stderr,
        "n": int(n),
        "censored": censored,
        "horizon": horizon,
        "pass": bool(ok),
        "trivial": False,
    }
