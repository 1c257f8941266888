"""Benchmark systems, each with its equilibrium moved to the origin.

Every builder returns an `SdeSystem` whose f and g vanish at 0 in the
exported coordinates. `SystemSpec` adds what the CLI needs to run a system
by name: default parameters, the training box, the initial-state sampler,
a matching controller shape and time grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .control import ControllerKind
from .diffnet import DTYPE, ArrayLike
from .errors import ConfigurationError, InvalidParameterError, SystemDomainError
from .sde import SdeSystem, X0Sampler, zero_diffusion

logger = logging.getLogger(__name__)


def _column(*entries: torch.Tensor) -> torch.Tensor:
    return torch.stack(entries, dim=-1)[..., None]


# --------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------


def make_prop1() -> SdeSystem:
    """dx = x log|x| dt, extended by continuity with f(0) = 0."""
    return SdeSystem(
        d=1,
        r=1,
        f=lambda x: torch.xlogy(x, x.abs()),
        g=zero_diffusion(1, 1),
        label="prop1",
    )


def make_example1() -> SdeSystem:
    def f(x: torch.Tensor) -> torch.Tensor:
        x1, x2 = x[..., 0], x[..., 1]
        return torch.stack([x2, -2.0 * x1 - x2], dim=-1)

    def g(x: torch.Tensor) -> torch.Tensor:
        return _column(torch.zeros_like(x[..., 0]), x[..., 0])

    return SdeSystem(d=2, r=1, f=f, g=g, label="example1")


def make_harmonic(
    w2: float = 1.0,
    beta: float = 0.5,
    zeta1: float = -3.0,
    zeta2: float = 2.15,
    *,
    channels: int = 1,
) -> SdeSystem:
    """Damped oscillator y'' + 2 beta y' + w2 y = 0 with multiplicative noise on y and y'.

    One channel: g = (0, -(zeta1 y + zeta2 y'))^T. Two channels: independent
    perturbations, g = [[0, 0], [-zeta1 y, -zeta2 y']].
    """
    if not beta > 0:
        raise InvalidParameterError(f"damping beta must be positive, got {beta!r}")
    if channels not in (1, 2):
        raise ConfigurationError(f"harmonic noise realization has 1 or 2 channels, got {channels!r}")
    w2, beta, zeta1, zeta2 = float(w2), float(beta), float(zeta1), float(zeta2)

    def f(x: torch.Tensor) -> torch.Tensor:
        y, v = x[..., 0], x[..., 1]
        return torch.stack([v, -w2 * y - 2.0 * beta * v], dim=-1)

    def g_one(x: torch.Tensor) -> torch.Tensor:
        y, v = x[..., 0], x[..., 1]
        return _column(torch.zeros_like(y), -(zeta1 * y + zeta2 * v))

    def g_two(x: torch.Tensor) -> torch.Tensor:
        y, v = x[..., 0], x[..., 1]
        zero = torch.zeros_like(y)
        top = torch.stack([zero, zero], dim=-1)
        bottom = torch.stack([-zeta1 * y, -zeta2 * v], dim=-1)
        return torch.stack([top, bottom], dim=-2)

    return SdeSystem(
        d=2,
        r=channels,
        f=f,
        g=g_one if channels == 1 else g_two,
        label="harmonic",
        params={"w2": w2, "beta": beta, "zeta1": zeta1, "zeta2": zeta2, "channels": channels},
    )


def make_log1p() -> SdeSystem:
    """dx = x log(1 + x) dt on x > -1."""

    def f(x: torch.Tensor) -> torch.Tensor:
        if bool((x <= -1.0).any()):
            raise SystemDomainError("x log(1+x) is only defined for x > -1")
        return x * torch.log1p(x)

    return SdeSystem(
        d=1,
        r=1,
        f=f,
        g=zero_diffusion(1, 1),
        label="log1p",
        domain=lambda x: (x > -1.0).all(-1),
    )


def stuart_radius(beta: float, mu: float) -> float:
    if not (beta < 0 and mu > 0):
        raise InvalidParameterError(f"limit cycle needs beta < 0 and mu > 0, got beta={beta!r}, mu={mu!r}")
    return math.sqrt(-beta / mu)


def make_stuart_single(beta: float = -25.0, gamma: float = 1.0, mu: float = 1.0) -> SdeSystem:
    """Radial deviation e = rho - rho* of Z' = (beta + i gamma + mu |Z|^2) Z.

    rho' = (beta + mu rho^2) rho factors as mu e (e + 2 rho*)(e + rho*), which
    vanishes exactly at e = 0. The phase turns at the constant rate gamma.
    """
    rho = stuart_radius(beta, mu)
    mu = float(mu)

    def f(e: torch.Tensor) -> torch.Tensor:
        return mu * e * (e + 2.0 * rho) * (e + rho)

    return SdeSystem(
        d=1,
        r=1,
        f=f,
        g=zero_diffusion(1, 1),
        label="stuart-single",
        params={"beta": float(beta), "gamma": float(gamma), "mu": mu, "rho_star": rho},
    )


def stuart_to_cartesian(e: ArrayLike, theta: ArrayLike, rho_star: float) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    rho = e + rho_star
    return np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=-1)


def stuart_from_cartesian(xy: ArrayLike, rho_star: float) -> Tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(xy, dtype=np.float64)
    return np.hypot(xy[..., 0], xy[..., 1]) - rho_star, np.arctan2(xy[..., 1], xy[..., 0])


def reconstruct_cartesian(
    times: ArrayLike, e: ArrayLike, theta0: float, *, gamma: float = 1.0, rho_star: float = 5.0
) -> np.ndarray:
    """(x, y) orbit from a radial-deviation path; theta(t) = theta0 + gamma t."""
    times = np.asarray(times, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64).reshape(times.shape)
    return stuart_to_cartesian(e, theta0 + gamma * times, rho_star)


def coupling_laplacian(n: int) -> np.ndarray:
    """L_jk = delta_jk - 1/n; rows sum to zero."""
    return np.eye(int(n)) - np.full((int(n), int(n)), 1.0 / int(n))


def sync_error_map(n: int) -> torch.Tensor:
    """Deviation from the network mean, (I - 11^T/n) kron I_2, on interleaved (Re, Im) coordinates."""
    return torch.as_tensor(np.kron(coupling_laplacian(n), np.eye(2)), dtype=DTYPE)


def make_stuart_coupled(n: int = 20, sigma: float = 0.01, c1: float = -1.8, c2: float = 4.0) -> SdeSystem:
    """n Stuart-Landau nodes with Laplacian coupling, state (Re Z_1, Im Z_1, ..., Re Z_n, Im Z_n).

    Z_j' = Z_j - (1 + i c2)|Z_j|^2 Z_j - sigma (1 + i c1) sum_k L_jk Z_k.
    The noise-free system has one channel per node, all zero; control
    enters through those channels and the target is the deviation from
    the synchronization manifold.
    """
    n = int(n)
    if n < 2:
        raise InvalidParameterError(f"coupled network needs n >= 2, got {n}")
    sigma, c1, c2 = float(sigma), float(c1), float(c2)

    def f(x: torch.Tensor) -> torch.Tensor:
        z = x.reshape(*x.shape[:-1], n, 2)
        a, b = z[..., 0], z[..., 1]
        r2 = a * a + b * b
        la = a - a.mean(-1, keepdim=True)
        lb = b - b.mean(-1, keepdim=True)
        da = a - r2 * (a - c2 * b) - sigma * (la - c1 * lb)
        db = b - r2 * (b + c2 * a) - sigma * (lb + c1 * la)
        return torch.stack([da, db], dim=-1).reshape(x.shape)

    return SdeSystem(
        d=2 * n,
        r=n,
        f=f,
        g=zero_diffusion(2 * n, n),
        label="stuart-coupled",
        params={"n": n, "sigma": sigma, "c1": c1, "c2": c2},
        error_map=sync_error_map(n),
    )


def make_gbm(a: float = 0.5, b: float = 1.0) -> SdeSystem:
    """dx = a x dt + b x dB with x(t) = x0 exp((a - b^2/2) t + b B_t)."""
    a, b = float(a), float(b)

    def exact(x0: torch.Tensor, t: float, B: torch.Tensor) -> torch.Tensor:
        return x0 * torch.exp((a - 0.5 * b * b) * t + b * B)

    return SdeSystem(
        d=1,
        r=1,
        f=lambda x: a * x,
        g=lambda x: b * x[..., None],
        label="gbm",
        params={"a": a, "b": b},
        exact=exact,
    )


def make_linear(a: float = 1.0, d: int = 1) -> SdeSystem:
    """dx = a x dt with no noise: the scalar test bed for the losses and bounds."""
    a = float(a)
    return SdeSystem(d=int(d), r=1, f=lambda x: a * x, g=zero_diffusion(int(d), 1), label="linear", params={"a": a})


# --------------------------------------------------------------------
# Catalogue
# --------------------------------------------------------------------


def _uniform_box(low: Sequence[float], high: Sequence[float]) -> X0Sampler:
    lo = np.asarray(low, dtype=np.float64)
    hi = np.asarray(high, dtype=np.float64)
    return lambda rng: lo + (hi - lo) * rng.random(lo.shape)


def annulus_sampler(r_min: float, r_max: float, d: int = 1) -> X0Sampler:
    """Uniform direction, radius uniform in [r_min, r_max] (a symmetric pair of intervals in 1-D)."""

    def sample(rng: np.random.Generator) -> np.ndarray:
        radius = r_min + (r_max - r_min) * rng.random()
        if d == 1:
            return np.array([radius if rng.random() < 0.5 else -radius])
        v = rng.standard_normal(d)
        return radius * v / np.linalg.norm(v)

    return sample


@dataclass(frozen=True)
class SystemSpec:
    name: str
    build: Callable[..., SdeSystem]
    defaults: Dict[str, float]
    box: Callable[[Mapping[str, float]], Tuple[List[float], List[float]]]
    x0_sampler: Callable[[Mapping[str, float]], X0Sampler]
    controller: ControllerKind
    dt: float = 1e-3
    horizon: float = 4.0
    eps: float = 0.05
    description: str = ""
    int_params: Tuple[str, ...] = field(default_factory=tuple)

    def params(self, overrides: Optional[Mapping[str, float]] = None) -> Dict[str, float]:
        overrides = dict(overrides or {})
        unknown = sorted(set(overrides) - set(self.defaults))
        if unknown:
            raise ConfigurationError(f"unknown parameter(s) for {self.name}: {', '.join(unknown)}")
        merged = {**self.defaults, **overrides}
        return {k: int(v) if k in self.int_params else float(v) for k, v in merged.items()}

    def make(self, overrides: Optional[Mapping[str, float]] = None) -> SdeSystem:
        return self.build(**self.params(overrides))


def _cube(half: float, d: int) -> Tuple[List[float], List[float]]:
    return [-half] * d, [half] * d


CATALOGUE: Dict[str, SystemSpec] = {
    s.name: s
    for s in [
        SystemSpec(
            name="prop1",
            build=make_prop1,
            defaults={},
            box=lambda p: _cube(2.0, 1),
            x0_sampler=lambda p: annulus_sampler(0.1, 2.0),
            controller=ControllerKind.NEURAL_DIAG,
            horizon=10.0,
            description="x log|x| drift, control through noise only",
        ),
        SystemSpec(
            name="example1",
            build=make_example1,
            defaults={},
            box=lambda p: _cube(5.0, 2),
            x0_sampler=lambda p: _uniform_box(*_cube(2.0, 2)),
            controller=ControllerKind.NEURAL_SHIFT,
            horizon=10.0,
        ),
        SystemSpec(
            name="harmonic",
            build=make_harmonic,
            defaults={"w2": 1.0, "beta": 0.5, "zeta1": -3.0, "zeta2": 2.15, "channels": 1},
            box=lambda p: _cube(5.0, 2),
            x0_sampler=lambda p: _uniform_box(*_cube(2.0, 2)),
            controller=ControllerKind.NEURAL_SHIFT,
            horizon=4.0,
            int_params=("channels",),
            description="damped oscillator with multiplicative parameter noise",
        ),
        SystemSpec(
            name="log1p",
            build=make_log1p,
            defaults={},
            box=lambda p: ([-0.9], [6.0]),
            x0_sampler=lambda p: _uniform_box([1.0], [5.0]),
            controller=ControllerKind.NEURAL_DIAG,
            horizon=1.0,
            eps=0.1,
        ),
        SystemSpec(
            name="stuart-single",
            build=make_stuart_single,
            defaults={"beta": -25.0, "gamma": 1.0, "mu": 1.0},
            box=lambda p: _cube(4.0, 1),
            x0_sampler=lambda p: annulus_sampler(0.5, 3.0),
            controller=ControllerKind.NEURAL_DIAG,
            dt=1e-4,
            horizon=1.0,
            eps=0.1,
            description="radial deviation from the unstable limit cycle",
        ),
        SystemSpec(
            name="stuart-coupled",
            build=make_stuart_coupled,
            defaults={"n": 20, "sigma": 0.01, "c1": -1.8, "c2": 4.0},
            box=lambda p: _cube(1.5, 2 * int(p["n"])),
            x0_sampler=lambda p: _uniform_box(*_cube(1.0, 2 * int(p["n"]))),
            controller=ControllerKind.NEURAL_SHIFT,
            horizon=4.0,
            int_params=("n",),
            description="Laplacian-coupled oscillators, target is the synchronization manifold",
        ),
        SystemSpec(
            name="gbm",
            build=make_gbm,
            defaults={"a": 0.5, "b": 1.0},
            box=lambda p: _cube(2.0, 1),
            x0_sampler=lambda p: _uniform_box([1.0], [1.0]),
            controller=ControllerKind.LINEAR,
            horizon=1.0,
        ),
        SystemSpec(
            name="linear",
            build=make_linear,
            defaults={"a": 1.0, "d": 1},
            box=lambda p: _cube(5.0, int(p["d"])),
            x0_sampler=lambda p: _uniform_box(*_cube(2.0, int(p["d"]))),
            controller=ControllerKind.LINEAR,
            int_params=("d",),
            eps=0.1,
        ),
    ]
}


def system_names() -> List[str]:
    return sorted(CATALOGUE)


def get_spec(name: str) -> SystemSpec:
    try:
        return CATALOGUE[name]
    except KeyError:
        raise ConfigurationError(f"unknown system {name!r} (known: {', '.join(system_names())})") from None


def get_system(name: str, overrides: Optional[Mapping[str, float]] = None) -> Tuple[SdeSystem, SystemSpec]:
    spec = get_spec(name)
    return spec.make(overrides), spec


def parse_overrides(items: Optional[Sequence[str]]) -> Dict[str, float]:
    """["beta=-20", "mu=1"] -> {"beta": -20.0, "mu": 1.0}."""
    out: Dict[str, float] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"expected key=value, got {item!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise ConfigurationError(f"parameter {key.strip()!r} needs a number, got {value!r}") from None
    return out
