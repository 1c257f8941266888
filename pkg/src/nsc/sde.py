"""SDE systems, Euler-Maruyama integration and ensemble statistics.

Brownian increments come from one counter-based stream per trajectory
(Philox seeded through SeedSequence), turned into Gaussians with Box-Muller
in a fixed draw order, so a (seed, dt, T, x0) tuple pins down the path.
"""

from __future__ import annotations

import concurrent.futures as cf
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .diffnet import DTYPE, ArrayLike, as_tensor
from .errors import DivergenceError, InsufficientDataError, InvalidParameterError, ShapeError
from .paths import SUMMARY, trajectory_csv
from .runlog import write_json

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
DIVERGENCE_THRESHOLD = 1e8

VectorField = Callable[[torch.Tensor], torch.Tensor]
ControlFn = Callable[[torch.Tensor], torch.Tensor]
X0Sampler = Callable[[np.random.Generator], ArrayLike]


@dataclass(frozen=True)
class SdeSystem:
    """dx = f(x) dt + g(x) dB with B r-dimensional; f and g accept batched (..., d) inputs.

    `error_map` P (d x d, default identity) selects the coordinates that must
    reach 0: distances, hitting times and the training losses use Px.
    """

    d: int
    r: int
    f: VectorField
    g: VectorField
    label: str = ""
    params: Mapping[str, float] = field(default_factory=dict)
    error_map: Optional[torch.Tensor] = None
    exact: Optional[Callable[[torch.Tensor, float, torch.Tensor], torch.Tensor]] = None
    domain: Optional[Callable[[torch.Tensor], torch.Tensor]] = None

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d:
            raise ShapeError(f"{self.label or 'system'} expects states of size {self.d}, got {tuple(x.shape)}")
        return x

    def drift(self, x: ArrayLike) -> torch.Tensor:
        return self.f(self._check(x))

    def diffusion(self, x: ArrayLike) -> torch.Tensor:
        return self.g(self._check(x))

    def error(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.error_map is None else x @ self.error_map.T

    def error_diffusion(self, G: torch.Tensor) -> torch.Tensor:
        return G if self.error_map is None else self.error_map @ G


def zero_diffusion(d: int, r: int) -> VectorField:
    return lambda x: torch.zeros(*x.shape[:-1], d, r, dtype=DTYPE)


def controlled_diffusion(sys: SdeSystem, u: Optional[ControlFn], x: torch.Tensor) -> torch.Tensor:
    """g_u(x) = g(x) + u(x)."""
    G = sys.diffusion(x)
    if u is None:
        return G
    U = u(x)
    if U.shape != G.shape:
        raise ShapeError(f"controller output {tuple(U.shape)} does not match diffusion {tuple(G.shape)}")
    return G + U


# --------------------------------------------------------------------
# Brownian increments
# --------------------------------------------------------------------


def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(noise stream, initial-condition stream) for one trajectory seed."""
    noise, x0 = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.Philox(noise)), np.random.Generator(np.random.Philox(x0))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    m = (int(n) + 1) // 2
    u1 = rng.random(m)
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.empty(2 * m)
    z[0::2] = rad * np.cos(2.0 * np.pi * u2)
    z[1::2] = rad * np.sin(2.0 * np.pi * u2)
    return z[: int(n)]


def brownian_increments(seed: int, n_steps: int, r: int, dt: float) -> np.ndarray:
    rng, _ = _streams(seed)
    return math.sqrt(dt) * box_muller(rng, int(n_steps) * int(r)).reshape(int(n_steps), int(r))


def _n_steps(dt: float, T: float) -> int:
    if not (dt > 0) or not (T > 0):
        raise InvalidParameterError(f"dt and T must be positive, got dt={dt!r}, T={T!r}")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise InvalidParameterError(f"dt={dt!r} does not divide T={T!r}")
    return n


# --------------------------------------------------------------------
# Integration
# --------------------------------------------------------------------


def em_step(
    sys: SdeSystem,
    u: Optional[ControlFn],
    x: ArrayLike,
    dt: float,
    dW: ArrayLike,
    *,
    step: int = 0,
    threshold: float = DIVERGENCE_THRESHOLD,
) -> np.ndarray:
    """x + f(x) dt + (g(x) + u(x)) dW."""
    if not (dt > 0):
        raise InvalidParameterError(f"dt must be positive, got {dt!r}")
    x = as_tensor(x)
    dW = as_tensor(dW)
    if dW.shape[-1] != sys.r:
        raise ShapeError(f"dW must have {sys.r} entries, got {tuple(dW.shape)}")
    with torch.no_grad():
        nxt = x + sys.drift(x) * dt + controlled_diffusion(sys, u, x) @ dW
    out = nxt.numpy()
    if not np.all(np.isfinite(out)) or float(np.linalg.norm(out)) > threshold:
        raise DivergenceError(step)
    return out


@dataclass
class _Batch:
    states: np.ndarray  # (B, n+1, d)
    density: np.ndarray  # (B, n+1)
    diverged: np.ndarray  # (B,), -1 when the path stayed finite
    n_done: int


def _integrate(
    sys: SdeSystem,
    u: Optional[ControlFn],
    x0: np.ndarray,
    dW: np.ndarray,
    dt: float,
    *,
    threshold: float = DIVERGENCE_THRESHOLD,
    stop_eps: Optional[float] = None,
) -> _Batch:
    """Batched Euler-Maruyama. Diverged rows are frozen at their last good state.

    With `stop_eps`, integration ends once every row has either reached
    ||Px|| <= stop_eps or diverged.
    """
    B, n, _ = dW.shape
    x = torch.as_tensor(x0, dtype=DTYPE).clone()
    dWt = torch.as_tensor(dW, dtype=DTYPE)
    states = torch.empty(B, n + 1, sys.d, dtype=DTYPE)
    density = torch.zeros(B, n + 1, dtype=DTYPE)
    diverged = torch.full((B,), -1, dtype=torch.long)
    alive = torch.ones(B, dtype=torch.bool)
    states[:, 0] = x
    hit = sys.error(x).norm(dim=-1) <= stop_eps if stop_eps is not None else None
    k = 0
    with torch.no_grad():
        for k in range(n):
            G = sys.diffusion(x)
            if u is not None:
                U = u(x)
                density[:, k] = (U * U).sum((-2, -1))
                G = G + U
            nxt = x + sys.drift(x) * dt + torch.einsum("bij,bj->bi", G, dWt[:, k])
            bad = ~torch.isfinite(nxt).all(-1)
            bad |= torch.nan_to_num(nxt, nan=math.inf).norm(dim=-1) > threshold
            if sys.domain is not None:
                bad |= ~sys.domain(torch.nan_to_num(nxt))
            newly = bad & alive
            if bool(newly.any()):
                diverged[newly] = k + 1
                alive &= ~bad
            x = torch.where(alive[:, None], nxt, x)
            states[:, k + 1] = x
            if hit is not None:
                hit |= sys.error(x).norm(dim=-1) <= stop_eps
                if bool((hit | ~alive).all()):
                    break
    done = k + 1
    return _Batch(
        states=states[:, : done + 1].numpy(),
        density=density[:, : done + 1].numpy(),
        diverged=diverged.numpy(),
        n_done=done,
    )


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    energy_density: np.ndarray
    distance: np.ndarray
    seed: int
    dt: float
    eps: Optional[float] = None
    diverged_step: Optional[int] = None
    tau_eps: Optional[float] = None
    energy: float = 0.0

    def __post_init__(self) -> None:
        if self.eps is not None:
            self.tau_eps = self.hitting_time(self.eps)
        self.energy = self.energy_until(float(self.times[-1]))

    @property
    def diverged(self) -> bool:
        return self.diverged_step is not None

    def hitting_time(self, eps: float) -> Optional[float]:
        """First time ||Px|| reaches eps, interpolated linearly inside the crossing step."""
        dist = self.distance
        if dist[0] <= eps:
            return 0.0
        idx = np.flatnonzero(dist <= eps)
        if idx.size == 0:
            return None
        k = int(idx[0])
        frac = (dist[k - 1] - eps) / (dist[k - 1] - dist[k])
        return float(self.times[k - 1] + frac * (self.times[k] - self.times[k - 1]))

    def energy_until(self, T: float, eps: Optional[float] = None) -> float:
        """Left-endpoint sum of ||u||_F^2 dt up to min(tau_eps, T), partial last step included."""
        eps = self.eps if eps is None else eps
        upper = float(T)
        if eps is not None:
            tau = self.hitting_time(eps)
            if tau is not None:
                upper = min(upper, tau)
        widths = np.clip(np.minimum(self.times[1:], upper) - self.times[:-1], 0.0, None)
        return float(np.sum(self.energy_density[:-1] * widths))

    def distance_at(self, T: float) -> float:
        """||Px(T)||; inf when the path diverged before T."""
        k = int(round(T / self.dt))
        if k >= len(self.times):
            return math.inf if self.diverged else float(self.distance[-1])
        return float(self.distance[k])

    def cumulative_energy(self) -> np.ndarray:
        return np.array([self.energy_until(float(t)) for t in self.times])

    def to_csv(self, path: Union[str, Path]) -> Path:
        d = self.states.shape[1]
        header = ",".join(["t", *(f"x{i + 1}" for i in range(d)), "energy"])
        data = np.column_stack([self.times, self.states, self.cumulative_energy()])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        return Path(path)


def _trajectory(sys: SdeSystem, batch: _Batch, row: int, seed: int, dt: float, eps: Optional[float]) -> Trajectory:
    div = int(batch.diverged[row])
    last = batch.n_done if div < 0 else div - 1
    states = batch.states[row, : last + 1]
    times = dt * np.arange(last + 1, dtype=np.float64)
    dist = sys.error(torch.as_tensor(states)).norm(dim=-1).numpy()
    return Trajectory(
        times=times,
        states=states,
        energy_density=batch.density[row, : last + 1],
        distance=dist,
        seed=int(seed),
        dt=float(dt),
        eps=eps,
        diverged_step=None if div < 0 else div,
    )


def simulate(
    sys: SdeSystem,
    u: Optional[ControlFn],
    x0: ArrayLike,
    dt: float,
    T: float,
    eps: Optional[float] = None,
    seed: int = 0,
    *,
    threshold: float = DIVERGENCE_THRESHOLD,
) -> Trajectory:
    n = _n_steps(dt, T)
    x0 = np.asarray(as_tensor(x0).numpy(), dtype=np.float64).reshape(1, sys.d)
    dW = brownian_increments(seed, n, sys.r, dt)[None]
    batch = _integrate(sys, u, x0, dW, dt, threshold=threshold)
    traj = _trajectory(sys, batch, 0, seed, dt, eps)
    if traj.diverged:
        raise DivergenceError(int(traj.diverged_step), partial=traj)
    return traj


# --------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------


@dataclass
class EnsembleResult:
    trajectories: List[Trajectory]
    dt: float
    T: float
    eps: Optional[float]
    base_seed: int

    @property
    def n(self) -> int:
        return len(self.trajectories)

    def _padded(self, attr: str) -> np.ndarray:
        rows = [getattr(t, attr) for t in self.trajectories]
        length = max(len(r) for r in rows)
        out = np.full((len(rows), length, *rows[0].shape[1:]), np.nan)
        for i, r in enumerate(rows):
            out[i, : len(r)] = r
        return out

    def mean_distance(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.nanmean(self._padded("distance"), axis=0)

    def n_diverged(self) -> int:
        return sum(1 for t in self.trajectories if t.diverged)

    def fraction_converged(self, eps: float, T: float) -> float:
        hits = [t.hitting_time(eps) for t in self.trajectories]
        return sum(1 for h in hits if h is not None and h <= T) / self.n

    def hitting_times(self, eps: Optional[float] = None) -> List[Optional[float]]:
        eps = self.eps if eps is None else eps
        if eps is None:
            raise InvalidParameterError("no eps given and the ensemble was run without one")
        return [t.hitting_time(eps) for t in self.trajectories]

    def mean_hitting_time(self, eps: Optional[float] = None) -> float:
        hits = [h for h in self.hitting_times(eps) if h is not None]
        return float(np.mean(hits)) if hits else math.nan

    def mean_energy(self, T: Optional[float] = None, eps: Optional[float] = None) -> float:
        T = self.T if T is None else T
        return float(np.mean([t.energy_until(T, eps) for t in self.trajectories]))

    def distances_at(self, T: float) -> np.ndarray:
        return np.array([t.distance_at(T) for t in self.trajectories])

    def distance_at(self, T: float) -> float:
        """Mean ||Px(T)|| over trajectories (Di)."""
        return float(np.mean(self.distances_at(T)))

    def convergence_time(self, threshold: float = 0.05) -> Optional[float]:
        """First grid time at which the mean distance drops below `threshold` (Ct)."""
        idx = np.flatnonzero(self.mean_distance() < threshold)
        return float(idx[0] * self.dt) if idx.size else None

    def summary(self, eps: Optional[float] = None) -> Dict[str, Any]:
        eps = self.eps if eps is None else eps
        out: Dict[str, Any] = {
            "n": self.n,
            "dt": self.dt,
            "T": self.T,
            "base_seed": self.base_seed,
            "n_diverged": self.n_diverged(),
            "distance_at_T": self.distance_at(self.T),
            "convergence_time": self.convergence_time(0.05),
        }
        if eps is not None:
            out.update(
                eps=eps,
                fraction_converged=self.fraction_converged(eps, self.T),
                mean_hitting_time=self.mean_hitting_time(eps),
                mean_energy=self.mean_energy(self.T, eps),
            )
        return out

    def write(self, out_dir: Union[str, Path], *, csv: bool = True) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [write_json(out_dir / SUMMARY, self.summary())]
        if csv:
            for i, t in enumerate(self.trajectories):
                written.append(t.to_csv(out_dir / trajectory_csv(i)))
        return written


def _initial_state(sys: SdeSystem, x0: Union[X0Sampler, ArrayLike], seed: int) -> np.ndarray:
    if callable(x0):
        _, rng = _streams(seed)
        v = x0(rng)
    else:
        v = x0
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != sys.d:
        raise ShapeError(f"initial state has {v.size} entries, expected {sys.d}")
    return v


def ensemble(
    sys: SdeSystem,
    u: Optional[ControlFn],
    x0_sampler: Union[X0Sampler, ArrayLike],
    n: int,
    dt: float,
    T: float,
    eps: Optional[float] = None,
    base_seed: int = 0,
    *,
    workers: int = 4,
    chunk: int = 64,
    threshold: float = DIVERGENCE_THRESHOLD,
    stop_eps: Optional[float] = None,
) -> EnsembleResult:
    """n independent paths; path i uses seed base_seed + i for both noise and x0."""
    if int(n) < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n!r}")
    steps = _n_steps(dt, T)
    seeds = [int(base_seed) + i for i in range(int(n))]
    chunk = max(1, int(chunk))
    blocks = [seeds[i : i + chunk] for i in range(0, len(seeds), chunk)]

    def run(block: Sequence[int]) -> List[Trajectory]:
        x0 = np.stack([_initial_state(sys, x0_sampler, s) for s in block])
        dW = np.stack([brownian_increments(s, steps, sys.r, dt) for s in block])
        batch = _integrate(sys, u, x0, dW, dt, threshold=threshold, stop_eps=stop_eps)
        return [_trajectory(sys, batch, j, s, dt, eps) for j, s in enumerate(block)]

    max_workers = max(1, int(workers))
    with cf.ThreadPoolExecutor(max_workers=max_workers) as ex:
        futs = [ex.submit(run, b) for b in blocks]
        trajectories = [t for f in futs for t in f.result()]

    for i, t in enumerate(trajectories):
        if t.diverged:
            logger.warning("trajectory %d (seed %d) diverged at step %d", i, t.seed, t.diverged_step)
    return EnsembleResult(trajectories=trajectories, dt=float(dt), T=float(T), eps=eps, base_seed=int(base_seed))


# --------------------------------------------------------------------
# Integrator check
# --------------------------------------------------------------------


def strong_order_probe(
    sys: SdeSystem,
    dt_list: Sequence[float],
    x0: ArrayLike = 1.0,
    T: float = 1.0,
    *,
    n_paths: int = 500,
    seed: int = 0,
) -> float:
    """Slope of log E|x_T - exact| against log dt, on shared Brownian paths."""
    dts = sorted({float(dt) for dt in dt_list})
    if len(dts) < 2:
        raise InsufficientDataError("strong order needs at least two distinct step sizes")
    if sys.exact is None:
        raise InvalidParameterError(f"{sys.label or 'system'} has no exact solution")
    fine = dts[0]
    n_fine = _n_steps(fine, T)
    x0v = np.asarray(as_tensor(x0).numpy(), dtype=np.float64).reshape(sys.d)
    dW = np.stack([brownian_increments(seed + i, n_fine, sys.r, fine) for i in range(int(n_paths))])
    B_T = torch.as_tensor(dW.sum(axis=1))
    with torch.no_grad():
        exact = sys.exact(torch.as_tensor(np.tile(x0v, (int(n_paths), 1))), T, B_T).numpy()

    errors = []
    for dt in dts:
        ratio = int(round(dt / fine))
        if abs(ratio * fine - dt) > 1e-12 * dt:
            raise InvalidParameterError(f"step {dt!r} is not a multiple of the finest step {fine!r}")
        _n_steps(dt, T)
        coarse = dW.reshape(int(n_paths), n_fine // ratio, ratio, sys.r).sum(axis=2)
        batch = _integrate(sys, None, np.tile(x0v, (int(n_paths), 1)), coarse, dt)
        err = np.linalg.norm(batch.states[:, -1] - exact, axis=-1)
        errors.append(float(np.mean(err)))
        logger.debug("strong error at dt=%g: %.6g", dt, errors[-1])
    slope, _ = np.polyfit(np.log(dts), np.log(errors), 1)
    return float(slope)
