"""Candidate Lyapunov functions and the generator LV of the controlled SDE."""

from __future__ import annotations

import math
from enum import Enum
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .control import Controller
from .diffnet import (
    DEFAULT_KNOT,
    DTYPE,
    Activation,
    ArrayLike,
    MlpNet,
    _smoothed_relu_tensor,
    as_tensor,
    net_from_dict,
    net_to_dict,
    uniform_fan_in_,
    value_grad_hess,
)
from .errors import ConfigurationError, InvalidParameterError, ShapeError
from .sde import SdeSystem, controlled_diffusion

DEFAULT_EPS = 1e-3


class LyapunovKind(str, Enum):
    ICNN = "icnn"
    QUADRATIC = "quadratic"


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not (eps > 0.0) or not math.isfinite(eps):
        raise InvalidParameterError(f"regularizer weight must be positive, got {eps!r}")
    return eps


class IcnnV(nn.Module):
    """V(x) = s(g(F(x)) - g(F(0))) + eps*||x||^2 with g an input convex network.

    Layers: z1 = s(W0 x + b0), z_{i+1} = s(U_i z_i + W_i x + b_i), g = z_k (scalar).
    U_i = softplus(free parameters) keeps them positive under unconstrained steps.
    """

    kind = LyapunovKind.ICNN

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int] = (32, 32),
        *,
        eps: float = DEFAULT_EPS,
        knot: float = DEFAULT_KNOT,
        seed: int = 0,
        inner: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    ):
        super().__init__()
        self.dim = int(dim)
        self.hidden = [int(h) for h in hidden]
        self.eps = _check_eps(eps)
        self.knot = float(knot)
        self.inner = inner

        sizes = [*self.hidden, 1]
        gen = torch.Generator().manual_seed(int(seed))
        self.W = nn.ModuleList(nn.Linear(self.dim, h, dtype=DTYPE) for h in sizes)
        self.U_free = nn.ParameterList(
            nn.Parameter(torch.empty(b, a, dtype=DTYPE)) for a, b in zip(sizes[:-1], sizes[1:])
        )
        for layer in self.W:
            uniform_fan_in_(layer.weight, layer.bias, gen)
        for U in self.U_free:
            uniform_fan_in_(U, None, gen)

    def positive_weights(self) -> list[torch.Tensor]:
        return [F.softplus(U) for U in self.U_free]

    def convex_part(self, x: torch.Tensor) -> torch.Tensor:
        """g(x): the input convex core, before the inner map and centering."""
        s = lambda t: _smoothed_relu_tensor(t, self.knot)
        z = s(self.W[0](x))
        for W, U in zip(list(self.W)[1:], self.positive_weights()):
            z = s(z @ U.T + W(x))
        return z[..., 0]

    def _mapped(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.inner is None else self.inner(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected input of size {self.dim}, got {tuple(x.shape)}")
        shifted = self.convex_part(self._mapped(x)) - self.convex_part(self._mapped(torch.zeros_like(x)))
        return _smoothed_relu_tensor(shifted, self.knot) + self.eps * (x * x).sum(-1)


class QuadraticV(nn.Module):
    """V(x) = x^T [eps I + A(x)^T A(x)] x with A(x) an (m x d) tanh network output."""

    kind = LyapunovKind.QUADRATIC

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int] = (32,),
        *,
        m: Optional[int] = None,
        eps: float = DEFAULT_EPS,
        seed: int = 0,
    ):
        super().__init__()
        self.dim = int(dim)
        self.m = int(m) if m is not None else self.dim
        if self.m < 1:
            raise ShapeError("m must be positive")
        self.eps = _check_eps(eps)
        self.net = MlpNet(self.dim, self.m * self.dim, hidden, activation=Activation.TANH, seed=seed)

    def factor(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).reshape(*x.shape[:-1], self.m, self.dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected input of size {self.dim}, got {tuple(x.shape)}")
        Ax = torch.einsum("...ij,...j->...i", self.factor(x), x)
        return self.eps * (x * x).sum(-1) + (Ax * Ax).sum(-1)


LyapunovNet = Union[IcnnV, QuadraticV]


def lyap_value(V: LyapunovNet, x: ArrayLike) -> Union[float, torch.Tensor]:
    with torch.no_grad():
        out = V(as_tensor(x))
    return float(out) if out.ndim == 0 else out


def lyap_grad_hess(V: LyapunovNet, x: ArrayLike) -> Tuple[torch.Tensor, torch.Tensor]:
    _, g, H = value_grad_hess(V, as_tensor(x))
    return g.detach(), H.detach()


def generator_terms(
    grad: torch.Tensor, hess: torch.Tensor, f: torch.Tensor, gu: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(LV, ||grad V^T g_u||^2) from precomputed derivatives; works batched."""
    lv = (grad * f).sum(-1) + 0.5 * torch.einsum("...ir,...jr,...ij->...", gu, gu, hess)
    row = torch.einsum("...i,...ir->...r", grad, gu)
    return lv, (row * row).sum(-1)


def generator_LV(V: LyapunovNet, sys: SdeSystem, u: Optional[Controller], x: ArrayLike) -> float:
    """grad V^T f + 1/2 trace(g_u g_u^T Hess V), evaluated in the system's error coordinates."""
    x = as_tensor(x)
    with torch.no_grad():
        f = sys.error(sys.drift(x))
        gu = sys.error_diffusion(controlled_diffusion(sys, u, x))
    g, H = lyap_grad_hess(V, sys.error(x))
    lv, _ = generator_terms(g, H, f, gu)
    return float(lv)


# --------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------


def lyapunov_to_dict(V: LyapunovNet) -> Dict[str, Any]:
    if isinstance(V, QuadraticV):
        return {
            "lyapunov_kind": LyapunovKind.QUADRATIC.value,
            "eps": V.eps,
            "m": V.m,
            "dim": V.dim,
            "net": net_to_dict(V.net),
        }
    if V.inner is not None:
        raise ConfigurationError("ICNN with a custom inner map cannot be serialized")
    return {
        "lyapunov_kind": LyapunovKind.ICNN.value,
        "eps": V.eps,
        "dim": V.dim,
        "arch": {"hidden": list(V.hidden)},
        "activation": Activation.SMOOTHED_RELU.value,
        "d_knot": V.knot,
        "layers": [
            {
                "W": [float(v) for v in W.weight.detach().reshape(-1).tolist()],
                "b": [float(v) for v in W.bias.detach().tolist()],
                "U_free": None if i == 0 else [float(v) for v in V.U_free[i - 1].detach().reshape(-1).tolist()],
            }
            for i, W in enumerate(V.W)
        ],
    }


def lyapunov_from_dict(raw: Mapping[str, Any]) -> LyapunovNet:
    kind = LyapunovKind(raw["lyapunov_kind"])
    if kind is LyapunovKind.QUADRATIC:
        net = net_from_dict(raw["net"])
        V = QuadraticV(int(raw["dim"]), net.hidden, m=int(raw["m"]), eps=float(raw["eps"]))
        V.net = net
        return V

    V = IcnnV(
        int(raw["dim"]),
        [int(h) for h in raw["arch"]["hidden"]],
        eps=float(raw["eps"]),
        knot=float(raw.get("d_knot", DEFAULT_KNOT)),
    )
    layers = raw["layers"]
    if len(layers) != len(V.W):
        raise ShapeError("layer count does not match arch")
    with torch.no_grad():
        for i, (W, spec) in enumerate(zip(V.W, layers)):
            W.weight.copy_(torch.tensor(spec["W"], dtype=DTYPE).reshape(W.weight.shape))
            W.bias.copy_(torch.tensor(spec["b"], dtype=DTYPE))
            if i > 0:
                U = V.U_free[i - 1]
                U.copy_(torch.tensor(spec["U_free"], dtype=DTYPE).reshape(U.shape))
    return V


def build_lyapunov(kind: str, dim: int, *, hidden: Sequence[int], eps: float, knot: float, seed: int, m: Optional[int] = None) -> LyapunovNet:
    k = LyapunovKind(kind)
    if k is LyapunovKind.ICNN:
        return IcnnV(dim, hidden, eps=eps, knot=knot, seed=seed)
    return QuadraticV(dim, hidden, m=m, eps=eps, seed=seed)
