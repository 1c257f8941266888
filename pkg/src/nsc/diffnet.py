"""Small dense networks plus exact input/parameter differentiation.

Input-gradients use reverse accumulation (`torch.func.grad`); input-Hessians
nest forward-mode over it (`torch.func.jacfwd`), and parameter gradients are a
further reverse pass over the whole composition (`torch.func.grad` over the
parameter dict). The autograd graph recorded by torch plays the role of the
tape: replaying a forward pass on the same inputs reproduces it bit-exactly on
CPU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.func import functional_call, grad_and_value, jacfwd, vmap

from .errors import EstimationError, InvalidParameterError, NonFiniteLossError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DEFAULT_KNOT = 0.1

Params = Dict[str, torch.Tensor]
ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]


class Activation(str, Enum):
    TANH = "tanh"
    SMOOTHED_RELU = "smoothed_relu"
    IDENTITY = "identity"


def as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def _check_knot(d: float) -> float:
    d = float(d)
    if not (d > 0.0) or not math.isfinite(d):
        raise InvalidParameterError(f"smoothed ReLU knot must be positive, got {d!r}")
    return d


def _smoothed_relu_tensor(x: torch.Tensor, d: float) -> torch.Tensor:
    poly = (2.0 * d * x**3 - x**4) / (2.0 * d**3)
    # x >= d takes the linear branch so that sigma(d) = d/2 is exact.
    return torch.where(x <= 0.0, torch.zeros_like(x), torch.where(x < d, poly, x - 0.5 * d))


def smoothed_relu(x: Any, d: float = DEFAULT_KNOT) -> Any:
    """C^2 convex surrogate of ReLU: 0 below 0, quartic blend on (0, d), x - d/2 above."""
    d = _check_knot(d)
    if isinstance(x, torch.Tensor):
        return _smoothed_relu_tensor(x, d)
    out = _smoothed_relu_tensor(as_tensor(x), d)
    return float(out) if out.ndim == 0 else out.numpy()


def activate(x: torch.Tensor, kind: Activation, knot: float = DEFAULT_KNOT) -> torch.Tensor:
    if kind is Activation.TANH:
        return torch.tanh(x)
    if kind is Activation.SMOOTHED_RELU:
        return _smoothed_relu_tensor(x, knot)
    return x


def uniform_fan_in_(weight: torch.Tensor, bias: Optional[torch.Tensor], gen: torch.Generator) -> None:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a seeded generator."""
    bound = 1.0 / math.sqrt(weight.shape[1])
    with torch.no_grad():
        weight.copy_((torch.rand(weight.shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound)
        if bias is not None:
            bias.copy_((torch.rand(bias.shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound)


class MlpNet(nn.Module):
    """Dense feedforward network: affine then activation, Identity on the output layer."""

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden: Sequence[int] = (32, 32),
        *,
        activation: Activation = Activation.TANH,
        output_activation: Activation = Activation.IDENTITY,
        knot: float = DEFAULT_KNOT,
        seed: int = 0,
    ):
        super().__init__()
        if int(input_dim) < 1 or int(output_dim) < 1:
            raise ShapeError("network dimensions must be positive")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden = [int(h) for h in hidden]
        self.activation = Activation(activation)
        self.output_activation = Activation(output_activation)
        self.knot = _check_knot(knot)

        sizes = [self.input_dim, *self.hidden, self.output_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        gen = torch.Generator().manual_seed(int(seed))
        for layer in self.layers:
            uniform_fan_in_(layer.weight, layer.bias, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input of size {self.input_dim}, got {tuple(x.shape)}")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            x = activate(x, self.output_activation if i == last else self.activation, self.knot)
        return x

    def zero_(self) -> "MlpNet":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def mlp_forward(net: MlpNet, x: ArrayLike) -> torch.Tensor:
    with torch.no_grad():
        return net(as_tensor(x))


# --------------------------------------------------------------------
# Input derivatives
# --------------------------------------------------------------------


def input_gradient(F: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike) -> torch.Tensor:
    g, _ = grad_and_value(F)(as_tensor(x))
    return g


def _symmetrize(H: torch.Tensor) -> torch.Tensor:
    return 0.5 * (H + H.transpose(-1, -2))


def input_hessian(F: Callable[[torch.Tensor], torch.Tensor], x: ArrayLike) -> torch.Tensor:
    _, _, H = value_grad_hess(F, as_tensor(x))
    return H


def value_grad_hess(
    F: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """F(x), grad F(x) and the Hessian from one forward-over-reverse pass."""

    def grad_with_aux(z: torch.Tensor):
        g, v = grad_and_value(F)(z)
        return g, (g, v)

    H, (g, v) = jacfwd(grad_with_aux, has_aux=True)(x)
    return v, g, _symmetrize(H)


def batched_value_grad_hess(
    F: Callable[[torch.Tensor], torch.Tensor], xs: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-row value/gradient/Hessian for a batch of inputs of shape (B, d)."""
    return vmap(lambda z: value_grad_hess(F, z))(xs)


# --------------------------------------------------------------------
# Parameter gradients
# --------------------------------------------------------------------


def params_of(module: nn.Module) -> Params:
    return {k: v for k, v in module.named_parameters()}


def bind(module: nn.Module, params: Optional[Mapping[str, torch.Tensor]]) -> Callable[..., torch.Tensor]:
    """Call `module` with `params` substituted (the module itself when params is None)."""
    if params is None:
        return module
    return lambda *args: functional_call(module, dict(params), args)


@dataclass
class GradResult:
    loss: float
    grads: Dict[str, Any]
    terms: torch.Tensor
    aux: Any = None


def param_gradient(
    loss_fn: Callable[[Dict[str, Any]], Tuple[torch.Tensor, torch.Tensor, Any]],
    params: Dict[str, Any],
) -> GradResult:
    """Gradient of a scalar loss w.r.t. every tensor in the (nested) `params` dict.

    `loss_fn(params)` returns `(loss, per_sample_terms, aux)`. Parameters reached
    only through input-gradient/Hessian sub-expressions are included, since the
    whole composition is differentiated. `aux` is either a tensor tree or plain
    Python data (None included); tensors inside plain data are not supported.
    """
    side: Dict[str, Any] = {}

    def wrapped(p):
        loss, terms, aux = loss_fn(p)
        if _is_tensor_tree(aux):
            return loss, (loss.detach(), terms.detach(), aux)
        # torch.func only carries tensors out of the transform.
        side["aux"] = aux
        return loss, (loss.detach(), terms.detach())

    detached = {k: _detach_tree(v) for k, v in params.items()}
    grads, out = torch.func.grad(wrapped, has_aux=True)(detached)
    loss, terms = out[0], out[1]
    aux = out[2] if len(out) == 3 else side.get("aux")
    terms = terms.reshape(-1)
    bad = torch.nonzero(~torch.isfinite(terms))
    if bad.numel():
        raise NonFiniteLossError(int(bad[0, 0]))
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(None)
    return GradResult(loss=float(loss), grads=grads, terms=terms, aux=_detach_tree(aux))


def _is_tensor_tree(v: Any) -> bool:
    if isinstance(v, torch.Tensor):
        return True
    if isinstance(v, dict):
        return bool(v) and all(_is_tensor_tree(x) for x in v.values())
    if isinstance(v, (list, tuple)):
        return bool(v) and all(_is_tensor_tree(x) for x in v)
    return False


def _detach_tree(v: Any) -> Any:
    if isinstance(v, torch.Tensor):
        return v.detach()
    if isinstance(v, dict):
        return {k: _detach_tree(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return type(v)(_detach_tree(x) for x in v)
    return v


# --------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------


@dataclass
class AdamState:
    """Adaptive-moment state over a named parameter set (wraps torch.optim.Adam)."""

    params: Dict[str, nn.Parameter]
    optimizer: torch.optim.Adam

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = float(lr)

    @property
    def step_count(self) -> int:
        st = [self.optimizer.state.get(p, {}).get("step") for p in self.params.values()]
        return int(max((float(s) for s in st if s is not None), default=0))

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        p = self.params[name]
        st = self.optimizer.state.get(p) or {}
        zero = torch.zeros_like(p)
        return st.get("exp_avg", zero), st.get("exp_avg_sq", zero)


def make_adam(
    params: Mapping[str, nn.Parameter],
    *,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    named = dict(params)
    opt = torch.optim.Adam(list(named.values()), lr=float(lr), betas=(float(beta1), float(beta2)), eps=float(eps), foreach=False)
    return AdamState(params=named, optimizer=opt)


def adam_step(state: AdamState, params: Mapping[str, nn.Parameter], grads: Mapping[str, torch.Tensor]) -> AdamState:
    if set(params) != set(state.params):
        raise ShapeError("parameter names do not match the optimizer state")
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return state


# --------------------------------------------------------------------
# Lipschitz estimates
# --------------------------------------------------------------------


def spectral_norm(W: torch.Tensor, *, tol: float = 1e-8, max_iter: int = 20000, seed: int = 0) -> float:
    """Largest singular value of W by power iteration on W^T W."""
    W = W.detach().to(DTYPE)
    if not bool(torch.any(W != 0)):
        return 0.0
    gen = torch.Generator().manual_seed(int(seed))
    v = torch.randn(W.shape[1], generator=gen, dtype=DTYPE)
    v = v / v.norm()
    sigma = 0.0
    for it in range(int(max_iter)):
        u = W @ v
        un = u.norm()
        if un == 0:
            # Start vector in the null space; restart along a fresh direction.
            v = torch.randn(W.shape[1], generator=gen, dtype=DTYPE)
            v = v / v.norm()
            continue
        v = W.T @ (u / un)
        new_sigma = float(v.norm())
        v = v / v.norm()
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            logger.debug("power iteration converged after %d steps (sigma=%.12g)", it + 1, new_sigma)
            return new_sigma
        sigma = new_sigma
    raise EstimationError(f"power iteration did not converge within {max_iter} steps")


def lipschitz_upper_bound(net: MlpNet) -> float:
    """Product of layer spectral norms; every supported activation is 1-Lipschitz."""
    bound = 1.0
    for layer in net.layers:
        bound *= spectral_norm(layer.weight)
    return float(bound)


def empirical_lipschitz(
    fn: Callable[[torch.Tensor], torch.Tensor],
    low: Sequence[float],
    high: Sequence[float],
    *,
    n_pairs: int = 10_000,
    seed: int = 0,
) -> float:
    """Largest observed slope ||fn(x)-fn(y)|| / ||x-y|| over random pairs in a box."""
    lo = as_tensor(low)
    hi = as_tensor(high)
    gen = torch.Generator().manual_seed(int(seed))
    xs = lo + (hi - lo) * torch.rand((int(n_pairs), lo.numel()), generator=gen, dtype=DTYPE)
    ys = lo + (hi - lo) * torch.rand((int(n_pairs), lo.numel()), generator=gen, dtype=DTYPE)
    with torch.no_grad():
        num = (fn(xs) - fn(ys)).reshape(int(n_pairs), -1).norm(dim=1)
    den = (xs - ys).norm(dim=1)
    keep = den > 0
    if not bool(keep.any()):
        return 0.0
    return float((num[keep] / den[keep]).max())


# --------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------


def net_to_dict(net: MlpNet) -> Dict[str, Any]:
    layers: List[Dict[str, Any]] = []
    for layer in net.layers:
        W = layer.weight.detach()
        layers.append(
            {
                "shape": [int(W.shape[0]), int(W.shape[1])],
                "W": [float(v) for v in W.reshape(-1).tolist()],
                "b": [float(v) for v in layer.bias.detach().tolist()],
            }
        )
    return {
        "arch": {"input_dim": net.input_dim, "output_dim": net.output_dim, "hidden": list(net.hidden)},
        "activation": net.activation.value,
        "output_activation": net.output_activation.value,
        "d_knot": net.knot,
        "layers": layers,
    }


def net_from_dict(raw: Mapping[str, Any]) -> MlpNet:
    arch = raw["arch"]
    net = MlpNet(
        int(arch["input_dim"]),
        int(arch["output_dim"]),
        [int(h) for h in arch.get("hidden") or []],
        activation=Activation(raw.get("activation", "tanh")),
        output_activation=Activation(raw.get("output_activation", "identity")),
        knot=float(raw.get("d_knot", DEFAULT_KNOT)),
    )
    if len(raw["layers"]) != len(net.layers):
        raise ShapeError("layer count does not match arch")
    with torch.no_grad():
        for layer, spec in zip(net.layers, raw["layers"]):
            W = torch.tensor(spec["W"], dtype=DTYPE)
            b = torch.tensor(spec["b"], dtype=DTYPE)
            if W.numel() != layer.weight.numel() or b.numel() != layer.bias.numel():
                raise ShapeError("serialized layer does not match arch")
            layer.weight.copy_(W.reshape(layer.weight.shape))
            layer.bias.copy_(b)
    return net
