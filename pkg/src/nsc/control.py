"""Diffusion-term controllers u: R^d -> R^{d x r} with u(0) = 0."""

from __future__ import annotations

import logging
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .diffnet import (
    DTYPE,
    Activation,
    ArrayLike,
    MlpNet,
    as_tensor,
    lipschitz_upper_bound,
    net_from_dict,
    net_to_dict,
    spectral_norm,
)
from .errors import ConfigurationError, InvalidParameterError, ShapeError

logger = logging.getLogger(__name__)


class ControllerKind(str, Enum):
    NEURAL_SHIFT = "neural_shift"
    NEURAL_DIAG = "neural_diag"
    LINEAR = "linear"


def _mask_tensor(d: int, pin_mask: Optional[Sequence[bool]]) -> torch.Tensor:
    if pin_mask is None:
        return torch.ones(d, dtype=torch.bool)
    mask = torch.as_tensor([bool(v) for v in pin_mask], dtype=torch.bool)
    if mask.numel() != d:
        raise ShapeError(f"pin_mask has {mask.numel()} entries, expected {d}")
    return mask


class Controller(nn.Module):
    """Base class. Subclasses implement `_raw(z)` on the (optionally mapped) state z.

    `input_map` P makes the network see Px instead of x, so u vanishes on
    the whole kernel of P. Rows whose pin_mask entry is False are zeroed.
    """

    kind: ControllerKind

    def __init__(
        self,
        d: int,
        r: int,
        *,
        pin_mask: Optional[Sequence[bool]] = None,
        input_map: Optional[ArrayLike] = None,
    ):
        super().__init__()
        if int(d) < 1 or int(r) < 1:
            raise ShapeError("controller dimensions must be positive")
        self.d = int(d)
        self.r = int(r)
        self.register_buffer("pin_mask", _mask_tensor(self.d, pin_mask))
        if input_map is None:
            self.input_map = None
        else:
            P = as_tensor(input_map)
            if tuple(P.shape) != (self.d, self.d):
                raise ShapeError(f"input_map must be {self.d}x{self.d}, got {tuple(P.shape)}")
            self.register_buffer("input_map", P)

    def _raw(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"controller expects states of size {self.d}, got {tuple(x.shape)}")
        z = x if self.input_map is None else x @ self.input_map.T
        return self._raw(z) * self.pin_mask.to(DTYPE)[:, None]


class NeuralShift(Controller):
    """u(x) = NN(x) - NN(0), reshaped to d x r."""

    kind = ControllerKind.NEURAL_SHIFT

    def __init__(
        self,
        d: int,
        r: int = 1,
        hidden: Sequence[int] = (32, 32),
        *,
        seed: int = 0,
        net: Optional[MlpNet] = None,
        pin_mask: Optional[Sequence[bool]] = None,
        input_map: Optional[ArrayLike] = None,
    ):
        super().__init__(d, r, pin_mask=pin_mask, input_map=input_map)
        self.net = net if net is not None else MlpNet(self.d, self.d * self.r, hidden, activation=Activation.TANH, seed=seed)
        if self.net.input_dim != self.d or self.net.output_dim != self.d * self.r:
            raise ShapeError("NeuralShift network must map R^d to R^(d*r)")

    def _raw(self, z: torch.Tensor) -> torch.Tensor:
        out = self.net(z) - self.net(torch.zeros_like(z))
        return out.reshape(*z.shape[:-1], self.d, self.r)


class NeuralDiag(Controller):
    """u(x) = diag(x_1 NN_1(x), ..., x_d NN_d(x)); r must equal d."""

    kind = ControllerKind.NEURAL_DIAG

    def __init__(
        self,
        d: int,
        r: Optional[int] = None,
        hidden: Sequence[int] = (32, 32),
        *,
        seed: int = 0,
        net: Optional[MlpNet] = None,
        pin_mask: Optional[Sequence[bool]] = None,
        input_map: Optional[ArrayLike] = None,
    ):
        r = int(d) if r is None else int(r)
        if r != int(d):
            raise ConfigurationError(f"diagonal controller needs r == d, got d={d}, r={r}")
        super().__init__(d, r, pin_mask=pin_mask, input_map=input_map)
        self.net = net if net is not None else MlpNet(self.d, self.d, hidden, activation=Activation.TANH, seed=seed)
        if self.net.input_dim != self.d or self.net.output_dim != self.d:
            raise ShapeError("NeuralDiag network must map R^d to R^d")

    def _raw(self, z: torch.Tensor) -> torch.Tensor:
        return torch.diag_embed(z * self.net(z))


class LinearController(Controller):
    """u(x) = K x as a d x 1 column; a scalar gain k means K = k I."""

    kind = ControllerKind.LINEAR

    def __init__(
        self,
        d: int,
        k: Union[float, ArrayLike] = 1.0,
        r: int = 1,
        *,
        pin_mask: Optional[Sequence[bool]] = None,
        input_map: Optional[ArrayLike] = None,
    ):
        if int(r) != 1:
            raise ConfigurationError(f"linear controller has a single noise channel, got r={r}")
        super().__init__(d, 1, pin_mask=pin_mask, input_map=input_map)
        K = as_tensor(k)
        if K.ndim == 0:
            K = K * torch.eye(self.d, dtype=DTYPE)
        if tuple(K.shape) != (self.d, self.d):
            raise ShapeError(f"gain must be a scalar or {self.d}x{self.d} matrix")
        self.register_buffer("gain", K)

    def _raw(self, z: torch.Tensor) -> torch.Tensor:
        return (z @ self.gain.T)[..., None]


def square_law_controller(coef: float = 2.0) -> NeuralDiag:
    """1-D u(x) = coef * x^2, written as x * NN(x) with NN(x) = coef * x."""
    net = MlpNet(1, 1, [], activation=Activation.IDENTITY)
    with torch.no_grad():
        net.layers[0].weight.fill_(float(coef))
        net.layers[0].bias.zero_()
    return NeuralDiag(1, net=net)


def build_controller(
    kind: Union[str, ControllerKind],
    d: int,
    r: int,
    *,
    hidden: Sequence[int] = (32, 32),
    seed: int = 0,
    k: Optional[float] = None,
    pin_mask: Optional[Sequence[bool]] = None,
    input_map: Optional[ArrayLike] = None,
) -> Controller:
    kind = ControllerKind(kind)
    if kind is ControllerKind.LINEAR:
        return LinearController(d, 1.0 if k is None else k, r, pin_mask=pin_mask, input_map=input_map)
    if kind is ControllerKind.NEURAL_DIAG:
        return NeuralDiag(d, r, hidden, seed=seed, pin_mask=pin_mask, input_map=input_map)
    return NeuralShift(d, r, hidden, seed=seed, pin_mask=pin_mask, input_map=input_map)


# --------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------


def control_eval(u: Controller, x: ArrayLike) -> torch.Tensor:
    with torch.no_grad():
        return u(as_tensor(x))


def control_energy_density(u: Optional[Controller], x: ArrayLike) -> Union[float, torch.Tensor]:
    """Squared Frobenius norm of u(x); batched input gives one value per row."""
    x = as_tensor(x)
    if u is None:
        out = torch.zeros(x.shape[:-1], dtype=DTYPE)
    else:
        U = control_eval(u, x)
        out = (U * U).sum((-2, -1))
    return float(out) if out.ndim == 0 else out


def controller_lipschitz(u: Controller, radius: Optional[float] = None) -> float:
    """Upper bound k_u on the Lipschitz constant of x -> u(x) (Frobenius norm).

    The diagonal shape is only locally Lipschitz, so it needs the radius R of
    the ball the bound is meant for: ||NN(0)|| + 2 R Lip(NN).
    """
    scale = 1.0 if u.input_map is None else spectral_norm(u.input_map)
    if isinstance(u, LinearController):
        return spectral_norm(u.gain) * scale
    if isinstance(u, NeuralShift):
        return lipschitz_upper_bound(u.net) * scale
    if isinstance(u, NeuralDiag):
        if radius is None or not (float(radius) > 0):
            raise InvalidParameterError("diagonal controller Lipschitz bound needs a positive radius")
        with torch.no_grad():
            at_zero = float(u.net(torch.zeros(u.d, dtype=DTYPE)).norm())
        return (at_zero + 2.0 * float(radius) * lipschitz_upper_bound(u.net)) * scale
    raise ConfigurationError(f"unsupported controller type {type(u).__name__}")


# --------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------


def controller_to_dict(u: Controller) -> Dict[str, Any]:
    raw: Dict[str, Any] = {
        "controller_kind": u.kind.value,
        "d": u.d,
        "r": u.r,
        "pin_mask": [bool(v) for v in u.pin_mask.tolist()],
        "input_map": None if u.input_map is None else [float(v) for v in u.input_map.reshape(-1).tolist()],
    }
    if isinstance(u, LinearController):
        raw["k"] = [float(v) for v in u.gain.reshape(-1).tolist()]
    else:
        raw["net"] = net_to_dict(u.net)
    return raw


def controller_from_dict(raw: Mapping[str, Any]) -> Controller:
    kind = ControllerKind(raw["controller_kind"])
    d, r = int(raw["d"]), int(raw["r"])
    pin = raw.get("pin_mask")
    P = raw.get("input_map")
    P = None if P is None else np.asarray(P, dtype=np.float64).reshape(d, d)
    if kind is ControllerKind.LINEAR:
        K = np.asarray(raw["k"], dtype=np.float64).reshape(d, d)
        return LinearController(d, K, r, pin_mask=pin, input_map=P)
    net = net_from_dict(raw["net"])
    if kind is ControllerKind.NEURAL_DIAG:
        return NeuralDiag(d, r, net=net, pin_mask=pin, input_map=P)
    return NeuralShift(d, r, net=net, pin_mask=pin, input_map=P)
