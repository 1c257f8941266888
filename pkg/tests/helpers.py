"""Finite-difference oracles and network strategies shared by the tests."""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np
import torch
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsc.diffnet import DTYPE, Activation, MlpNet


def fd_gradient(F: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    x = x.to(DTYPE)
    out = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.numel()):
            e = torch.zeros_like(x)
            e[i] = h
            out[i] = (F(x + e) - F(x - e)) / (2.0 * h)
    return out


def fd_hessian(F: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    x = x.to(DTYPE)
    d = x.numel()
    H = torch.zeros(d, d, dtype=DTYPE)
    with torch.no_grad():
        for i in range(d):
            for j in range(d):
                ei = torch.zeros_like(x)
                ej = torch.zeros_like(x)
                ei[i] = h
                ej[j] = h
                H[i, j] = (F(x + ei + ej) - F(x + ei - ej) - F(x - ei + ej) + F(x - ei - ej)) / (4.0 * h * h)
    return H


def fd_param_gradient(loss: Callable[[], float], p: torch.nn.Parameter, index: Tuple[int, ...], h: float = 1e-6) -> float:
    with torch.no_grad():
        orig = float(p[index])
        p[index] = orig + h
        up = loss()
        p[index] = orig - h
        down = loss()
        p[index] = orig
    return (up - down) / (2.0 * h)


@st.composite
def nets_and_points(draw, *, max_dim: int = 4, max_width: int = 32) -> Tuple[MlpNet, torch.Tensor]:
    """(scalar tanh network, evaluation point) pairs of varying shape."""
    d = draw(st.integers(1, max_dim))
    hidden = draw(st.lists(st.integers(2, max_width), min_size=1, max_size=2))
    seed = draw(st.integers(0, 2**16))
    x = draw(arrays(np.float64, d, elements=st.floats(-2.0, 2.0)))
    net = MlpNet(d, 1, hidden, activation=Activation.TANH, seed=seed)
    return net, torch.as_tensor(x, dtype=DTYPE)


def scalar(net: torch.nn.Module) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda z: net(z)[..., 0]
