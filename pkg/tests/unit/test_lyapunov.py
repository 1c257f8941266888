from __future__ import annotations

import math

import pytest
import torch

from helpers import fd_gradient, fd_hessian
from nsc.control import LinearController
from nsc.diffnet import DTYPE
from nsc.errors import ConfigurationError, InvalidParameterError, ShapeError
from nsc.lyapunov import (
    IcnnV,
    QuadraticV,
    build_lyapunov,
    generator_LV,
    lyap_grad_hess,
    lyap_value,
    lyapunov_from_dict,
    lyapunov_to_dict,
)
from nsc.systems import make_gbm, make_linear


def _points(n: int, d: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(n, d, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * 5.0


@pytest.mark.parametrize("V", [IcnnV(2, [16, 16], seed=1), QuadraticV(2, [16], seed=1)], ids=["icnn", "quadratic"])
def test_value_vanishes_at_origin_and_dominates_regularizer(V):
    assert lyap_value(V, [0.0, 0.0]) == 0.0
    x = _points(100_000, 2)
    v = lyap_value(V, x)
    assert bool((v >= V.eps * (x * x).sum(-1) - 1e-12).all())


def test_icnn_core_is_midpoint_convex():
    V = IcnnV(3, [32, 32], seed=2)
    a = _points(10_000, 3, seed=3)
    b = _points(10_000, 3, seed=4)
    with torch.no_grad():
        mid = V.convex_part(0.5 * (a + b))
        ends = 0.5 * (V.convex_part(a) + V.convex_part(b))
    assert int((mid - ends > 1e-12).sum()) == 0


def test_icnn_positive_weights_stay_positive():
    V = IcnnV(2, [8, 8], seed=0)
    with torch.no_grad():
        for U in V.U_free:
            U.fill_(-50.0)
    assert all(bool((W > 0).all()) for W in V.positive_weights())


def test_icnn_inner_map_keeps_origin():
    V = IcnnV(2, [8], seed=0, inner=lambda x: torch.tanh(x) + x**3)
    assert lyap_value(V, [0.0, 0.0]) == 0.0
    assert lyap_value(V, [1.0, -0.5]) > 0.0


def test_quadratic_value_matches_definition():
    V = QuadraticV(2, [8], m=3, eps=0.01, seed=5)
    x = torch.tensor([0.7, -1.2], dtype=DTYPE)
    A = V.factor(x).detach()
    assert A.shape == (3, 2)
    expected = 0.01 * float(x @ x) + float((A @ x) @ (A @ x))
    assert lyap_value(V, x) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("V", [IcnnV(3, [8, 8], seed=6), QuadraticV(3, [8], seed=6)], ids=["icnn", "quadratic"])
def test_derivatives_match_finite_differences(V):
    for x in ([0.4, -0.9, 1.3], [0.02, -0.01, 0.03]):
        x = torch.tensor(x, dtype=DTYPE)
        g, H = lyap_grad_hess(V, x)
        torch.testing.assert_close(g, fd_gradient(lambda z: V(z), x), rtol=1e-5, atol=1e-8)
        torch.testing.assert_close(H, fd_hessian(lambda z: V(z), x), rtol=1e-3, atol=1e-5)


@pytest.mark.parametrize("V", [IcnnV(3, [8, 8], seed=7), QuadraticV(3, [8], seed=7)], ids=["icnn", "quadratic"])
def test_gradient_vanishes_at_origin(V):
    g, _ = lyap_grad_hess(V, [0.0, 0.0, 0.0])
    assert float(g.abs().max()) < 1e-12


def test_wrong_dimension_raises():
    with pytest.raises(ShapeError):
        IcnnV(2)(torch.zeros(3, dtype=DTYPE))
    with pytest.raises(ShapeError):
        QuadraticV(2)(torch.zeros(3, dtype=DTYPE))
    with pytest.raises(InvalidParameterError):
        IcnnV(2, eps=0.0)


def test_generator_of_squared_norm_on_gbm():
    # V = eps x^2 is exactly quadratic when the network part is zeroed.
    V = QuadraticV(1, [4], eps=1.0, seed=0)
    V.net.zero_()
    sys = make_gbm(a=0.5, b=1.0)
    # LV = 2 a x^2 + b^2 x^2 = 2x^2 at x = 1.
    assert generator_LV(V, sys, None, [1.0]) == pytest.approx(2.0, rel=1e-12)
    # Control adds to the diffusion: (b + k)^2 x^2 = 9 with k = 2.
    assert generator_LV(V, sys, LinearController(1, 2.0), [1.0]) == pytest.approx(1.0 + 9.0, rel=1e-12)


def test_generator_without_noise_is_directional_derivative():
    V = QuadraticV(2, [4], eps=1.0, seed=0)
    V.net.zero_()
    sys = make_linear(a=-1.0, d=2)
    assert generator_LV(V, sys, None, [1.0, 2.0]) == pytest.approx(-2.0 * 5.0)


@pytest.mark.parametrize("kind", ["icnn", "quadratic"])
def test_serialization_preserves_values(kind):
    V = build_lyapunov(kind, 2, hidden=[6, 5] if kind == "icnn" else [6], eps=0.01, knot=0.2, seed=3)
    clone = lyapunov_from_dict(lyapunov_to_dict(V))
    x = _points(50, 2)
    assert torch.equal(lyap_value(V, x), lyap_value(clone, x))


def test_inner_map_cannot_be_serialized():
    with pytest.raises(ConfigurationError):
        lyapunov_to_dict(IcnnV(1, [2], inner=torch.sin))


def test_icnn_is_radially_unbounded():
    V = IcnnV(2, [8], eps=1e-3, seed=0)
    far = lyap_value(V, [1e3, 0.0])
    assert far >= 1e-3 * 1e6 and math.isfinite(far)


class _Blend(torch.nn.Module):
    def __init__(self, a: float, V1: torch.nn.Module, b: float, V2: torch.nn.Module):
        super().__init__()
        self.a, self.b, self.V1, self.V2 = a, b, V1, V2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.a * self.V1(x) + self.b * self.V2(x)


def test_generator_is_linear_in_the_candidate():
    V1 = IcnnV(2, [8], seed=11)
    V2 = QuadraticV(2, [8], seed=12)
    sys = make_linear(a=0.7, d=2)
    u = LinearController(2, 1.5)
    for x in ([0.3, -1.1], [2.0, 0.5]):
        blended = generator_LV(_Blend(2.0, V1, -0.5, V2), sys, u, x)
        parts = 2.0 * generator_LV(V1, sys, u, x) - 0.5 * generator_LV(V2, sys, u, x)
        assert blended == pytest.approx(parts, rel=1e-10, abs=1e-12)
