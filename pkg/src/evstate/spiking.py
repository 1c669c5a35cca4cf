"""LIF spiking layer with a rectangular surrogate gradient.

Forward emits exact binary spikes P = h(V - theta) with h the Heaviside
step; the membrane update V^t = alpha * V^{t-1} * (1 - P^{t-1}) + X^t
resets the potential after a spike. h has zero derivative almost
everywhere, so backpropagation through time substitutes a rectangular
window dh/dv ~ (1/a) * [|v - theta| < a/2] in the backward pass only; the
whole temporal chain (including the reset term) stays on the autodiff
tape, which is what makes surrogate-gradient training through time work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor


def spike(v_minus_theta, a: float = 1.0) -> Tensor:
    """Heaviside forward, rectangular surrogate backward."""
    v = as_tensor(v_minus_theta)
    out = (v.data >= 0).astype(v.dtype)

    def backward(g):
        window = (np.abs(v.data) < a / 2).astype(v.dtype)
        return (g * (window / a),)

    return ad._make(out, (v,), backward)


def surrogate_grad(v_minus_theta, a: float = 1.0) -> Tensor:
    """The surrogate derivative values themselves: (1/a) * [|v - theta| < a/2]."""
    if a <= 0:
        raise ValueError("surrogate window width must be positive")
    v = as_tensor(v_minus_theta)
    return Tensor((np.abs(v.data) < a / 2).astype(v.dtype) / a)


@dataclass
class LifState:
    """Membrane potential V and previous spikes P, both on the tape."""

    v: Tensor
    p: Tensor


def lif_init(shape, dtype=np.float32) -> LifState:
    return LifState(v=Tensor(np.zeros(shape, dtype=dtype)), p=Tensor(np.zeros(shape, dtype=dtype)))


def lif_step(state: LifState, x, theta: float = 0.3, alpha: float = 0.2, a: float = 1.0) -> tuple[Tensor, LifState]:
    """One LIF update. Returns (spikes, new state); spikes are exactly binary."""
    x = as_tensor(x)
    v = (alpha * state.v) * (1.0 - state.p) + x
    p = spike(v - theta, a=a)
    return p, LifState(v=v, p=p)


class Lif:
    """A spiking layer instance: owns its state across the time loop."""

    def __init__(self, theta: float = 0.3, alpha: float = 0.2, a: float = 1.0):
        self.theta = theta
        self.alpha = alpha
        self.a = a
        self.state: LifState | None = None

    def reset(self):
        self.state = None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if self.state is None:
            self.state = lif_init(x.shape, dtype=x.dtype)
        p, self.state = lif_step(self.state, x, theta=self.theta, alpha=self.alpha, a=self.a)
        return p

    @property
    def potential(self) -> Tensor:
        if self.state is None:
            raise RuntimeError("spiking layer has not been stepped yet")
        return self.state.v

    @property
    def spikes(self) -> Tensor:
        if self.state is None:
            raise RuntimeError("spiking layer has not been stepped yet")
        return self.state.p
