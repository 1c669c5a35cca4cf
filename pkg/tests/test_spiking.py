import numpy as np
import pytest

from evstate import autodiff as ad
from evstate import spiking
from evstate.autodiff import Tensor


def test_lif_worked_trace_spike_then_reset():
    # V0=0, P0=0, X1=0.5 -> V1=0.5, P1=1; then X2=0 -> V2=0, P2=0
    state = spiking.lif_init((1,))
    p1, state = spiking.lif_step(state, Tensor([0.5]), theta=0.3, alpha=0.2)
    assert state.v.data[0] == pytest.approx(0.5)
    assert p1.data[0] == 1.0
    p2, state = spiking.lif_step(state, Tensor([0.0]), theta=0.3, alpha=0.2)
    assert state.v.data[0] == pytest.approx(0.0)
    assert p2.data[0] == 0.0


def test_lif_worked_trace_subthreshold_accumulation():
    # X1=0.2 < theta -> P1=0; X2=0.2 -> V2 = 0.2*0.2 + 0.2 = 0.24, P2=0
    state = spiking.lif_init((1,))
    p1, state = spiking.lif_step(state, Tensor([0.2]), theta=0.3, alpha=0.2)
    assert p1.data[0] == 0.0
    p2, state = spiking.lif_step(state, Tensor([0.2]), theta=0.3, alpha=0.2)
    assert state.v.data[0] == pytest.approx(0.24)
    assert p2.data[0] == 0.0


def test_lif_spikes_exactly_binary():
    gen = np.random.default_rng(0)
    state = spiking.lif_init((64,))
    for _ in range(20):
        p, state = spiking.lif_step(state, Tensor(gen.standard_normal(64).astype(np.float32)))
        assert set(np.unique(p.data)).issubset({0.0, 1.0})


def test_lif_reset_property_random_states():
    # after a spike at t-1, V^t equals X^t regardless of the pre-spike potential
    gen = np.random.default_rng(1)
    v_prev = Tensor(gen.standard_normal(10_000).astype(np.float64) * 5.0)
    p_prev = Tensor(np.ones(10_000))
    x = Tensor(gen.standard_normal(10_000))
    _, state = spiking.lif_step(spiking.LifState(v=v_prev, p=p_prev), x, theta=0.3, alpha=0.2)
    assert np.array_equal(state.v.data, x.data)


def test_lif_degenerate_chain_transmits_nothing():
    # alpha=0 and a huge threshold: all-zero spikes through a chain
    gen = np.random.default_rng(2)
    state1 = spiking.lif_init((32,))
    state2 = spiking.lif_init((32,))
    for _ in range(10):
        p1, state1 = spiking.lif_step(state1, Tensor(gen.standard_normal(32)), theta=1e9, alpha=0.0)
        p2, state2 = spiking.lif_step(state2, p1, theta=1e9, alpha=0.0)
        assert not p1.data.any()
        assert not p2.data.any()


def test_surrogate_grad_values():
    vals = spiking.surrogate_grad(Tensor([0.0, 1.0, 0.4, -0.4, 0.5]), a=1.0)
    assert vals.data.tolist() == [1.0, 0.0, 1.0, 1.0, 0.0]
    vals2 = spiking.surrogate_grad(Tensor([0.0]), a=2.0)
    assert vals2.data[0] == pytest.approx(0.5)  # 1/a at the window center
    with pytest.raises(ValueError):
        spiking.surrogate_grad(Tensor([0.0]), a=0.0)


def test_spike_backward_uses_rectangular_window():
    v = Tensor([0.1, 0.9, -0.2], requires_grad=True, dtype=np.float64)
    out = ad.tsum(spiking.spike(v - 0.3, a=1.0) * Tensor([1.0, 1.0, 1.0], dtype=np.float64))
    out.backward()
    # v - theta = [-0.2, 0.6, -0.5]: inside the window, outside, and exactly
    # on the half-width boundary (excluded: |v| < a/2 is strict)
    assert v.grad.tolist() == [1.0, 0.0, 0.0]


def test_bptt_gradient_flows_through_time():
    # Input at t=1 influences the potential at t=3 via the membrane chain.
    # Far from threshold the surrogate is zero and dV3/dx1 is exactly alpha^2;
    # near threshold the reset gate contributes -alpha*V*surrogate per step.
    x1 = Tensor([0.1], requires_grad=True, dtype=np.float64)
    state = spiking.lif_init((1,), dtype=np.float64)
    _, state = spiking.lif_step(state, x1, theta=5.0, alpha=0.5)
    _, state = spiking.lif_step(state, Tensor([0.05], dtype=np.float64), theta=5.0, alpha=0.5)
    _, state = spiking.lif_step(state, Tensor([0.05], dtype=np.float64), theta=5.0, alpha=0.5)
    ad.tsum(state.v).backward()
    assert x1.grad[0] == pytest.approx(0.25)

    x1 = Tensor([0.1], requires_grad=True, dtype=np.float64)
    state = spiking.lif_init((1,), dtype=np.float64)
    _, state = spiking.lif_step(state, x1, theta=0.3, alpha=0.5)
    _, state = spiking.lif_step(state, Tensor([0.05], dtype=np.float64), theta=0.3, alpha=0.5)
    _, state = spiking.lif_step(state, Tensor([0.05], dtype=np.float64), theta=0.3, alpha=0.5)
    ad.tsum(state.v).backward()
    # every V stays at 0.1 so each step multiplies by alpha*(1-P) - alpha*V*1 = 0.45
    assert x1.grad[0] == pytest.approx(0.45**2)
