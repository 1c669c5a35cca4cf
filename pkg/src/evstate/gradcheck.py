"""Central finite-difference gradient checking.

Every differentiable primitive is checked at float64 against a two-sided
difference. The reported figure per check is

    max|analytic - numeric| / max(1, max|analytic|, max|numeric|)

i.e. the worst absolute deviation normalized by the gradient scale, which
is what the pass thresholds (1e-6, attention 1e-5) refer to.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tensor

DEFAULT_H = 1e-6


def numeric_gradients(fn, leaves: list[Tensor], h: float = DEFAULT_H) -> list[np.ndarray]:
    """Two-sided finite differences of a scalar-valued fn wrt each leaf."""
    grads = []
    with ad.no_grad():
        for leaf in leaves:
            g = np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                hi = float(fn().data)
                flat[i] = keep - h
                lo = float(fn().data)
                flat[i] = keep
                gflat[i] = (hi - lo) / (2.0 * h)
            grads.append(g)
    return grads


def max_rel_error(fn, leaves: list[Tensor], h: float = DEFAULT_H) -> float:
    """Scale-normalized worst-case error between tape and numeric gradients."""
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    numeric = numeric_gradients(fn, leaves, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst


def _leaf(gen, *shape, offset=0.0, scale=1.0) -> Tensor:
    return Tensor(scale * gen.standard_normal(shape) + offset, requires_grad=True, dtype=np.float64)


def suite(seed: int = 0) -> dict[str, tuple[float, float]]:
    """Named check -> (max relative error, pass threshold) for every primitive
    and for the composed non-spiking loss path."""
    gen = np.random.default_rng(seed)
    checks: dict[str, tuple[float, float]] = {}

    def run(name, fn, leaves, tol=1e-6):
        checks[name] = (max_rel_error(fn, leaves), tol)

    a = _leaf(gen, 3, 4)
    b = _leaf(gen, 3, 4)
    run("add", lambda: ad.tsum(a + b), [a, b])
    run("mul", lambda: ad.tsum(a * b), [a, b])
    c = _leaf(gen, 3, 4, offset=3.0)  # keep the divisor away from zero
    run("div", lambda: ad.tsum(a / c), [a, c])
    row = _leaf(gen, 1, 4)
    run("broadcast_add", lambda: ad.tsum(a + row), [a, row])
    run("exp", lambda: ad.tsum(ad.exp(a * 0.3)), [a])
    p = _leaf(gen, 3, 4, offset=4.0)
    run("log", lambda: ad.tsum(ad.log(p)), [p])
    run("sqrt", lambda: ad.tsum(ad.sqrt(p)), [p])
    r = Tensor(gen.standard_normal((4, 5)) + np.where(gen.standard_normal((4, 5)) > 0, 0.5, -0.5), requires_grad=True, dtype=np.float64)
    run("relu", lambda: ad.tsum(ad.relu(r)), [r])  # inputs kept off the kink
    run("sigmoid", lambda: ad.tsum(ad.sigmoid(a)), [a])
    m1 = _leaf(gen, 3, 5)
    m2 = _leaf(gen, 5, 2)
    run("matmul", lambda: ad.tsum(ad.matmul(m1, m2)), [m1, m2])
    mb1 = _leaf(gen, 2, 2, 3, 4)
    mb2 = _leaf(gen, 2, 2, 4, 3)
    run("matmul_batched", lambda: ad.tsum(ad.matmul(mb1, mb2)), [mb1, mb2])
    run("mean", lambda: ad.mean(a * a), [a])
    run("reshape_transpose", lambda: ad.tsum(ad.transpose(ad.reshape(a, (4, 3)), (1, 0)) * b), [a, b])
    s1 = _leaf(gen, 2, 3)
    s2 = _leaf(gen, 2, 3)
    concat_w = Tensor(gen.standard_normal((2, 6)), dtype=np.float64)
    run("concat", lambda: ad.tsum(ad.concat([s1, s2], axis=1) * concat_w), [s1, s2])
    stack_w = Tensor(gen.standard_normal((2, 2, 3)), dtype=np.float64)
    run("stack", lambda: ad.tsum(ad.stack([s1, s2], axis=0) * stack_w), [s1, s2])
    sm = _leaf(gen, 3, 6)
    w_sm = Tensor(gen.standard_normal((3, 6)), dtype=np.float64)
    run("softmax", lambda: ad.tsum(ad.softmax(sm, axis=-1) * w_sm), [sm])

    x_img = _leaf(gen, 2, 3, 5, 5)
    w_img = _leaf(gen, 4, 3, 3, 3, scale=0.5)
    b_img = _leaf(gen, 4)
    run("conv2d", lambda: ad.tsum(nnops.conv2d(x_img, w_img, b_img)), [x_img, w_img, b_img])
    run("conv2d_stride2", lambda: ad.tsum(nnops.conv2d(x_img, w_img, b_img, stride=2)), [x_img, w_img, b_img])
    pool_x = _leaf(gen, 2, 3, 4, 6)
    pool_w = Tensor(gen.standard_normal((2, 3, 2, 3)), dtype=np.float64)
    run("avg_pool", lambda: ad.tsum(nnops.avg_pool2d(pool_x, 2) * pool_w), [pool_x])
    run("adaptive_avg_pool", lambda: ad.tsum(nnops.adaptive_avg_pool(x_img) * 1.0), [x_img])

    bn_x = _leaf(gen, 4, 3, 4, 4)
    bn_g = _leaf(gen, 3, offset=1.0, scale=0.2)
    bn_b = _leaf(gen, 3, scale=0.2)
    bn_w = Tensor(gen.standard_normal((4, 3, 4, 4)), dtype=np.float64)
    run(
        "batch_norm",
        lambda: ad.tsum(nnops.batch_norm(bn_x, bn_g, bn_b, np.zeros(3), np.ones(3), training=True) * bn_w),
        [bn_x, bn_g, bn_b],
    )

    lin_x = _leaf(gen, 3, 6)
    lin_w = _leaf(gen, 4, 6, scale=0.5)
    lin_b = _leaf(gen, 4)
    run("linear", lambda: ad.tsum(nnops.linear(lin_x, lin_w, lin_b)), [lin_x, lin_w, lin_b])

    gr = _leaf(gen, 4, 7)
    labels = gen.integers(0, 7, 4)
    run("gather_rows", lambda: ad.tsum(ad.gather_rows(gr, labels)), [gr])

    att_x = _leaf(gen, 2, 5, 8, scale=0.5)
    att_params = [_leaf(gen, 8, 8, scale=0.3) if i % 2 == 0 else _leaf(gen, 8, scale=0.1) for i in range(8)]
    att_w = Tensor(gen.standard_normal((2, 5, 8)), dtype=np.float64)
    run(
        "mhsa",
        lambda: ad.tsum(nnops.mhsa(att_x, *att_params, heads=2) * att_w),
        [att_x] + att_params,
        tol=1e-5,
    )

    # composed non-spiking loss path: conv -> bn -> relu -> pool -> linear
    # -> softmax -> clamped cross-entropy
    loss_x = _leaf(gen, 2, 2, 4, 4, scale=0.5)
    loss_w = _leaf(gen, 3, 2, 3, 3, scale=0.4)
    loss_g = _leaf(gen, 3, offset=1.0, scale=0.1)
    loss_b = _leaf(gen, 3, scale=0.1)
    loss_lw = _leaf(gen, 7, 12, scale=0.4)
    loss_lb = _leaf(gen, 7, scale=0.1)
    loss_labels = gen.integers(0, 7, 2)

    def loss_path():
        h = nnops.conv2d(loss_x, loss_w)
        h = ad.relu(nnops.batch_norm(h, loss_g, loss_b, np.zeros(3), np.ones(3), training=True))
        h = nnops.avg_pool2d(h, 2)
        h = ad.reshape(h, (2, 12))
        probs = ad.softmax(nnops.linear(h, loss_lw, loss_lb), axis=-1)
        picked = ad.clamp_min(ad.gather_rows(probs, loss_labels), 1e-12)
        return ad.mean(ad.log(picked)) * (-1.0 / 7.0)

    run("loss_path", loss_path, [loss_x, loss_w, loss_g, loss_b, loss_lw, loss_lb])
    return checks
