"""Network layer primitives on top of the autodiff Tensor.

conv2d is the one heavy custom op (im2col + matmul forward, bincount
scatter for the input gradient); batch norm, pooling, softmax and
attention are composed from differentiable primitives so their gradients
come from the tape.

Layers are small classes that register their parameters into a ParamStore
under hierarchical names; the store is what the optimizer walks and what
checkpoints serialize.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import DataError

# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(x_shape, k, stride, pad):
    n, c, h, w = x_shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise DataError(f"conv kernel {k} with stride {stride} does not fit input {h}x{w}")
    return h_out, w_out


def _tap_views(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int):
    """The k*k shifted (N, C, h_out, w_out) views of the padded input."""
    views = {}
    for ki in range(k):
        for kj in range(k):
            views[ki, kj] = xp[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride]
    return views


def _conv1x1(x, weight, bias):
    """Pointwise conv = channel matmul; skips the im2col machinery."""
    n, c, h, w = x.shape
    k_out = weight.shape[0]
    wmat = weight.data.reshape(k_out, c)
    xmat = x.data.reshape(n, c, h * w)
    out = np.matmul(wmat, xmat).reshape(n, k_out, h, w)

    def backward(g):
        gmat = g.reshape(n, k_out, h * w)
        grad_w = np.einsum("nkp,ncp->kc", gmat, xmat).reshape(weight.shape)
        grad_x = np.matmul(wmat.T, gmat).reshape(x.shape)
        return grad_x, grad_w

    out_t = ad._make(out, (x, weight), backward)
    if bias is not None:
        out_t = out_t + ad.reshape(as_tensor(bias), (1, k_out, 1, 1))
    return out_t


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of (N,C,H,W) with (K,C,k,k); zero padding.

    Default padding k//2 preserves H,W at stride 1. Computed as one batched
    channel-matmul per kernel tap on strided views; taps accumulate in a
    fixed order, so results are deterministic.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    k_out, c_w, k, k2 = weight.shape
    if c_w != c or k != k2:
        raise DataError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise DataError(f"conv2d needs an odd kernel, got {k}")
    pad = k // 2 if padding is None else padding
    if k == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, weight, bias)
    h_out, w_out = _conv_geometry(x.shape, k, stride, pad)
    npix = h_out * w_out
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    taps = _tap_views(xp, k, stride, h_out, w_out)
    # tap-major column stack: rows [tap0: c0..c-1, tap1: ...]; fat batched GEMMs
    xstack5 = np.empty((n, k * k, c, h_out, w_out), dtype=x.dtype)
    for (ki, kj), view in taps.items():
        xstack5[:, ki * k + kj] = view
    xstack = xstack5.reshape(n, k * k * c, npix)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(k_out, k * k * c)
    out = np.matmul(wmat, xstack).reshape(n, k_out, h_out, w_out)
    same = stride == 1 and (h_out, w_out) == (h, w) and pad == k // 2

    def backward(g):
        gmat = g.reshape(n, k_out, npix)
        grad_wmat = np.matmul(gmat, xstack.transpose(0, 2, 1)).sum(axis=0)
        grad_w = np.ascontiguousarray(grad_wmat.reshape(k_out, k, k, c).transpose(0, 3, 1, 2))
        if same:
            # grad wrt input of a 'same' conv is the 'same' conv of g with the
            # spatially flipped, in/out-swapped kernel: stays a fat GEMM with
            # a contiguous output instead of a k^2-wide scatter
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            gstack5 = np.empty((n, k * k, k_out, h, w), dtype=g.dtype)
            for (ki, kj), view in _tap_views(gp, k, 1, h, w).items():
                gstack5[:, ki * k + kj] = view
            wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0)).reshape(c, k * k * k_out)
            grad_x = np.matmul(wflip, gstack5.reshape(n, k * k * k_out, h * w)).reshape(x.shape)
            return grad_x, grad_w
        grad_stack5 = np.matmul(wmat.T, gmat).reshape(n, k * k, c, h_out, w_out)
        gxp = np.zeros_like(xp)
        gx_taps = _tap_views(gxp, k, stride, h_out, w_out)
        for (ki, kj), view in gx_taps.items():
            view += grad_stack5[:, ki * k + kj]
        if pad:
            return np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad]), grad_w
        return gxp, grad_w

    out_t = ad._make(out, (x, weight), backward)
    if bias is not None:
        out_t = out_t + ad.reshape(as_tensor(bias), (1, k_out, 1, 1))
    return out_t


# ---------------------------------------------------------------------------
# pooling / normalization (compositional: gradients come from the tape)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DataError(f"avg_pool2d window {k} does not tile {h}x{w}")
    view = ad.reshape(x, (n, c, h // k, k, w // k, k))
    return ad.mean(view, axis=(3, 5))


def adaptive_avg_pool(x) -> Tensor:
    """Global average pooling to (N, C, 1, 1)."""
    return ad.mean(as_tensor(x), axis=(2, 3), keepdims=True)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel batch norm over (N, H, W) for 4-d input or (N,) for 2-d.

    Training mode normalizes with (differentiable) batch statistics and
    updates the running buffers in place; inference mode uses the buffers.
    """
    x = as_tensor(x)
    if x.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, shape = (0,), (1, -1)
    else:
        raise DataError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    gamma_r = ad.reshape(as_tensor(gamma), shape)
    beta_r = ad.reshape(as_tensor(beta), shape)
    if training:
        mu = ad.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1).astype(running_var.dtype)
        xhat = centered / ad.sqrt(var + eps)
    else:
        rm = as_tensor(running_mean.astype(x.dtype).reshape(shape))
        rv = as_tensor(running_var.astype(x.dtype).reshape(shape))
        xhat = (x - rm) / ad.sqrt(rv + eps)
    return gamma_r * xhat + beta_r


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias for (..., in) input and (out, in) weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DataError(f"linear weight {weight.shape} incompatible with input {x.shape}")
    out = ad.matmul(x, ad.transpose(weight, (1, 0)))
    if bias is not None:
        out = out + as_tensor(bias)
    return out


def mhsa(x, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> Tensor:
    """Scaled dot-product multi-head self-attention over (N, T, D) tokens.

    No positional encoding: permuting tokens permutes outputs identically.
    """
    x = as_tensor(x)
    n, t, d = x.shape
    if d % heads:
        raise DataError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(proj):
        return ad.transpose(ad.reshape(proj, (n, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(att, v)  # (n, heads, t, dh)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    return linear(merged, wo, bo)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter/buffer registry; iteration order is insertion order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise DataError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise DataError(f"duplicate buffer name {name!r}")
        arr = np.asarray(data)
        self.buffers[name] = arr
        return arr

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint stores, parameters then buffers."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = list(self.params) + list(self.buffers)
        for name in expected:
            if name not in arrays:
                raise DataError(f"checkpoint is missing tensor {name!r}")
        for name, value in arrays.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                raise DataError(f"checkpoint has unexpected tensor {name!r}")
            if tuple(target.shape) != tuple(value.shape):
                raise DataError(f"tensor {name!r}: checkpoint shape {value.shape} != model shape {target.shape}")
            target[...] = value.astype(target.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def kaiming_uniform(gen: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int, gen, stride: int = 1, padding: int | None = None, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        fan_in = c_in * k * k
        self.weight = store.add_param(f"{name}.w", kaiming_uniform(gen, (c_out, c_in, k, k), fan_in, dtype))
        self.bias = store.add_param(f"{name}.b", np.zeros(c_out, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, gen, dtype=np.float32):
        self.weight = store.add_param(f"{name}.w", kaiming_uniform(gen, (d_out, d_in), d_in, dtype))
        self.bias = store.add_param(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, dtype=np.float32):
        self.gamma = store.add_param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = store.add_param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class Mhsa:
    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, gen, dtype=np.float32):
        if dim % heads:
            raise DataError(f"mhsa dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.proj = {}
        for proj_name in ("q", "k", "v", "o"):
            w = store.add_param(f"{name}.{proj_name}.w", kaiming_uniform(gen, (dim, dim), dim, dtype))
            b = store.add_param(f"{name}.{proj_name}.b", np.zeros(dim, dtype=dtype))
            self.proj[proj_name] = (w, b)

    def __call__(self, x) -> Tensor:
        (wq, bq), (wk, bk), (wv, bv), (wo, bo) = (self.proj[p] for p in ("q", "k", "v", "o"))
        return mhsa(x, wq, bq, wk, bk, wv, bv, wo, bo, self.heads)
