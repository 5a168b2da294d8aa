"""Forward and backward passes of the network primitives.

Every function accepts a single feature map (h, w, c) or a batch
(batch, h, w, c); results keep the rank of the input.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import zero_pad

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvParams:
    """Kernel (n, n, in_channels, out_channels) and one bias per out-channel."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k = self.kernel
        if k.ndim != 4 or k.shape[0] != k.shape[1]:
            raise ValueError(f"kernel must be (n, n, in, out), got {k.shape}")
        if self.bias.shape != (k.shape[3],):
            raise ValueError("bias length must equal out_channels")

    @property
    def kernel_size(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[2]

    @property
    def out_channels(self):
        return self.kernel.shape[3]


@dataclass
class BatchNormParams:
    """Scale/offset plus inference statistics.

    Running statistics hold NaN until the first train-mode batch.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.full(channels, np.nan, dtype),
            running_var=np.full(channels, np.nan, dtype),
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    @property
    def initialized(self):
        return not (np.isnan(self.running_mean).any() or np.isnan(self.running_var).any())


def _batched(x):
    return (x, True) if x.ndim == 4 else (x[None], False)


def _unbatch(y, batched):
    return y if batched else y[0]


def _channel_sum(t):
    t2d = np.ascontiguousarray(t).reshape(-1, t.shape[-1])
    return kernels.pick(t2d).channel_stats(t2d)[0]


# -- convolution ------------------------------------------------------------

def _conv_same(xb, kernel, bias, workers, backend):
    """Stride-1 'same' convolution of a batch; returns (batch, h, w, out)."""
    n = kernel.shape[0]
    pad = (n - 1) // 2
    xp = zero_pad(xb, pad, pad)
    mod = kernels.pick(xp, kernel, backend=backend)
    cout = kernel.shape[3]
    w = kernels.pad_channels(kernel, mod.CHANNEL_MULTIPLE)
    b = kernels.pad_channels(bias, mod.CHANNEL_MULTIPLE)
    out = np.empty(xb.shape[:3] + (cout,), dtype=np.result_type(xp, kernel))

    def one(i):
        y = mod.conv_forward(xp[i], w, b)
        out[i] = y[..., :cout] if y.shape[-1] != cout else y

    kernels.run_per_example(one, xb.shape[0], workers)
    return out


def conv2d_forward(x, p, workers=1, backend=None):
    """Same-size convolution, stride 1, zero padding (n-1)/2."""
    if p.kernel_size % 2 == 0:
        raise ValueError("same-size convolution needs an odd kernel")
    xb, batched = _batched(x)
    if xb.shape[-1] != p.in_channels:
        raise ValueError(
            f"input has {xb.shape[-1]} channels, kernel expects {p.in_channels}")
    return _unbatch(_conv_same(xb, p.kernel, p.bias, workers, backend), batched)


def conv2d_backward(x, p, grad_out, need_input_grad=True, workers=1, backend=None):
    """Gradients (grad_x, grad_kernel, grad_bias) of :func:`conv2d_forward`.

    ``grad_x`` is None when ``need_input_grad`` is false (first layer).
    """
    xb, batched = _batched(x)
    gb, _ = _batched(grad_out)
    n = p.kernel_size
    if gb.shape[:3] != xb.shape[:3] or gb.shape[3] != p.out_channels:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match the conv output")
    if xb.shape[-1] != p.in_channels:
        raise ValueError("input channels do not match the kernel")
    pad = (n - 1) // 2
    cout = p.out_channels

    grad_bias = _channel_sum(gb).astype(p.bias.dtype)

    xp = zero_pad(xb, pad, pad)
    mod = kernels.pick(xp, gb, backend=backend)
    g_w = kernels.pad_channels(gb, mod.CHANNEL_MULTIPLE)
    cpad = g_w.shape[-1]
    dtype = np.result_type(xp, gb)

    def one_w(i):
        dw = np.zeros((n, n, p.in_channels, cpad), dtype=dtype)
        mod.conv_wgrad(xp[i], np.ascontiguousarray(g_w[i]), dw)
        return dw

    parts = kernels.run_per_example(one_w, xb.shape[0], workers)
    # fixed example order keeps the sum independent of the worker count
    grad_kernel = parts[0]
    for part in parts[1:]:
        grad_kernel += part
    grad_kernel = np.ascontiguousarray(grad_kernel[..., :cout]).astype(p.kernel.dtype, copy=False)

    grad_x = None
    if need_input_grad:
        flipped = np.ascontiguousarray(p.kernel[::-1, ::-1].transpose(0, 1, 3, 2))
        zero_bias = np.zeros(p.in_channels, dtype=p.kernel.dtype)
        grad_x = _unbatch(_conv_same(np.ascontiguousarray(gb), flipped, zero_bias, workers,
                                     backend), batched)
    return grad_x, grad_kernel, grad_bias


# -- batch normalization --------------------------------------------------------

@dataclass
class BatchNormCache:
    x2d: np.ndarray
    y2d: np.ndarray
    mean: np.ndarray
    invstd: np.ndarray
    relu: bool
    shape: tuple


def batchnorm_forward(x, p, mode="train", relu=False, backend=None):
    """Batch normalization over (batch, h, w) per channel; optionally fused ReLU.

    Returns ``(y, cache)``; the cache is None in infer mode.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    c = x.shape[-1]
    if c != p.channels:
        raise ValueError(f"input has {c} channels, batch norm has {p.channels}")
    x2d = np.ascontiguousarray(x).reshape(-1, c)
    mod = kernels.pick(x2d, backend=backend)
    dtype = x2d.dtype
    if mode == "train":
        s, q = mod.channel_stats(x2d)
        m = x2d.shape[0]
        mean = s / m
        var = np.maximum(q / m - mean * mean, 0.0)
        _update_running(p, mean, var)
    else:
        if not p.initialized:
            raise RuntimeError("uninitialized statistics: batch norm has not seen a training batch")
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    invstd = 1.0 / np.sqrt(var + p.eps)
    scale = (p.gamma * invstd).astype(dtype)
    shift = (p.beta - mean * p.gamma * invstd).astype(dtype)
    y2d = mod.scale_shift(x2d, scale, shift, relu)
    y = y2d.reshape(x.shape)
    if mode == "infer":
        return y, None
    return y, BatchNormCache(x2d, y2d, mean.astype(dtype), invstd.astype(dtype), relu, x.shape)


def _update_running(p, mean, var):
    if not p.initialized:
        p.running_mean[...] = mean
        p.running_var[...] = var
        return
    mom = p.momentum
    p.running_mean[...] = mom * p.running_mean + (1.0 - mom) * mean
    p.running_var[...] = mom * p.running_var + (1.0 - mom) * var


def batchnorm_backward(cache, p, grad_out, backend=None):
    """Exact gradients of the train-mode map: (grad_x, grad_gamma, grad_beta)."""
    if grad_out.shape != cache.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != forward shape {cache.shape}")
    c = cache.x2d.shape[1]
    g2d = np.ascontiguousarray(grad_out, dtype=cache.x2d.dtype).reshape(-1, c)
    mod = kernels.pick(cache.x2d, g2d, backend=backend)
    dbeta, dgamma = mod.bn_backward_reduce(cache.x2d, cache.y2d, g2d, cache.mean,
                                           cache.invstd, cache.relu)
    m = cache.x2d.shape[0]
    dtype = cache.x2d.dtype
    coef = (p.gamma * cache.invstd).astype(dtype)
    dx = mod.bn_backward_apply(cache.x2d, cache.y2d, g2d, cache.mean, cache.invstd, coef,
                               (dbeta / m).astype(dtype), (dgamma / m).astype(dtype),
                               cache.relu)
    return dx.reshape(cache.shape), dgamma.astype(p.gamma.dtype), dbeta.astype(p.beta.dtype)


# -- activations ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Passes the gradient where x > 0; the derivative at 0 is taken as 0."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def softmax_lastdim(x):
    if x.shape[-1] < 2:
        raise ValueError("softmax needs at least two classes")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- pooling -----------------------------------------------------------------

def maxpool2(x, backend=None):
    """2x2 max-pool, stride 2.

    Returns ``(pooled, indices)``. ``indices`` holds, per pooled value, the
    window position 0..3 in row-major order; see :func:`pool_positions`.
    Ties go to the first position.
    """
    xb, batched = _batched(x)
    b, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even height and width, got {h}x{w}")
    mod = kernels.pick(xb, backend=backend)
    out, idx = mod.maxpool2_forward(np.ascontiguousarray(xb).reshape(b * h, w, c))
    out = out.reshape(b, h // 2, w // 2, c)
    idx = idx.reshape(b, h // 2, w // 2, c)
    return _unbatch(out, batched), _unbatch(idx, batched)


def maxpool2_backward(grad_out, indices, backend=None):
    gb, batched = _batched(grad_out)
    ib, _ = _batched(indices)
    if ib.shape != gb.shape:
        raise ValueError("indices do not match grad_out")
    b, oh, ow, c = gb.shape
    mod = kernels.pick(gb, backend=backend)
    dx = mod.maxpool2_backward(np.ascontiguousarray(gb).reshape(b * oh, ow, c),
                               np.ascontiguousarray(ib).reshape(b * oh, ow, c))
    return _unbatch(dx.reshape(b, 2 * oh, 2 * ow, c), batched)


def pool_positions(indices):
    """Absolute (row, col) of each pooled maximum in the unpooled map."""
    oh, ow = indices.shape[-3], indices.shape[-2]
    rows = 2 * np.arange(oh)[:, None, None] + (indices >> 1)
    cols = 2 * np.arange(ow)[None, :, None] + (indices & 1)
    return rows, cols


# -- transpose convolution ---------------------------------------------------------

def tconv2_forward(x, p):
    """Transpose convolution with a 2x2 kernel and stride 2 (no overlap)."""
    if p.kernel_size != 2:
        raise ValueError("transpose convolution here uses 2x2 kernels")
    xb, batched = _batched(x)
    b, h, w, cin = xb.shape
    if cin != p.in_channels:
        raise ValueError(f"input has {cin} channels, kernel expects {p.in_channels}")
    cout = p.out_channels
    kmat = p.kernel.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    y = xb.reshape(-1, cin) @ kmat
    y = y.reshape(b, h, w, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, cout)
    y += p.bias
    return _unbatch(y, batched)


def tconv2_backward(x, p, grad_out):
    xb, batched = _batched(x)
    gb, _ = _batched(grad_out)
    b, h, w, cin = xb.shape
    cout = p.out_channels
    if gb.shape != (b, 2 * h, 2 * w, cout):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match the output")
    blocks = gb.reshape(b, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    kmat = p.kernel.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    grad_x = (blocks @ kmat.T).reshape(b, h, w, cin)
    grad_kernel = (xb.reshape(-1, cin).T @ blocks).reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
    grad_bias = _channel_sum(gb).astype(p.bias.dtype)
    return _unbatch(grad_x, batched), np.ascontiguousarray(grad_kernel), grad_bias
