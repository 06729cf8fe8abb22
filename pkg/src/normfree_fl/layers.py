"""Forward and backward kernels for the CNN layer vocabulary.

All kernels work on NCHW float64 arrays and are pure: batch-norm returns its
updated running statistics in the cache instead of mutating parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatch,
    InvalidGroupCount,
    InvalidRate,
    LabelOutOfRange,
    NonIntegralOutputSize,
    ShapeMismatch,
)
from .tensor_core import DTYPE, RngStream, check_finite, matmul

WS_EPS = 1e-4
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    gain: Optional[np.ndarray] = None
    ws_eps: float = WS_EPS

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeMismatch(f"conv weight must be 4-d, got {self.weight.shape}")
        out_ch = self.weight.shape[0]
        if self.fan_in <= 0:
            raise ShapeMismatch("conv fan-in must be positive")
        if self.bias.shape != (out_ch,):
            raise ShapeMismatch(f"bias shape {self.bias.shape} != ({out_ch},)")
        if self.gain is not None and self.gain.shape != (out_ch,):
            raise ShapeMismatch(f"gain shape {self.gain.shape} != ({out_ch},)")
        if self.stride < 1 or self.padding < 0:
            raise ShapeMismatch("stride must be >= 1 and padding >= 0")

    @property
    def fan_in(self) -> int:
        _, c, kh, kw = self.weight.shape
        return c * kh * kw


@dataclass
class NormParams:
    kind: str  # "batch" or "group"
    gamma: np.ndarray
    beta: np.ndarray
    groups: int = 1
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    eps: float = NORM_EPS
    momentum: float = BN_MOMENTUM


@dataclass
class NormCache:
    kind: str
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    groups: int = 1
    batch_stats: bool = True
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None


# -- convolution -------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise NonIntegralOutputSize(
            f"(size {n} + 2*{padding} - kernel {k}) is not a non-negative multiple of stride {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Patch matrix of shape (C*kh*kw, B*Ho*Wo), rows ordered (c, i, j)."""
    b, c, h, w = x.shape
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(w, kw, stride, padding)
    xp = x.transpose(1, 0, 2, 3)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, b * ho * wo), ho, wo


def _col2im(gcols: np.ndarray, x_shape, kh, kw, stride, padding, ho, wo):
    b, c, h, w = x_shape
    g = gcols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g[:, i, j]
    out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv_forward_cols(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int):
    """Cross-correlation plus bias; also returns the patch matrix for backward."""
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with weight {weight.shape}")
    out_ch, _, kh, kw = weight.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    y = weight.reshape(out_ch, -1) @ cols
    y += bias[:, None]
    y = y.reshape(out_ch, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), cols


def conv_backward_cols(x_shape, cols, weight, stride, padding, grad_out, need_input_grad=True):
    out_ch, _, kh, kw = weight.shape
    _, _, ho, wo = grad_out.shape
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(out_ch, -1)
    grad_w = (g2 @ cols.T).reshape(weight.shape)
    grad_b = g2.sum(axis=1)
    if not need_input_grad:
        return None, grad_w, grad_b
    if stride == 1 and kh == kw and padding <= kh - 1:
        # full correlation of the output gradient with the flipped, transposed kernel
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x, _ = conv_forward_cols(grad_out, flipped, np.zeros(flipped.shape[0]), 1, kh - 1 - padding)
        return grad_x, grad_w, grad_b
    gcols = weight.reshape(out_ch, -1).T @ g2
    grad_x = _col2im(gcols, x_shape, kh, kw, stride, padding, ho, wo)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    y, _ = conv_forward_cols(x, p.weight, p.bias, p.stride, p.padding)
    return check_finite(y, "conv2d output")


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    out_ch, _, kh, kw = p.weight.shape
    cols, _, _ = _im2col(x, kh, kw, p.stride, p.padding)
    return conv_backward_cols(x.shape, cols, p.weight, p.stride, p.padding, grad_out)


# -- scaled weight standardization -------------------------------------------


def _ws_stats(weight: np.ndarray, ws_eps: float):
    rows = weight.reshape(weight.shape[0], -1)
    n = rows.shape[1]
    centered = rows - rows.mean(axis=1, keepdims=True)
    var = np.mean(centered**2, axis=1)
    s = np.maximum(var * n, ws_eps)
    return centered, var, s, n


def ws_standardize(p: ConvParams) -> np.ndarray:
    """Per output channel: ``gain * (W - mean) / sqrt(max(var * fan_in, ws_eps))``.

    ``var`` is the population variance over the fan-in entries of the row.
    """
    if p.gain is None:
        raise ShapeMismatch("ws_standardize needs a gain vector")
    centered, _, s, _ = _ws_stats(p.weight, p.ws_eps)
    what = centered * (p.gain / np.sqrt(s))[:, None]
    return what.reshape(p.weight.shape)


def ws_standardize_backward(p: ConvParams, grad_what: np.ndarray):
    """Pull a gradient w.r.t. the standardized kernel back to (raw weight, gain)."""
    centered, var, s, n = _ws_stats(p.weight, p.ws_eps)
    g = grad_what.reshape(centered.shape)
    scale = 1.0 / np.sqrt(s)
    grad_gain = np.sum(g * centered, axis=1) * scale
    direct = g * (p.gain * scale)[:, None]
    grad_scale = np.sum(g * centered, axis=1) * p.gain
    # d scale / d var is zero on the clamped branch
    active = var * n > p.ws_eps
    grad_var = np.where(active, grad_scale * (-0.5) * s**-1.5 * n, 0.0)
    grad_w = direct - direct.mean(axis=1, keepdims=True) + grad_var[:, None] * (2.0 / n) * centered
    return grad_w.reshape(p.weight.shape), grad_gain


def wsconv_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    y, _ = conv_forward_cols(x, ws_standardize(p), p.bias, p.stride, p.padding)
    return check_finite(y, "wsconv output")


def wsconv_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_gain, grad_bias)`` w.r.t. the raw parameters."""
    what = ws_standardize(p)
    kh, kw = what.shape[2:]
    cols, _, _ = _im2col(x, kh, kw, p.stride, p.padding)
    grad_x, grad_what, grad_b = conv_backward_cols(x.shape, cols, what, p.stride, p.padding, grad_out)
    grad_w, grad_gain = ws_standardize_backward(p, grad_what)
    return grad_x, grad_w, grad_gain, grad_b


# -- normalization -----------------------------------------------------------


def batchnorm_forward(x: np.ndarray, p: NormParams, mode: str = "train"):
    """Batch norm over (B, H, W) per channel.

    ``mode`` is ``"train"`` (batch statistics, running stats updated) or
    ``"eval"`` (running statistics, no update). The cache carries the new
    running statistics.
    """
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm input {x.shape} vs {p.gamma.shape[0]} channels")
    b, c, h, w = x.shape
    if mode == "train":
        if b * h * w < 2:
            raise DegenerateBatch(
                f"batch norm in train mode needs at least 2 values per channel, got B*H*W={b * h * w}"
            )
        mu = x.mean(axis=(0, 2, 3))
        var = np.mean((x - mu[None, :, None, None]) ** 2, axis=(0, 2, 3))
        new_mean = (1.0 - p.momentum) * p.running_mean + p.momentum * mu
        new_var = (1.0 - p.momentum) * p.running_var + p.momentum * var
        batch_stats = True
    elif mode == "eval":
        mu, var = p.running_mean, p.running_var
        new_mean, new_var = p.running_mean, p.running_var
        batch_stats = False
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    cache = NormCache("batch", xhat, inv_std, p.gamma, batch_stats=batch_stats,
                      running_mean=new_mean, running_var=new_var)
    return check_finite(y, "batchnorm output"), cache


def groupnorm_forward(x: np.ndarray, p: NormParams):
    """Group norm with per-sample statistics; identical in train and eval."""
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeMismatch(f"groupnorm input {x.shape} vs {p.gamma.shape[0]} channels")
    b, c, h, w = x.shape
    g = p.groups
    if g < 1 or c % g:
        raise InvalidGroupCount(f"{g} groups do not divide {c} channels")
    xg = x.reshape(b, g, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = np.mean((xg - mu) ** 2, axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    y = xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    cache = NormCache("group", xhat, inv_std[:, :, 0], p.gamma, groups=g)
    return check_finite(y, "groupnorm output"), cache


def norm_backward(kind: str, cache: NormCache, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_gamma, grad_beta)``, including the path through the statistics."""
    if kind != cache.kind:
        raise ValueError(f"cache is for {cache.kind!r} norm, not {kind!r}")
    xhat = cache.xhat
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = np.sum(grad_out * xhat, axis=(0, 2, 3))
    gxhat = grad_out * cache.gamma[None, :, None, None]
    if kind == "batch":
        inv = cache.inv_std[None, :, None, None]
        if not cache.batch_stats:
            return gxhat * inv, grad_gamma, grad_beta
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = np.sum(gxhat * xhat, axis=(0, 2, 3), keepdims=True)
        grad_x = inv * (gxhat - s1 / m - xhat * s2 / m)
        return grad_x, grad_gamma, grad_beta
    b = xhat.shape[0]
    g = cache.groups
    gg = gxhat.reshape(b, g, -1)
    xg = xhat.reshape(b, g, -1)
    m = gg.shape[2]
    s1 = gg.sum(axis=2, keepdims=True)
    s2 = np.sum(gg * xg, axis=2, keepdims=True)
    grad_x = cache.inv_std[:, :, None] * (gg - s1 / m - xg * s2 / m)
    return grad_x.reshape(xhat.shape), grad_gamma, grad_beta


# -- pooling, activation, dropout --------------------------------------------


def maxpool2d_forward(x: np.ndarray, k: int = 2, s: int = 2):
    """Max pooling; cache holds flat argmax indices (first maximum in row-major order wins)."""
    b, c, h, w = x.shape
    ho = _out_size(h, k, s, 0)
    wo = _out_size(w, k, s, 0)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s].reshape(b, c, ho, wo, k * k)
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[None, None, :, None] * s + di
    cols = np.arange(wo)[None, None, None, :] * s + dj
    plane = (np.arange(b * c).reshape(b, c, 1, 1)) * (h * w)
    flat = plane + rows * w + cols
    return np.ascontiguousarray(y), (x.shape, flat)


def maxpool2d_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    shape, flat = cache
    n = int(np.prod(shape))
    grad = np.bincount(flat.ravel(), weights=grad_out.ravel(), minlength=n)
    return grad.reshape(shape)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def pool_act_forward(kind: str, x: np.ndarray, k: int = 2, s: int = 2):
    if kind == "relu":
        return relu_forward(x), x
    if kind == "maxpool2d":
        return maxpool2d_forward(x, k, s)
    raise ValueError(f"unknown kind {kind!r}")


def pool_act_backward(kind: str, cache, grad_out: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu_backward(cache, grad_out)
    if kind == "maxpool2d":
        return maxpool2d_backward(cache, grad_out)
    raise ValueError(f"unknown kind {kind!r}")


def dropout(x: np.ndarray, rate: float, stream: Optional[RngStream], mode: str = "train"):
    """Inverted dropout. Returns ``(y, mask)`` where ``mask`` already includes the 1/keep scale."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    keep = 1.0 - rate
    mask = (stream.uniform(x.shape) < keep).astype(DTYPE) / keep
    return x * mask, mask


# -- fully connected and loss ------------------------------------------------


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    return matmul(x, weight.T) + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} vs batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -float(np.mean(logp[np.arange(b), labels]))
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


def xavier_normal(shape, fan_in: int, fan_out: int, stream: RngStream) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return stream.normal(shape) * std
