"""Neural-network ops on :class:`~mstwins.tensor.Tensor`, each with its own backward rule.

Image tensors are NCHW unless a function says otherwise.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, make, matmul, add, unbroadcast

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), bw, "log_softmax")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return make(xd * cdf, (x,), bw, "gelu")


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise along ``axis`` then apply a per-channel scale and shift."""
    axis = axis % x.ndim
    n = x.shape[axis]
    bshape = [1] * x.ndim
    bshape[axis] = n
    w = weight.data.reshape(bshape)
    b = bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * w + b
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=other).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=other).reshape(bias.shape)
        return gx, gw, gb

    return make(out, (x, weight, bias), bw, "layernorm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``groups`` must be 1 or equal to the channel count (depthwise).
    """
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if groups != 1:
        if not (groups == Cin == Cout and Cg == 1):
            raise ValueError("only groups=1 or depthwise (groups == channels) convolution is supported")
    elif Cg != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels, weight expects {Cg}")
    Ho = conv_out_size(H, kh, stride, padding)
    Wo = conv_out_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if groups != 1:
        y = _depthwise(x, weight, stride, padding, Ho, Wo)
    elif kh == kw == stride and padding == 0 and H % kh == 0 and W % kw == 0:
        y = _patch_conv(x, weight)
    else:
        y = _im2col_conv(x, weight, stride, padding, Ho, Wo)
    if bias is not None:
        y = add(y, bias.reshape(1, Cout, 1, 1))
    return y


def _patch_conv(x: Tensor, weight: Tensor) -> Tensor:
    """Non-overlapping conv (kernel == stride): a reshape plus one matmul."""
    B, Cin, H, W = x.shape
    Cout, _, k, _ = weight.shape
    Ho, Wo = H // k, W // k
    xd, wd = x.data, weight.data
    cols = xd.reshape(B, Cin, Ho, k, Wo, k).transpose(0, 2, 4, 1, 3, 5).reshape(B * Ho * Wo, Cin * k * k)
    wm = wd.reshape(Cout, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gx = gw = None
        if x.requires_grad:
            gx = (g2 @ wm).reshape(B, Ho, Wo, Cin, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(B, Cin, H, W)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(wd.shape)
        return gx, gw

    return make(np.ascontiguousarray(out), (x, weight), bw, "conv2d")


def _im2col_conv(x: Tensor, weight: Tensor, stride: int, padding: int, Ho: int, Wo: int) -> Tensor:
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    wm = weight.data.reshape(Cout, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(B, Ho, Wo, Cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        return gx, gw

    return make(np.ascontiguousarray(out), (x, weight), bw, "conv2d")


def _depthwise(x: Tensor, weight: Tensor, stride: int, padding: int, Ho: int, Wo: int) -> Tensor:
    B, C, H, W = x.shape
    _, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data[:, 0]
    out = np.zeros((B, C, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] * wd[:, i, j][None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                if gxp is not None:
                    gxp[sl] += g * wd[:, i, j][None, :, None, None]
                gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if gxp is not None else None
        return gx, gw

    return make(out, (x, weight), bw, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k average pool (stride k)."""
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"avgpool2d: extent {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return make(out, (x,), bw, "avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size-1 dims."""
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make(out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape),), "global_avgpool")


def interpolate_nearest(x: Tensor, scale: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if scale == 1:
        return x
    out = np.repeat(np.repeat(x.data, scale, axis=-2), scale, axis=-1)
    shp = x.shape

    def bw(g):
        lead = g.shape[:-2]
        return (g.reshape(*lead, shp[-2], scale, shp[-1], scale).sum(axis=(-3, -1)),)

    return make(out, (x,), bw, "interpolate_nearest")


def _bilinear_matrix(n_in: int, scale: int) -> np.ndarray:
    """(n_in*scale, n_in) interpolation matrix, half-pixel centres, edge-clamped."""
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def interpolate_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear upsampling of the last two axes (half-pixel aligned corners off)."""
    if scale == 1:
        return x
    mh = _bilinear_matrix(x.shape[-2], scale)
    mw = _bilinear_matrix(x.shape[-1], scale)
    out = mh @ x.data @ mw.T

    def bw(g):
        return (mh.T @ g @ mw,)

    return make(out, (x,), bw, "interpolate_bilinear")


def one_hot(labels: np.ndarray, num_classes: int, axis: int = 1) -> np.ndarray:
    """Integer label map -> float one-hot array with the class axis inserted at ``axis``."""
    oh = np.eye(num_classes)[labels]
    return np.moveaxis(oh, -1, axis)


__all__ = [
    "softmax", "log_softmax", "gelu", "layernorm", "linear", "conv2d", "conv_out_size",
    "avgpool2d", "global_avgpool", "interpolate_nearest", "interpolate_bilinear", "one_hot",
    "unbroadcast",
]
