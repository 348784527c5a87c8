"""Twins-style transformer building blocks.

Public modules take and return NCHW tensors.  Inside a stage the blocks run
on channel-last ``(B, H, W, C)`` grids so that every projection is a plain
matmul over the last axis; the ``*_tokens`` methods expose that layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor, getitem, matmul, pad, swapaxes

# additive score for padded keys; exp() of it underflows to exactly 0
_MASKED = -1e9


@dataclass(frozen=True)
class StageConfig:
    in_channels: int
    out_channels: int
    patch_stride: int
    depth: int
    window: int
    sr_ratio: int
    mlp_ratio: float
    num_heads: int
    use_cpe: bool = True


def _round_up(n: int, m: int) -> int:
    return -(-n // m) * m


def to_channels_last(x: Tensor) -> Tensor:
    return x.permute(0, 2, 3, 1)


def to_channels_first(x: Tensor) -> Tensor:
    return x.permute(0, 3, 1, 2)


def attend(q: Tensor, k: Tensor, v: Tensor, scale: float, bias=None):
    """Scaled dot-product attention; returns ``(output, attention_weights)``."""
    scores = matmul(q, swapaxes(k, -1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    weights = F.softmax(scores, axis=-1)
    return matmul(weights, v), weights


class PatchEmbed(Module):
    """Strided conv (kernel = stride) followed by a channel layernorm."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.proj = Conv2d(in_ch, out_ch, stride, rng, stride=stride)
        self.norm = LayerNorm(out_ch, axis=1)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        s = self.stride
        if H < s or W < s:
            raise ValueError(f"patch_embed: extent {H}x{W} smaller than stride {s}")
        x = pad(x, ((0, 0), (0, 0), (0, _round_up(H, s) - H), (0, _round_up(W, s) - W)))
        return self.norm(self.proj(x))


class LocalGroupAttention(Module):
    """LSA: multi-head attention inside non-overlapping window×window groups."""

    def __init__(self, dim: int, num_heads: int, window: int, rng: np.random.Generator, std: float = 0.02):
        if window <= 0:
            raise ValueError("window must be positive")
        if dim % num_heads:
            raise ValueError(f"num_heads {num_heads} must divide dim {dim}")
        self.qkv = Linear(dim, 3 * dim, rng, std=std)
        self.proj = Linear(dim, dim, rng, std=std)
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.keep_attn = False
        self.last_attn = None

    def forward(self, x: Tensor) -> Tensor:
        return to_channels_first(self.forward_tokens(to_channels_last(x)))

    def forward_tokens(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        ws, h = self.window, self.num_heads
        Hp, Wp = _round_up(H, ws), _round_up(W, ws)
        padded = (Hp, Wp) != (H, W)
        x = pad(x, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
        gh, gw = Hp // ws, Wp // ws
        groups = B * gh * gw
        n = ws * ws
        x = x.reshape(B, gh, ws, gw, ws, C).permute(0, 1, 3, 2, 4, 5).reshape(groups, n, C)
        qkv = self.qkv(x).reshape(groups, n, 3, h, C // h).permute(2, 0, 3, 1, 4)
        bias = None
        if padded:
            valid = np.zeros((Hp, Wp), dtype=bool)
            valid[:H, :W] = True
            valid = valid.reshape(gh, ws, gw, ws).transpose(0, 2, 1, 3).reshape(gh * gw, 1, 1, n)
            bias = np.tile(np.where(valid, 0.0, _MASKED), (B, 1, 1, 1))
        out, weights = attend(qkv[0], qkv[1], qkv[2], self.scale, bias)
        if self.keep_attn:
            self.last_attn = weights.data.reshape(B, gh * gw, h, n, n)
        out = self.proj(out.permute(0, 2, 1, 3).reshape(groups, n, C))
        out = out.reshape(B, gh, gw, ws, ws, C).permute(0, 1, 3, 2, 4, 5).reshape(B, Hp, Wp, C)
        if padded:
            out = getitem(out, (slice(None), slice(0, H), slice(0, W)))
        return out


class GlobalSubsampledAttention(Module):
    """GSA: queries at every position, keys/values from an sr×sr sub-sampled map."""

    def __init__(self, dim: int, num_heads: int, sr_ratio: int, rng: np.random.Generator, std: float = 0.02):
        if sr_ratio <= 0:
            raise ValueError("sr_ratio must be positive")
        if dim % num_heads:
            raise ValueError(f"num_heads {num_heads} must divide dim {dim}")
        self.q = Linear(dim, dim, rng, std=std)
        self.kv = Linear(dim, 2 * dim, rng, std=std)
        self.proj = Linear(dim, dim, rng, std=std)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, sr_ratio, rng, stride=sr_ratio)
            self.norm = LayerNorm(dim)
        self.dim = dim
        self.num_heads = num_heads
        self.sr_ratio = sr_ratio
        self.scale = (dim // num_heads) ** -0.5
        self.keep_attn = False
        self.last_attn = None

    def forward(self, x: Tensor) -> Tensor:
        return to_channels_first(self.forward_tokens(to_channels_last(x)))

    def forward_tokens(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        h, r = self.num_heads, self.sr_ratio
        q = self.q(x).reshape(B, H * W, h, C // h).permute(0, 2, 1, 3)
        if r > 1:
            xs = pad(x, ((0, 0), (0, _round_up(H, r) - H), (0, _round_up(W, r) - W), (0, 0)))
            xs = to_channels_last(self.sr(to_channels_first(xs)))
            xs = self.norm(xs.reshape(B, -1, C))
        else:
            xs = x.reshape(B, H * W, C)
        m = xs.shape[1]
        kv = self.kv(xs).reshape(B, m, 2, h, C // h).permute(2, 0, 3, 1, 4)
        out, weights = attend(q, kv[0], kv[1], self.scale)
        if self.keep_attn:
            self.last_attn = weights.data
        return self.proj(out.permute(0, 2, 1, 3).reshape(B, H, W, C))


class Mlp(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator, std: float = 0.02):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(dim, hidden, rng, std=std)
        self.fc2 = Linear(hidden, dim, rng, std=std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class _DepthUnit(Module):
    """One LSA block followed by one GSA block, each with its own MLP."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator, std: float):
        c = cfg.out_channels
        self.norm1 = LayerNorm(c)
        self.lsa = LocalGroupAttention(c, cfg.num_heads, cfg.window, rng, std)
        self.norm2 = LayerNorm(c)
        self.mlp1 = Mlp(c, cfg.mlp_ratio, rng, std)
        self.norm3 = LayerNorm(c)
        self.gsa = GlobalSubsampledAttention(c, cfg.num_heads, cfg.sr_ratio, rng, std)
        self.norm4 = LayerNorm(c)
        self.mlp2 = Mlp(c, cfg.mlp_ratio, rng, std)


class TransformerBlock(Module):
    """Stage body: ``depth`` LSA/GSA units, with a depthwise-conv positional
    encoding residual after the first LSA block."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator, std: float = 0.02):
        c = cfg.out_channels
        self.units = [_DepthUnit(cfg, rng, std) for _ in range(cfg.depth)]
        self.cpe = Conv2d(c, c, 3, rng, padding=1, groups=c) if cfg.use_cpe else None
        self.cfg = cfg

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.out_channels:
            raise ValueError(f"block expects {self.cfg.out_channels} channels, got {x.shape[1]}")
        return to_channels_first(self.forward_tokens(to_channels_last(x)))

    def forward_tokens(self, t: Tensor) -> Tensor:
        for i, u in enumerate(self.units):
            t = t + u.lsa.forward_tokens(u.norm1(t))
            t = t + u.mlp1(u.norm2(t))
            if i == 0 and self.cpe is not None:
                t = t + to_channels_last(self.cpe(to_channels_first(t)))
            t = t + u.gsa.forward_tokens(u.norm3(t))
            t = t + u.mlp2(u.norm4(t))
        return t


class EncoderStage(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator, std: float = 0.02):
        self.embed = PatchEmbed(cfg.in_channels, cfg.out_channels, cfg.patch_stride, rng)
        self.block = TransformerBlock(cfg, rng, std)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(self.embed(x))


def lsa(x: Tensor, attn: LocalGroupAttention) -> Tensor:
    return attn(x)


def gsa(x: Tensor, attn: GlobalSubsampledAttention) -> Tensor:
    return attn(x)
