"""Multi-channel attention gating (MC-AB) and adjacent-stage fusion (MS-FIF)."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import Conv2d, Module
from .tensor import Tensor, concat, relu, sigmoid


class McAb(Module):
    """Two-branch channel attention.

    The global branch squeezes ``x`` by spatial averaging and runs a C→C/r→C
    bottleneck; the local branch runs the same bottleneck per pixel with 1×1
    convs.  Their sum, squashed by a sigmoid, gates ``x`` elementwise.
    """

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        mid = channels // reduction
        self.global_fc1 = Conv2d(channels, mid, 1, rng)
        self.global_fc2 = Conv2d(mid, channels, 1, rng)
        self.local_fc1 = Conv2d(channels, mid, 1, rng)
        self.local_fc2 = Conv2d(mid, channels, 1, rng)
        self.channels = channels

    def gate(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"mc_ab expects {self.channels} channels, got {x.shape[1]}")
        g = self.global_fc2(relu(self.global_fc1(F.global_avgpool(x))))
        loc = self.local_fc2(relu(self.local_fc1(x)))
        return sigmoid(g + loc)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class MsFif(Module):
    """Fuse a stage output ``x_hi`` (B,C,H,W) with the next deeper one ``y_lo`` (B,2C,H/2,W/2).

    ``x_hi`` is average-pooled and projected to match ``y_lo``, each input is
    gated by its own MC-AB, the two are concatenated, projected back to 2C,
    gated again, then upsampled ×2 and projected to C.
    """

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, share_mcab: bool = False):
        c2 = 2 * channels
        self.down = Conv2d(channels, c2, 1, rng)
        self.att_hi = McAb(c2, reduction, rng)
        self.att_lo = self.att_hi if share_mcab else McAb(c2, reduction, rng)
        self.merge = Conv2d(2 * c2, c2, 1, rng)
        self.att_out = McAb(c2, reduction, rng)
        self.up = Conv2d(c2, channels, 1, rng)
        self.channels = channels
        self.share_mcab = share_mcab

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def forward(self, x_hi: Tensor, y_lo: Tensor) -> Tensor:
        B, C, H, W = x_hi.shape
        if C != self.channels:
            raise ValueError(f"ms_fif expects {self.channels} channels in x_hi, got {C}")
        if y_lo.shape != (B, 2 * C, H // 2, W // 2) or H % 2 or W % 2:
            raise ValueError(f"ms_fif: y_lo shape {y_lo.shape} does not pair with x_hi {x_hi.shape}")
        a = self.att_hi(self.down(F.avgpool2d(x_hi, 2)))
        b = self.att_lo(y_lo)
        z = self.att_out(self.merge(concat([a, b], axis=1)))
        return self.up(F.interpolate_nearest(z, 2))


def mc_ab(x: Tensor, params: McAb) -> Tensor:
    return params(x)


def ms_fif(x_hi: Tensor, y_lo: Tensor, params: MsFif) -> Tensor:
    return params(x_hi, y_lo)
