"""MS-Twins network: four-stage Twins encoder, MS-FIF fusion of adjacent stages,
mirrored decoder and the coarse-to-fine residual prediction cascade."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .blocks import EncoderStage, StageConfig, TransformerBlock, _round_up
from .config import ModelConfig
from .msfif import MsFif
from .nn import Conv2d, Module
from .tensor import Tensor, getitem, no_grad

ABLATIONS = ("full", "no_msfif", "plain_downsample_cascade", "no_pretrain")


@dataclass
class StagePyramid:
    levels: list  # f1..f4, finest first

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple]:
        return [t.shape for t in self.levels]


@dataclass
class CascadeOutput:
    """``logits_per_level[j]`` is the effective prediction at decoder level j+1
    (finest first); ``residuals`` holds what each level itself added."""

    logits_per_level: list
    residuals: list
    final_logits: Tensor
    level_strides: list


def ablate(cfg: ModelConfig, switch: str) -> ModelConfig:
    if switch == "full":
        return cfg
    if switch == "no_msfif":
        return dataclasses.replace(cfg, use_msfif=False)
    if switch in ("plain_downsample_cascade", "downsample"):
        return dataclasses.replace(cfg, cascade="downsample")
    if switch == "no_pretrain":
        return dataclasses.replace(cfg, pretrained="")
    raise ValueError(f"unknown ablation {switch!r}; expected one of {ABLATIONS}")


def _upsample(x: Tensor, scale: int, mode: str) -> Tensor:
    if mode == "bilinear":
        return F.interpolate_bilinear(x, scale)
    return F.interpolate_nearest(x, scale)


class MsTwins(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dims = cfg.embed_dims
        srs = cfg.sr_ratios_for()
        std = cfg.init_std
        # separate streams so ablations that drop a part leave the others' init untouched
        rng_enc, rng_fuse, rng_dec = (np.random.default_rng([seed, i]) for i in range(3))

        self.stage_cfgs = []
        in_ch = cfg.in_channels
        for k in range(4):
            self.stage_cfgs.append(StageConfig(
                in_channels=in_ch, out_channels=dims[k], patch_stride=cfg.patch_sizes[k],
                depth=cfg.depths[k], window=cfg.window, sr_ratio=srs[k],
                mlp_ratio=cfg.mlp_ratio, num_heads=cfg.heads(k), use_cpe=cfg.use_cpe))
            in_ch = dims[k]
        self.encoder = [EncoderStage(sc, rng_enc, std) for sc in self.stage_cfgs]

        self.fusion = [MsFif(dims[k], cfg.mcab_reduction, rng_fuse, cfg.share_mcab)
                       for k in range(3)] if cfg.use_msfif else []

        if cfg.cascade == "residual":
            self.decoder = [
                TransformerBlock(dataclasses.replace(sc, depth=cfg.decoder_depths[k]), rng_dec, std)
                for k, sc in enumerate(self.stage_cfgs)]
            self.expand = [Conv2d(dims[k + 1], dims[k], 1, rng_dec, std=std) for k in range(3)]
            self.heads = [Conv2d(dims[k], cfg.num_classes, 1, rng_dec, std=std) for k in range(4)]
        else:
            self.downs = [Conv2d(dims[k], dims[k + 1], cfg.patch_sizes[k + 1], rng_dec,
                                 stride=cfg.patch_sizes[k + 1]) for k in range(3)]
            self.head = Conv2d(dims[3], cfg.num_classes, 1, rng_dec, std=std)

    # -- encoder ----------------------------------------------------------------
    def encode(self, x: Tensor) -> StagePyramid:
        B, C, H, W = x.shape
        s = self.cfg.total_stride
        if C != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {C}")
        if H < s or W < s:
            raise ValueError(f"input {H}x{W} is smaller than the total stride {s}x{s}")
        # replicate the border: zero padding would feed constant patches into the
        # patch-embedding LayerNorm, whose gradient blows up at zero variance
        Hp, Wp = _round_up(H, s), _round_up(W, s)
        if Hp != H:
            x = getitem(x, (slice(None), slice(None), np.minimum(np.arange(Hp), H - 1)))
        if Wp != W:
            x = getitem(x, (Ellipsis, np.minimum(np.arange(Wp), W - 1)))
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        return StagePyramid(feats)

    def encoder_parameters(self) -> list:
        return [p for name, p in self.named_parameters() if name.startswith("encoder.")]

    # -- fusion -----------------------------------------------------------------
    def fuse_pyramid(self, p: StagePyramid) -> StagePyramid:
        if not self.fusion:
            return StagePyramid(list(p.levels))
        fused = [self.fusion[k](p[k], p[k + 1]) for k in range(3)]
        return StagePyramid(fused + [p[3]])

    # -- decoder ----------------------------------------------------------------
    def decode_cascade(self, fused: StagePyramid, out_hw: Optional[tuple] = None) -> CascadeOutput:
        cfg = self.cfg
        ps = cfg.patch_sizes
        strides = [int(np.prod(ps[:k + 1])) for k in range(4)]
        if cfg.cascade == "downsample":
            h = fused[0]
            for k in range(3):
                h = F.gelu(self.downs[k](h)) + fused[k + 1]
            logits = self.head(h)
            final = self._final(logits, strides[3], out_hw)
            return CascadeOutput([logits], [logits], final, [strides[3]])

        d = self.decoder[3](fused[3])
        eff = self.heads[3](d)
        levels, residuals = [eff], [eff]
        for k in (2, 1, 0):
            s = fused[k] + self.expand[k](F.interpolate_nearest(d, ps[k + 1]))
            d = self.decoder[k](s)
            r = self.heads[k](d)
            eff = r + F.interpolate_nearest(eff, ps[k + 1])
            levels.insert(0, eff)
            residuals.insert(0, r)
        final = self._final(levels[0], strides[0], out_hw)
        return CascadeOutput(levels, residuals, final, strides)

    def _final(self, logits: Tensor, scale: int, out_hw) -> Tensor:
        up = _upsample(logits, scale, self.cfg.final_upsample)
        if out_hw is not None and tuple(out_hw) != up.shape[2:]:
            up = getitem(up, (slice(None), slice(None), slice(0, out_hw[0]), slice(0, out_hw[1])))
        return up

    def forward(self, x: Tensor) -> CascadeOutput:
        return self.decode_cascade(self.fuse_pyramid(self.encode(x)), x.shape[2:])

    def predict(self, x: Tensor) -> np.ndarray:
        """Per-pixel argmax class map, shape (B, H, W)."""
        with no_grad():
            out = self.forward(x)
        return out.final_logits.data.argmax(axis=1)
