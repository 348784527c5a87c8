"""Run configuration: model, loss, augmentation and trainer settings.

A config file is flat ``key = value`` text.  Every key names a field of
exactly one of the four dataclasses below; unknown keys are an error.
Tuple-valued fields are written comma-separated (``depths = 2,2,2,2``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    embed_dims: tuple = (96, 192, 384, 768)
    patch_sizes: tuple = (4, 2, 2, 2)
    depths: tuple = (2, 2, 2, 2)
    decoder_depths: tuple = (1, 1, 1, 1)
    head_dim: int = 32
    mlp_ratio: float = 2.0
    window: int = 4
    # GSA strides at the 224-px reference size; rescaled to img_size by sr_ratios_for()
    sr_ratios: tuple = (8, 4, 2, 1)
    sr_reference_size: int = 224
    img_size: int = 64
    use_cpe: bool = True
    mcab_reduction: int = 4
    share_mcab: bool = False
    use_msfif: bool = True
    cascade: str = "residual"  # residual | downsample
    final_upsample: str = "bilinear"  # bilinear | nearest
    pretrained: str = ""
    init_std: float = 0.02

    def __post_init__(self):
        if len(self.embed_dims) != 4 or len(self.patch_sizes) != 4 or len(self.depths) != 4:
            raise ValueError("embed_dims, patch_sizes and depths need one entry per stage (4)")
        if self.num_classes <= 1:
            raise ValueError("num_classes must be at least 2")
        if self.cascade not in ("residual", "downsample"):
            raise ValueError(f"unknown cascade mode {self.cascade!r}")
        if self.final_upsample not in ("bilinear", "nearest"):
            raise ValueError(f"unknown final_upsample {self.final_upsample!r}")
        for c in self.embed_dims:
            if c % self.mcab_reduction:
                raise ValueError(f"mcab_reduction {self.mcab_reduction} must divide channel count {c}")
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def total_stride(self) -> int:
        s = 1
        for p in self.patch_sizes:
            s *= p
        return s

    def heads(self, stage: int) -> int:
        return max(1, self.embed_dims[stage] // self.head_dim)

    def sr_ratios_for(self, size: int | None = None) -> tuple:
        """GSA sub-sample strides scaled from the reference size to ``size``."""
        size = self.img_size if size is None else size
        return tuple(max(1, int(round(r * size / self.sr_reference_size))) for r in self.sr_ratios)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    q: Union[float, tuple] = 2.0
    epsilon: float = 1e-6
    pair_reduce: str = "min"  # min | max
    dice_square: bool = False
    prob_floor: float = 1e-12
    mask_self_errors: bool = True  # finer levels also score their own mistakes

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        qs = self.q if isinstance(self.q, tuple) else (self.q,)
        if any(v < 0 for v in qs):
            raise ValueError("q must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.pair_reduce not in ("min", "max"):
            raise ValueError(f"pair_reduce must be 'min' or 'max', got {self.pair_reduce!r}")

    def q_per_class(self, num_classes: int):
        import numpy as np

        if isinstance(self.q, tuple):
            if len(self.q) != num_classes:
                raise ValueError(f"q has {len(self.q)} entries for {num_classes} classes")
            return np.asarray(self.q, dtype=float)
        return np.full(num_classes, float(self.q))


@dataclass(frozen=True)
class AugmentConfig:
    brightness: bool = True
    brightness_range: tuple = (-0.2, 0.2)
    contrast: bool = True
    contrast_range: tuple = (0.8, 1.2)
    rotation: bool = True
    rotation_range: tuple = (-15.0, 15.0)
    lowres: bool = True
    lowres_range: tuple = (0.5, 1.0)
    scaling: bool = True
    scale_range: tuple = (0.85, 1.15)
    gamma: bool = True
    gamma_range: tuple = (0.7, 1.5)
    mirror: bool = True
    mirror_prob: float = 0.5
    noise: bool = True
    noise_range: tuple = (0.0, 0.05)
    blur: bool = True
    blur_range: tuple = (0.5, 1.0)
    apply_prob: float = 0.3

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{f.name: False for f in fields(cls) if f.type in (bool, "bool")})


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "poly"  # poly | constant
    poly_power: float = 0.9
    grad_clip: float = 2.0  # global L2 norm; 0 disables
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0
    augment: bool = False
    val_fraction: float = 0.2
    eval_every: int = 0
    target_spacing: tuple = ()

    def __post_init__(self):
        if self.lr_schedule not in ("poly", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, **changes) -> "RunConfig":
        """Return a copy with flat ``key=value`` overrides applied."""
        return from_flat({**to_flat(self), **{k: _format(v) for k, v in changes.items()}})


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "augment": AugmentConfig, "train": TrainConfig}
_KEY_SECTION: dict[str, str] = {}
for _sec, _cls in _SECTIONS.items():
    for _f in fields(_cls):
        assert _f.name not in _KEY_SECTION, f"duplicate config key {_f.name}"
        _KEY_SECTION[_f.name] = _sec


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, tuple):
        if not text:
            return ()
        kind = type(default[0]) if default else float
        return tuple(_parse_scalar(t.strip(), kind) for t in text.split(","))
    if isinstance(default, float) and not isinstance(default, bool) and "," in text:
        # scalar-or-tuple fields (e.g. per-class q)
        return tuple(float(t) for t in text.split(","))
    return _parse_scalar(text, type(default))


def to_flat(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for sec in _SECTIONS:
        sub = getattr(cfg, sec)
        for f in fields(sub):
            out[f.name] = _format(getattr(sub, f.name))
    return out


def from_flat(entries: dict[str, str]) -> RunConfig:
    per_section: dict[str, dict] = {sec: {} for sec in _SECTIONS}
    defaults = RunConfig()
    for key, raw in entries.items():
        sec = _KEY_SECTION.get(key)
        if sec is None:
            raise KeyError(f"unknown config key {key!r}")
        default = getattr(getattr(defaults, sec), key)
        per_section[sec][key] = _parse_value(raw, default)
    return RunConfig(**{sec: cls(**per_section[sec]) for sec, cls in _SECTIONS.items()})


def parse_text(text: str) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def loads(text: str) -> RunConfig:
    return from_flat(parse_text(text))


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


replace = dataclasses.replace
