"""Datasets: the ``.tns`` tensor format, directory loading with spacing
resampling, the ordered augmentation chain and synthetic toy datasets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np
from scipy import ndimage

from .config import AugmentConfig

TNS_MAGIC = b"TNS1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}


class FormatError(ValueError):
    pass


@dataclass
class LabeledSample:
    image: np.ndarray  # (C, H, W) float64
    mask: np.ndarray  # (H, W) int64
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[None]
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ spatially")

    def validate(self, num_classes: int) -> None:
        if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= num_classes):
            raise ValueError(f"sample {self.name!r}: class index outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# .tns binary tensors
# ---------------------------------------------------------------------------

def write_tns_to(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        tag, data = 0, arr.astype("<f8")
    elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        tag, data = 1, arr.astype("<i4")
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    fh.write(TNS_MAGIC)
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(data).tobytes())


def read_tns_from(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TNS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TNS_MAGIC!r}")
    head = fh.read(2)
    if len(head) != 2:
        raise FormatError("truncated header")
    tag, rank = struct.unpack("<BB", head)
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError("truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(np.float64 if tag == 0 else np.int64)


def write_tns(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tns_to(fh, arr)


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tns_from(fh)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def read_meta(path) -> dict:
    meta = {"spacing": (1.0, 1.0), "classes": None}
    p = Path(path)
    if not p.exists():
        return meta
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{p}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key == "spacing":
                sy, sx = (float(v) for v in val.split(","))
                meta["spacing"] = (sy, sx)
            elif key == "classes":
                meta["classes"] = int(val)
            else:
                meta[key] = val
        except ValueError:
            raise FormatError(f"{p}:{lineno}: malformed value for {key!r}") from None
    return meta


def normalize(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole image (constant images map to 0)."""
    std = image.std()
    out = image - image.mean()
    return out / std if std > 0 else out


def resample(sample: LabeledSample, spacing, target_spacing) -> LabeledSample:
    """Bilinear for the image, nearest for the mask."""
    fy = spacing[0] / target_spacing[0]
    fx = spacing[1] / target_spacing[1]
    if fy == 1 and fx == 1:
        return sample
    H, W = sample.mask.shape
    out_hw = (max(1, int(round(H * fy))), max(1, int(round(W * fx))))
    zoom = (out_hw[0] / H, out_hw[1] / W)
    image = np.stack([ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in sample.image])
    mask = ndimage.zoom(sample.mask, zoom, order=0, mode="nearest", grid_mode=True)
    return LabeledSample(image, mask, sample.name)


def _split_slices(image: np.ndarray, mask: np.ndarray, name: str) -> list:
    if mask.ndim == 2:
        return [LabeledSample(image, mask, name)]
    if mask.ndim == 3:
        # a volume: independent axial slices
        if image.ndim == 3:
            image = image[:, None]
        if image.ndim != 4 or image.shape[0] != mask.shape[0]:
            raise FormatError(f"{name}: image {image.shape} does not match mask volume {mask.shape}")
        return [LabeledSample(image[d], mask[d], f"{name}/{d}") for d in range(mask.shape[0])]
    raise FormatError(f"{name}: mask rank {mask.ndim} not supported")


def load_dataset(root, target_spacing: Optional[tuple] = None, num_classes: Optional[int] = None) -> list:
    """Load ``<root>/images/*.tns`` with matching ``<root>/masks/*.tns``.

    Samples are resampled from the spacing in ``meta.txt`` to ``target_spacing``
    (if given) and each image is normalised to zero mean and unit variance.
    """
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.exists():
        return []
    meta = read_meta(root / "meta.txt")
    classes = num_classes if num_classes is not None else meta["classes"]
    samples = []
    for img_path in sorted(img_dir.glob("*.tns")):
        mask_path = root / "masks" / img_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask for image {img_path.name}")
        for s in _split_slices(read_tns(img_path), read_tns(mask_path), img_path.stem):
            if classes is not None:
                s.validate(classes)
            if target_spacing:
                s = resample(s, meta["spacing"], target_spacing)
            s.image = normalize(s.image)
            samples.append(s)
    return samples


def save_dataset(root, samples: list, spacing=(1.0, 1.0), num_classes: Optional[int] = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = s.name or f"{i:04d}"
        write_tns(root / "images" / f"{stem}.tns", s.image)
        write_tns(root / "masks" / f"{stem}.tns", s.mask.astype(np.int32))
    if num_classes is None:
        num_classes = int(max(s.mask.max() for s in samples)) + 1 if samples else 0
    (root / "meta.txt").write_text(f"spacing={spacing[0]},{spacing[1]}\nclasses={num_classes}\n")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _affine(arr: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    """Resample a 2-D array under ``out(p) = arr(matrix @ (p - c) + c)``, zero outside."""
    c = (np.asarray(arr.shape, dtype=float) - 1) / 2
    offset = c - matrix @ c
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def _rotation_matrix(degrees: float) -> np.ndarray:
    # maps output (row, col) back to input coordinates for a counter-clockwise turn
    t = np.deg2rad(degrees)
    # snap so quarter turns land exactly on the grid instead of a hair outside it
    c, s = np.round(np.cos(t), 14), np.round(np.sin(t), 14)
    return np.array([[c, s], [-s, c]])


def rotate(arr: np.ndarray, degrees: float, order: int, exact: bool = True) -> np.ndarray:
    """Counter-clockwise rotation about the array centre of the last two axes."""
    if exact and degrees % 90 == 0:
        return np.rot90(arr, int(degrees // 90) % 4, axes=(-2, -1)).copy()
    m = _rotation_matrix(degrees)
    if arr.ndim == 3:
        return np.stack([_affine(a, m, order) for a in arr])
    return _affine(arr, m, order)


def scale(arr: np.ndarray, factor: float, order: int) -> np.ndarray:
    """Zoom about the centre by ``factor``, keeping the array extent."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    m = np.eye(2) / factor
    if arr.ndim == 3:
        return np.stack([_affine(a, m, order) for a in arr])
    return _affine(arr, m, order)


def _lowres(image: np.ndarray, factor: float) -> np.ndarray:
    out = []
    for ch in image:
        small = ndimage.zoom(ch, factor, order=0, grid_mode=True, mode="nearest")
        back = ndimage.zoom(small, (ch.shape[0] / small.shape[0], ch.shape[1] / small.shape[1]),
                            order=1, grid_mode=True, mode="nearest")
        out.append(back)
    return np.stack(out)


def _gamma(image: np.ndarray, g: float) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return image
    return ((image - lo) / (hi - lo)) ** g * (hi - lo) + lo


def augment(s: LabeledSample, cfg: AugmentConfig, rng: np.random.Generator) -> LabeledSample:
    """Apply the enabled transforms in fixed order.

    Order: brightness/contrast, rotation, low-resolution, scaling, gamma,
    mirroring, Gaussian noise, Gaussian blur.  Geometric steps move the mask
    with nearest-neighbour interpolation; photometric steps touch the image only.
    """
    if cfg.scaling and min(cfg.scale_range) <= 0:
        raise ValueError("scale_range must be strictly positive")
    image, mask = s.image.copy(), s.mask.copy()
    p = cfg.apply_prob

    def hit() -> bool:
        return rng.random() < p

    if cfg.brightness and hit():
        image = image + rng.uniform(*cfg.brightness_range)
    if cfg.contrast and hit():
        m = image.mean()
        image = (image - m) * rng.uniform(*cfg.contrast_range) + m
    if cfg.rotation and hit():
        angle = rng.uniform(*cfg.rotation_range)
        image, mask = rotate(image, angle, 1), rotate(mask, angle, 0)
    if cfg.lowres and hit():
        image = _lowres(image, rng.uniform(*cfg.lowres_range))
    if cfg.scaling and hit():
        f = rng.uniform(*cfg.scale_range)
        image, mask = scale(image, f, 1), scale(mask, f, 0)
    if cfg.gamma and hit():
        image = _gamma(image, rng.uniform(*cfg.gamma_range))
    if cfg.mirror and rng.random() < cfg.mirror_prob:
        image, mask = image[..., ::-1].copy(), mask[..., ::-1].copy()
    if cfg.noise and hit():
        image = image + rng.normal(0.0, rng.uniform(*cfg.noise_range), size=image.shape)
    if cfg.blur and hit():
        sigma = rng.uniform(*cfg.blur_range)
        image = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in image])
    return LabeledSample(image, mask.astype(s.mask.dtype, copy=False), s.name)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream fixed by (seed, epoch, sample index), independent of worker count."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def _finish(mask: np.ndarray, num_classes: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    levels = np.linspace(0.0, 1.0, num_classes)
    image = levels[mask] + rng.normal(0.0, noise, size=mask.shape)
    return normalize(image)[None]


def _circles(size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    n_obj = num_classes - 1
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    # shrink the radius range until all objects fit without touching
    r_lo, r_hi = 0.14 * size, 0.22 * size
    while True:
        for _ in range(200):
            mask = np.zeros((size, size), dtype=np.int64)
            placed = []
            ok = True
            for k in range(1, n_obj + 1):
                for _ in range(100):
                    r = rng.uniform(r_lo, r_hi)
                    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
                    if all(np.hypot(cy - py, cx - px) > r + pr + 2 for py, px, pr in placed):
                        placed.append((cy, cx, r))
                        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = k
                        break
                else:
                    ok = False
                    break
            if ok and 0.3 <= (mask == 0).mean() <= 0.9:
                return mask
        r_lo, r_hi = 0.85 * r_lo, 0.85 * r_hi


def _stripes(size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(0.35, 0.6) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (np.cos(angle) * xx + np.sin(angle) * yy) / period + rng.uniform()
    phase = u - np.floor(u)
    # first half of each period is background, the rest is split among the other classes
    fg = phase >= 0.5
    k = 1 + np.minimum(((phase - 0.5) * 2 * (num_classes - 1)).astype(int), num_classes - 2)
    mask = np.where(fg, k, 0)
    if len(np.unique(mask)) < num_classes:
        return _stripes(size, num_classes, rng)
    return mask


def _blobs(size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 10, mode="wrap")
    qs = np.quantile(field, np.linspace(0.5, 1.0, num_classes)[:-1])
    mask = np.searchsorted(qs, field, side="right")
    return mask.astype(np.int64)


_GENERATORS = {"circles": _circles, "stripes": _stripes, "blobs": _blobs}


def synth_dataset(kind: str, n: int, size: int, num_classes: int, seed: int = 0, noise: float = 0.1) -> list:
    """Procedural samples with exactly known masks; deterministic per seed."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {sorted(_GENERATORS)}")
    if size < 32 or size % 32:
        raise ValueError(f"size must be a positive multiple of 32, got {size}")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = _GENERATORS[kind](size, num_classes, rng)
        out.append(LabeledSample(_finish(mask, num_classes, rng, noise), mask, f"{kind}_{i:04d}"))
    return out


def stack_batch(samples: list) -> tuple:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
