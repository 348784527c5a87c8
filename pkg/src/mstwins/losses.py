"""Dice metric and the three-part multi-scale training loss.

The training objective is ``alpha * contrastive + balance``:

* contrastive: per pyramid level, the soft Dice overlap between every pair of
  distinct class-probability maps, reduced over pairs (min by default) and
  summed over levels;
* balance: a focal term ``-(1 - p_true)**q * log(p_true)`` per level.  The
  deepest level averages it over every pixel, each shallower level only over
  the pixels the next-deeper level's prediction got wrong.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import LossConfig
from .tensor import Tensor, clamp_min, gather_mask, getitem, log, matmul, power, tmax, tmin, tsum

IGNORE = -1


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|X∩Y| / (|X|+|Y|) for the pixel sets labelled ``class_id``; 1.0 if both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice_score: shape mismatch {pred.shape} vs {gt.shape}")
    x = pred == class_id
    y = gt == class_id
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / denom


def downsample_labels(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label decimation, sampling each factor×factor cell near its centre."""
    if factor == 1:
        return mask
    off = factor // 2
    return mask[..., off::factor, off::factor]


@dataclass
class LevelPredictions:
    """Class probabilities, labels and cascade error masks per level, finest first."""

    probs: list
    labels: list
    error_masks: list


def cascade_error_masks(logits: list, labels: list, strides=None, include_self: bool = False) -> list:
    """Boolean masks of the pixels each level is responsible for.

    The deepest level covers everything; level j covers the pixels where the
    upsampled argmax of level j+1 disagrees with the label.  With
    ``include_self`` level j also covers the pixels its own argmax gets wrong.
    No gradient flows through these masks.
    """
    if strides is None:
        strides = [labels[0].shape[-1] // lab.shape[-1] for lab in labels]
    masks = [None] * len(logits)
    masks[-1] = np.ones(labels[-1].shape, dtype=bool)
    for j in range(len(logits) - 2, -1, -1):
        coarse = logits[j + 1].data.argmax(axis=1)
        f = strides[j + 1] // strides[j]
        up = np.repeat(np.repeat(coarse, f, axis=-2), f, axis=-1)
        h, w = labels[j].shape[-2:]
        masks[j] = up[..., :h, :w] != labels[j]
        if include_self:
            masks[j] |= logits[j].data.argmax(axis=1) != labels[j]
    return masks


def level_predictions(logits: list, strides: list, mask: np.ndarray, include_self: bool = False) -> LevelPredictions:
    """Build loss inputs from per-level logits (finest first) and a full-resolution label map.

    ``strides[j]`` is the input-pixel stride of level j.  The label map is
    padded with the ignore label to cover every level's extent.
    """
    mask = np.asarray(mask)
    need_h = max(lg.shape[2] * s for lg, s in zip(logits, strides))
    need_w = max(lg.shape[3] * s for lg, s in zip(logits, strides))
    if mask.shape[-2:] != (need_h, need_w):
        padded = np.full(mask.shape[:-2] + (need_h, need_w), IGNORE, dtype=mask.dtype)
        h, w = min(need_h, mask.shape[-2]), min(need_w, mask.shape[-1])
        padded[..., :h, :w] = mask[..., :h, :w]
        mask = padded
    labels = [downsample_labels(mask, s)[..., :lg.shape[2], :lg.shape[3]] for lg, s in zip(logits, strides)]
    probs = [F.softmax(lg, axis=1) for lg in logits]
    return LevelPredictions(probs, labels, cascade_error_masks(logits, labels, strides, include_self))


def training_levels(out) -> tuple:
    """Logits and strides the loss is computed on.

    The finest level is scored through the full-resolution ``final_logits``
    (its upsampled version) so boundaries are learned below the level's own
    grid spacing; coarser levels are scored at their native scale.
    """
    return [out.final_logits] + list(out.logits_per_level[1:]), [1] + list(out.level_strides[1:])


def _pair_overlap(p: Tensor, eps: float, square: bool) -> Tensor:
    """Soft Dice for every unordered pair of distinct classes: (B, n_pairs)."""
    B, K = p.shape[:2]
    flat = p.reshape(B, K, -1)
    inter = matmul(flat, flat.permute(0, 2, 1))
    sizes = tsum(flat * flat if square else flat, axis=2)
    iu, ju = np.triu_indices(K, 1)
    sel = (slice(None), iu, ju)
    denom = getitem(sizes, (slice(None), iu)) + getitem(sizes, (slice(None), ju)) + eps
    return getitem(inter, sel) * 2.0 / denom


def contrastive_loss(probs: list, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over levels of the batch-mean min (or max) pairwise soft Dice."""
    total = None
    for p in probs:
        if p.shape[1] < 2:
            raise ValueError("contrastive loss needs at least two classes")
        d = _pair_overlap(p, cfg.epsilon, cfg.dice_square)
        red = tmin(d, axis=1) if cfg.pair_reduce == "min" else tmax(d, axis=1)
        term = red.mean()
        total = term if total is None else total + term
    return total


def balance_loss(probs: list, labels: list, error_masks: list, q, floor: float = 1e-12) -> Tensor:
    """Sum over levels of the focal term averaged over each level's responsible pixels.

    ``q`` is one focusing exponent per class.  Pixels labelled ``IGNORE`` never count.
    """
    q = np.asarray(q, dtype=float)
    total = None
    for p, y, m in zip(probs, labels, error_masks):
        K = p.shape[1]
        if q.size != K:
            raise ValueError(f"need {K} focusing exponents, got {q.size}")
        if p.data.min() < 0 or p.data.max() > 1 + 1e-9:
            raise ValueError("balance_loss: probabilities outside [0, 1]")
        valid = y >= 0
        yc = np.where(valid, y, 0)
        p_true = clamp_min(tsum(p * F.one_hot(yc, K, axis=1), axis=1), floor)
        term = -(power(1.0 - p_true, q[yc]) * log(p_true))
        sel = np.asarray(m, dtype=bool) & valid
        if sel.any():
            lvl = gather_mask(term, sel).mean()
        else:
            lvl = tsum(term * 0.0)
        total = lvl if total is None else total + lvl
    return total


def loss_terms(preds: LevelPredictions, cfg: LossConfig = LossConfig()):
    """``(total, contrastive, balance)`` with total = alpha * contrastive + balance."""
    K = preds.probs[0].shape[1]
    con = contrastive_loss(preds.probs, cfg)
    bal = balance_loss(preds.probs, preds.labels, preds.error_masks, cfg.q_per_class(K), cfg.prob_floor)
    return con * cfg.alpha + bal, con, bal


def combined_loss(preds: LevelPredictions, cfg: LossConfig = LossConfig()) -> Tensor:
    return loss_terms(preds, cfg)[0]

