"""Class-balanced cross-entropy + soft dice loss with an ignore label."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .preprocess import UNLABELED

log = logging.getLogger(__name__)


@dataclass
class ClassWeights:
    w_ce: np.ndarray
    w_dice: np.ndarray
    r: np.ndarray

    @classmethod
    def from_proportions(cls, r) -> "ClassWeights":
        """``w_ce = 1/r`` and ``w_dice = 1/sqrt(r)``; absent classes get weight 0."""
        r = np.asarray(r, dtype=np.float64)
        present = r > 0
        w_ce = np.zeros_like(r)
        w_dice = np.zeros_like(r)
        w_ce[present] = 1.0 / r[present]
        w_dice[present] = 1.0 / np.sqrt(r[present])
        if not present.all():
            log.warning("classes %s have no pixels; their loss weights are set to 0", np.flatnonzero(~present).tolist())
        return cls(w_ce, w_dice, r)

    @classmethod
    def uniform(cls, M: int) -> "ClassWeights":
        return cls.from_proportions(np.full(M, 1.0 / M))


def class_weights(label_maps: Sequence[np.ndarray], M: int) -> ClassWeights:
    """Weights from class proportions among labeled pixels of ``label_maps``."""
    counts = np.zeros(M)
    for y in label_maps:
        y = np.asarray(y).ravel()
        y = y[y != UNLABELED]
        counts += np.bincount(y, minlength=M)[:M]
    total = counts.sum()
    r = counts / total if total > 0 else counts
    return ClassWeights.from_proportions(r)


def _terms(logp, p, target, w_ce, w_dice, smooth):
    mask = target != UNLABELED
    if not bool(mask.any()):
        return (logp * 0).sum(), False
    C = logp.shape[1]
    t = torch.where(mask, target, torch.zeros_like(target))
    m = mask.to(logp.dtype)
    nll = -logp.gather(1, t[:, None])[:, 0]
    wi = w_ce[t] * m
    denom = wi.sum()
    ce = (wi * nll).sum() / denom if float(denom) > 0 else (nll * 0).sum()
    onehot = F.one_hot(t, C).permute(0, 3, 1, 2).to(logp.dtype) * m[:, None]
    pm = p * m[:, None]
    inter = (pm * onehot).sum(dim=(0, 2, 3))
    union = (pm + onehot).sum(dim=(0, 2, 3))
    dice = 1.0 - (2.0 * (w_dice * inter).sum() + smooth) / ((w_dice * union).sum() + smooth)
    return 0.5 * ce + 0.5 * dice, True


def _weights(weights: ClassWeights, ref: torch.Tensor):
    return (
        torch.as_tensor(weights.w_ce, dtype=ref.dtype, device=ref.device),
        torch.as_tensor(weights.w_dice, dtype=ref.dtype, device=ref.device),
    )


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, weights: ClassWeights, smooth: float = 1.0):
    """Mean of weighted cross-entropy and weighted soft dice from logits.

    ``logits`` is B x C x H x W, ``target`` B x H x W with ``UNLABELED`` for
    ignored pixels.  Returns a scalar tensor; it is exactly zero (with zero
    gradient) when nothing is labeled.
    """
    w_ce, w_dice = _weights(weights, logits)
    logp = F.log_softmax(logits, dim=1)
    value, _ = _terms(logp, logp.exp(), target.long(), w_ce, w_dice, smooth)
    return value


def loss(pred, target, weights: ClassWeights, smooth: float = 1.0, eps: float = 1e-12):
    """Loss for softmax probabilities ``pred`` (H x W x C or B x H x W x C).

    Returns ``(value, has_labels)``; ``has_labels`` is False when every target
    pixel is ``UNLABELED`` and the value is then 0.
    """
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    y = torch.as_tensor(np.asarray(target).astype(np.int64))
    if p.ndim == 3:
        p, y = p[None], y[None]
    if p.shape[:3] != y.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(y.shape)} disagree")
    p = p.permute(0, 3, 1, 2)
    w_ce, w_dice = _weights(weights, p)
    value, has = _terms(torch.log(p.clamp_min(eps)), p, y, w_ce, w_dice, smooth)
    return float(value), has
