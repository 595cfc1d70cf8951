"""BCE + dice losses and the deep-supervision combination."""

from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1.0


def _check(logits, target):
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="mean")


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps).

    NCHW inputs are scored per sample and averaged over the batch; anything else
    is treated as a single sample.
    """
    _check(logits, target)
    p = torch.sigmoid(logits)
    t = target.to(logits.dtype)
    dims = tuple(range(1, logits.ndim)) if logits.ndim == 4 else tuple(range(logits.ndim))
    score = (2 * (p * t).sum(dims) + eps) / (p.sum(dims) + t.sum(dims) + eps)
    return (1 - score).mean()


def mask_loss(logits, target):
    return bce_loss(logits, target) + dice_loss(logits, target)


def downsample_target(target: torch.Tensor, size) -> torch.Tensor:
    """Area-average a [B, 1, R, R] target to ``size``; values stay soft."""
    if tuple(target.shape[-2:]) == tuple(size):
        return target
    return F.adaptive_avg_pool2d(target, size)


def total_loss(final_logits, intermediates, target, lambda_final: float = 1.0, lambda_inter: float = 0.3):
    if len(intermediates) != 3:
        raise ValueError(f"expected 3 intermediate predictions, got {len(intermediates)}")
    if lambda_final < 0 or lambda_inter < 0:
        raise ValueError("loss weights must be non-negative")
    loss = lambda_final * mask_loss(final_logits, target)
    for logits in intermediates:
        loss = loss + lambda_inter * mask_loss(logits, downsample_target(target, logits.shape[-2:]))
    return loss


def per_sample_mask_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """BCE + dice for each sample of an NCHW batch, shape [B]."""
    _check(logits, target)
    t = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, t, reduction="none").flatten(1).mean(1)
    p = torch.sigmoid(logits).flatten(1)
    t = t.flatten(1)
    dice = 1 - (2 * (p * t).sum(1) + DICE_EPS) / (p.sum(1) + t.sum(1) + DICE_EPS)
    return bce + dice
