"""Training objectives: mixed BCE+Dice for the main head and an MSE
distillation term that pulls the fuzzy head toward the frozen main logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accumulate, _from_op
from .errors import ShapeError


@dataclass
class LossConfig:
    bce_weight: float = 0.5     # mixing weight: bce_weight*BCE + (1-bce_weight)*Dice
    dice_eps: float = 1.0
    distill_weight: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.bce_weight <= 1.0):
            raise ValueError(f"bce_weight must be in [0,1], got {self.bce_weight}")
        if self.dice_eps <= 0 or self.distill_weight < 0:
            raise ValueError(f"invalid loss config: {self}")


def _lift_target(target) -> Tensor:
    return target if isinstance(target, Tensor) else Tensor(target)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy in the overflow-safe formulation
    max(z,0) - z*t + log(1 + exp(-|z|)).

    Implemented as a single fused graph node; the backward closure uses the
    analytic (sigmoid(z) - t) / n form.
    """
    target = _lift_target(target)
    if logits.shape != target.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs target {target.shape}")
    t = target.data
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError(f"bce_with_logits: target outside [0,1] (range {t.min()}..{t.max()})")
    z = logits.data
    n = max(z.size, 1)
    per_pixel = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = per_pixel.sum() / n

    def _bw(out: Tensor):
        g = out.grad
        if logits.requires_grad:
            s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
            _accumulate(logits, g * (s - t) / n)
        if target.requires_grad:
            _accumulate(target, g * (-z) / n)

    return _from_op(np.asarray(value), (logits, target), "bce_with_logits", _bw)


def dice_loss(probs: Tensor, target, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), summed over the batch."""
    target = _lift_target(target)
    if probs.shape != target.shape:
        raise ShapeError(f"dice_loss: probs {probs.shape} vs target {target.shape}")
    overlap = ad.reduce(probs * target, "sum") * 2.0 + eps
    total = ad.reduce(probs, "sum") + ad.reduce(target, "sum") + eps
    return 1.0 - overlap / total


def composite_loss(logits: Tensor, target, cfg: LossConfig) -> Tensor:
    """bce_weight * BCE(logits, t) + (1 - bce_weight) * Dice(sigmoid(logits), t_bin).

    The Dice branch sees the target binarized at 0.5 (consensus maps are
    soft); BCE consumes the soft target as-is. The endpoints 0 and 1 return
    the corresponding sub-loss exactly.
    """
    target = _lift_target(target)
    lam = cfg.bce_weight
    if lam == 1.0:
        return bce_with_logits(logits, target)
    hard = Tensor((target.data >= 0.5).astype(np.float64))
    dice = dice_loss(ad.sigmoid(logits), hard, eps=cfg.dice_eps)
    if lam == 0.0:
        return dice
    return bce_with_logits(logits, target) * lam + dice * (1.0 - lam)


def distill_mse(tsk_output: Tensor, unet_logits: Tensor) -> Tensor:
    """Mean squared gap to the main logits; the target is detached, so no
    gradient from this loss ever reaches the backbone."""
    if tsk_output.shape != unet_logits.shape:
        raise ShapeError(f"distill_mse: {tsk_output.shape} vs {unet_logits.shape}")
    return ad.reduce(ad.square(tsk_output - unet_logits.detach()), "mean")


def total_loss(logits: Tensor, tsk_output: Tensor, target, cfg: LossConfig):
    """Composite main loss plus weighted distillation. Returns (total, parts)."""
    comp = composite_loss(logits, target, cfg)
    dist = distill_mse(tsk_output, logits)
    total = comp + dist * cfg.distill_weight if cfg.distill_weight else comp
    return total, {"composite": comp.item(), "distill": dist.item()}
