"""Focal and Dice losses and the four-term training objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import TrainingError, ValidationError

FOCAL_EPS = 1e-7
DICE_SMOOTH = 1.0


def focal_loss(probs: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    """Mean binary focal loss; ``probs`` is the probability of the positive class."""
    if probs.shape != targets.shape:
        raise ValidationError(f"focal_loss shapes differ: {tuple(probs.shape)} vs {tuple(targets.shape)}")
    p = probs.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    y = targets.to(p.dtype)
    p_t = y * p + (1 - y) * (1 - p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(pred: torch.Tensor, mask: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss over the last two axes, averaged over any leading axes."""
    if pred.shape != mask.shape:
        raise ValidationError(f"dice_loss shapes differ: {tuple(pred.shape)} vs {tuple(mask.shape)}")
    mask = mask.to(pred.dtype)
    inter = (pred * mask).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + mask.sum(dim=(-2, -1))
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def local_loss(map_n, map_a, mask, gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    """Two-channel focal term plus Dice on each channel against its own target.

    Accepts ``(h, w)`` maps or ``(B, h, w)`` batches (batch mean).
    """
    if not map_n.shape == map_a.shape == mask.shape:
        raise ValidationError("local_loss maps and mask must share a shape")
    mask = mask.to(map_a.dtype)
    probs = torch.stack([map_n, map_a], dim=-3)
    targets = torch.stack([1 - mask, mask], dim=-3)
    return (
        focal_loss(probs, targets, gamma, alpha)
        + dice_loss(map_a, mask)
        + dice_loss(map_n, 1 - mask)
    )


def global_loss(scores: torch.Tensor, labels, gamma: float = 2.0, alpha: float = 0.5) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=scores.dtype, device=scores.device)
    if scores.numel() == 0:
        raise ValidationError("global_loss needs a non-empty batch")
    return focal_loss(scores, labels.reshape(scores.shape), gamma, alpha)


@dataclass
class LossBreakdown:
    local: torch.Tensor
    global_: torch.Tensor
    prior: torch.Tensor
    oc: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "local": float(self.local.detach()),
            "global": float(self.global_.detach()),
            "prior": float(self.prior.detach()),
            "oc": float(self.oc.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(local, global_, prior, oc) -> LossBreakdown:
    terms = {"local": local, "global": global_, "prior": prior, "oc": oc}
    terms = {k: v if torch.is_tensor(v) else torch.tensor(v, dtype=torch.float64) for k, v in terms.items()}
    for name, value in terms.items():
        if not bool(torch.isfinite(value).all()):
            raise TrainingError(f"loss component {name!r} is not finite ({float(value.detach())})")
    total = terms["local"] + terms["global"] + terms["prior"] + terms["oc"]
    return LossBreakdown(terms["local"], terms["global"], terms["prior"], terms["oc"], total)
