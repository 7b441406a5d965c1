"""Training objectives: variant focal loss, masked L1 regression, RoI mask BCE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

PROB_EPS = 1e-6  # clamp before logs


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("focal exponents must be positive")


@dataclass
class LossBreakdown:
    """Weighted sum of the four training objectives (values may be tensors)."""

    heatmap_loss: torch.Tensor
    offset_loss: torch.Tensor
    wh_loss: torch.Tensor
    mask_loss: torch.Tensor
    total: torch.Tensor
    offset_weight: float
    wh_weight: float
    mask_weight: float


def focal_loss(pred: torch.Tensor, target: torch.Tensor,
               cfg: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Penalty-reduced focal loss over a Gaussian-encoded center heatmap.

    Cells with target exactly 1 are positives; elsewhere the penalty is scaled
    by (1 - target)^beta. Normalized by the number of positives (min 1).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = target == 1.0
    pos_term = (1.0 - p) ** cfg.alpha * torch.log(p)
    neg_term = (1.0 - target) ** cfg.beta * p ** cfg.alpha * torch.log(1.0 - p)
    summed = torch.where(pos, pos_term, neg_term).sum()
    n = pos.sum().clamp(min=1)
    return -summed / n


def keypoint_l1_loss(pred_map: torch.Tensor, target_map: torch.Tensor,
                     center_mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over channels, restricted to center cells.

    Maps are (..., C, H, W); center_mask is (..., H, W) bool. Returns 0 when
    there are no center cells.
    """
    if pred_map.shape != target_map.shape:
        raise ValueError(f"shape mismatch: {pred_map.shape} vs {target_map.shape}")
    mask = center_mask.to(pred_map.dtype).unsqueeze(-3)
    diff = (pred_map - target_map).abs() * mask
    denom = mask.sum() * pred_map.shape[-3]
    if denom == 0:
        return pred_map.sum() * 0.0
    return diff.sum() / denom


def mask_bce_loss(pred_grids: torch.Tensor, target_grids: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all RoI pixels; 0 for an empty batch."""
    if pred_grids.shape != target_grids.shape:
        raise ValueError(f"shape mismatch: {pred_grids.shape} vs {target_grids.shape}")
    if pred_grids.numel() == 0:
        log.debug("mask_bce_loss on an empty RoI batch")
        return pred_grids.sum() * 0.0
    p = pred_grids.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = target_grids.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def total_loss(heatmap_loss: torch.Tensor, offset_loss: torch.Tensor,
               wh_loss: torch.Tensor, mask_loss: torch.Tensor,
               offset_weight: float = 1.0, wh_weight: float = 0.1,
               mask_weight: float = 1.0) -> LossBreakdown:
    """Combine the component losses into the training objective."""
    total = (heatmap_loss + offset_weight * offset_loss
             + wh_weight * wh_loss + mask_weight * mask_loss)
    return LossBreakdown(
        heatmap_loss=heatmap_loss, offset_loss=offset_loss,
        wh_loss=wh_loss, mask_loss=mask_loss, total=total,
        offset_weight=offset_weight, wh_weight=wh_weight, mask_weight=mask_weight,
    )
