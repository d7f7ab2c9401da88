"""Training objective: discrepancy magnification, direction invariance, localization."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffcore import cosine_similarity, l2_distance


@dataclass(frozen=True)
class LossWeights:
    lambda_ddm: float = 0.001
    lambda_di: float = 0.001
    margin: float = 0.01

    def __post_init__(self):
        for name in ("lambda_ddm", "lambda_di", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class LossReport:
    total: torch.Tensor
    ddm: torch.Tensor
    di: torch.Tensor
    loc: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ddm", "di", "loc", "total")}


def ddm_loss(z_f, z_b, z_f_new, z_b_new, margin: float = 0.01):
    """Batch mean of ``max(d(z_f, z_b) - d(z'_f, z'_b) + m, 0)``."""
    d = l2_distance(z_f, z_b)
    d_new = l2_distance(z_f_new, z_b_new)
    return torch.relu(d - d_new + margin).mean()


def di_loss(z_f, z_b, z_f_new, z_b_new, eps: float = 1e-8):
    """Batch mean of ``1 - cos(z_f - z_b, z'_f - z'_b)``."""
    return (1.0 - cosine_similarity(z_f - z_b, z_f_new - z_b_new, eps)).mean()


def bce_loss(logits, gt):
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def soft_iou_loss(prob, gt):
    """``1 - (sum pg + 1) / (sum p + sum g - sum pg + 1)`` per image, averaged over the batch."""
    gt = gt.to(prob.dtype)
    dims = tuple(range(1, prob.dim()))
    inter = (prob * gt).sum(dim=dims)
    union = prob.sum(dim=dims) + gt.sum(dim=dims) - inter
    return (1.0 - (inter + 1.0) / (union + 1.0)).mean()


def localization_loss(logits, gt):
    if not ((gt == 0) | (gt == 1)).all():
        raise ValueError("ground-truth mask must be binary")
    return bce_loss(logits, gt) + soft_iou_loss(torch.sigmoid(logits), gt)


def total_loss(ddm, di, loc, weights: LossWeights) -> LossReport:
    total = weights.lambda_ddm * ddm + weights.lambda_di * di + loc
    return LossReport(total=total, ddm=ddm, di=di, loc=loc)
