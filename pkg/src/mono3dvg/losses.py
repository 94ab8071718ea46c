"""Training objective: 2D group, 3D group and the depth-map term.

All per-sample terms are averaged over the batch. Vector L1 terms are summed over
their coordinates before averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import Tensor

from .data import Targets
from .grounding import GroundingPrediction

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    lrtb: float = 5.0
    giou: float = 2.0
    xy3d: float = 10.0

    @classmethod
    def from_tuple(cls, t) -> "LossWeights":
        return cls(*(float(x) for x in t))

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.cls * k, self.lrtb * k, self.giou * k, self.xy3d * k)


@dataclass
class LossBreakdown:
    cls: Tensor
    lrtb: Tensor
    giou: Tensor
    xy3d: Tensor
    size3d: Tensor
    orient: Tensor
    depth: Tensor
    dmap: Tensor
    total: Tensor
    loss_2d: Tensor
    loss_3d: Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def focal_loss(logits: Tensor, target: Tensor, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Softmax focal loss -alpha (1 - p_t)^gamma log p_t, averaged over leading dims.

    logits: (..., K) with class on the last axis; target: (...) integer classes.
    """
    k = logits.shape[-1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= k):
        raise ValueError(f"class id outside [0, {k})")
    logp = logits.log_softmax(-1).gather(-1, target[..., None])[..., 0]
    p = logp.exp()
    return (-alpha * (1.0 - p) ** gamma * logp).mean()


def lrtb_to_box(xy: Tensor, lrtb: Tensor) -> Tensor:
    """Normalized (u0, v0, u1, v1) from a center and its (l, r, t, b) distances."""
    return torch.stack([xy[:, 0] - lrtb[:, 0], xy[:, 1] - lrtb[:, 2],
                        xy[:, 0] + lrtb[:, 1], xy[:, 1] + lrtb[:, 3]], 1)


def giou(a: Tensor, b: Tensor, eps: float = 1e-9) -> Tensor:
    """Generalized IoU of matching rows of two (B, 4) corner-format box tensors."""
    area_a = (a[:, 2] - a[:, 0]).clamp_min(0) * (a[:, 3] - a[:, 1]).clamp_min(0)
    area_b = (b[:, 2] - b[:, 0]).clamp_min(0) * (b[:, 3] - b[:, 1]).clamp_min(0)
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    inter = (rb - lt).clamp_min(0).prod(1)
    union = area_a + area_b - inter
    iou = inter / (union + eps)
    hull = (torch.maximum(a[:, 2:], b[:, 2:]) - torch.minimum(a[:, :2], b[:, :2])).clamp_min(0).prod(1)
    return iou - (hull - union) / (hull + eps)


def loss_2d(pred: GroundingPrediction, tgt: Targets, weights: LossWeights = LossWeights(),
            gamma: float = 2.0, alpha: float = 0.25) -> tuple[Tensor, dict[str, Tensor]]:
    l_cls = focal_loss(pred.class_logits, tgt.class_idx, gamma, alpha)
    l_lrtb = (pred.lrtb - tgt.lrtb).abs().sum(1).mean()
    box = lrtb_to_box(pred.xy3d, pred.lrtb)
    l_giou = (1.0 - giou(box, tgt.box2d)).mean()
    l_xy = (pred.xy3d - tgt.xy3d).abs().sum(1).mean()
    total = weights.cls * l_cls + weights.lrtb * l_lrtb + weights.giou * l_giou + weights.xy3d * l_xy
    return total, {"cls": l_cls, "lrtb": l_lrtb, "giou": l_giou, "xy3d": l_xy}


def size_loss(size: Tensor, gt: Tensor) -> Tensor:
    if bool((gt <= 0).any()):
        raise ValueError("ground-truth dimensions must be positive")
    return ((size - gt).abs() / gt).sum(1).mean()


def multibin_loss(logits: Tensor, residuals: Tensor, gt_bin: Tensor, gt_res: Tensor) -> Tensor:
    """Bin cross-entropy plus L1 on the (sin, cos) residual of the ground-truth bin."""
    ce = F.cross_entropy(logits, gt_bin)
    res = residuals.gather(1, gt_bin[:, None, None].expand(-1, 1, 2))[:, 0]
    return ce + (res - gt_res).abs().sum(1).mean()


def laplacian_depth_loss(d_reg: Tensor, log_sigma: Tensor, d_gt: Tensor) -> Tensor:
    return (SQRT2 * torch.exp(-log_sigma) * (d_gt - d_reg).abs() + log_sigma).mean()


def loss_3d(pred: GroundingPrediction, tgt: Targets, depth: Tensor | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """``depth`` is the depth the Laplacian term supervises; defaults to the regressed d_reg."""
    l_size = size_loss(pred.size3d, tgt.size3d)
    l_orient = multibin_loss(pred.orient_logits, pred.orient_residuals, tgt.orient_bin, tgt.orient_residual)
    l_depth = laplacian_depth_loss(pred.d_reg if depth is None else depth, pred.log_sigma, tgt.depth)
    return l_size + l_orient + l_depth, {"size3d": l_size, "orient": l_orient, "depth": l_depth}


def loss_dmap(logits: Tensor, gt: Tensor, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean per-cell focal loss over K+1 classes. logits: (B, K+1, h, w); gt: (B, h, w)."""
    if logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError(f"depth map shapes differ: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    return focal_loss(logits.movedim(1, -1), gt, gamma, alpha)


def loss_overall(pred: GroundingPrediction, tgt: Targets, depth_logits: Tensor,
                 weights: LossWeights = LossWeights(), gamma: float = 2.0, alpha: float = 0.25,
                 d_pred: Tensor | None = None) -> LossBreakdown:
    """Weighted 2D group + 3D group + depth-map term.

    Pass the fused ``d_pred`` to put the depth term on the final depth, so its
    gradient also reaches the depth map at the sampled location.
    """
    l2, c2 = loss_2d(pred, tgt, weights, gamma, alpha)
    l3, c3 = loss_3d(pred, tgt, d_pred)
    ld = loss_dmap(depth_logits, tgt.depth_map, gamma, alpha)
    return LossBreakdown(**c2, **c3, dmap=ld, total=l2 + l3 + ld, loss_2d=l2, loss_3d=l3)

