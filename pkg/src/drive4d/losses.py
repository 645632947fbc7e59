"""Training objectives: text cross-entropy, focal + Lovasz occupancy loss,
weighted flow L1, plan L1, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    llm: float = 1.0
    occ: float = 1.0
    flow: float = 1.0
    action: float = 1.0
    flow_static: float = 0.01
    flow_dynamic: float = 1.0

    def __post_init__(self):
        for name in ("llm", "occ", "flow", "action", "flow_static", "flow_dynamic"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be nonnegative")


def loss_llm(logits: torch.Tensor, target_ids: torch.Tensor,
             pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over unpadded targets.

    logits: [..., T, V] aligned so logits[..., i, :] predicts target_ids[..., i];
    pad_mask: True where the target counts.
    """
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = target_ids.reshape(-1)
    flat_mask = pad_mask.reshape(-1)
    if not flat_mask.any():
        return logits.sum() * 0.0
    ce = F.cross_entropy(flat_logits[flat_mask], flat_targets[flat_mask])
    return ce


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.25) -> torch.Tensor:
    """Multi-class focal loss, mean over elements.

    With gamma=0 and alpha=1 this is exactly cross-entropy.
    """
    logp = F.log_softmax(logits, dim=-1)
    logp_t = torch.gather(logp, -1, target.unsqueeze(-1)).squeeze(-1)
    p_t = logp_t.exp()
    return (-alpha * (1.0 - p_t) ** gamma * logp_t).mean()


def _lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if gt_sorted.numel() > 1:
        jaccard = jaccard.clone()
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Lovasz-softmax over classes present in the target.

    probs: [M, C] softmax probabilities; target: [M] class indices.
    """
    if probs.dim() != 2:
        probs = probs.reshape(-1, probs.shape[-1])
        target = target.reshape(-1)
    losses = []
    for c in range(probs.shape[1]):
        fg = (target == c).to(probs.dtype)
        if fg.sum() == 0:
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        grad = _lovasz_grad(fg[perm])
        losses.append(torch.dot(errors_sorted, grad))
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


def loss_occ(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
             alpha: float = 0.25) -> torch.Tensor:
    """Focal + Lovasz-softmax over all voxels.

    logits: [..., C]; target: integer labels of matching leading shape.
    """
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_target = target.reshape(-1)
    focal = focal_loss(flat_logits, flat_target, gamma=gamma, alpha=alpha)
    lovasz = lovasz_softmax(torch.softmax(flat_logits, dim=-1), flat_target)
    return focal + lovasz


def loss_flow(pred_velocity: torch.Tensor, gt_velocity: torch.Tensor,
              dynamic_mask: torch.Tensor, occupied_mask: torch.Tensor,
              w_static: float = 0.01, w_dynamic: float = 1.0) -> torch.Tensor:
    """Weighted L1 over occupied voxels; free space carries no flow signal."""
    if pred_velocity.shape != gt_velocity.shape:
        raise ValueError("flow shapes disagree")
    occ = occupied_mask.bool()
    if not occ.any():
        return pred_velocity.sum() * 0.0
    err = (pred_velocity - gt_velocity).abs().sum(dim=-1)
    weights = torch.where(dynamic_mask.bool(), err.new_tensor(w_dynamic),
                          err.new_tensor(w_static))
    return (weights * err)[occ].mean()


def loss_action(pred_plan: torch.Tensor, gt_plan: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the 12 waypoint scalars."""
    if pred_plan.shape != gt_plan.shape:
        raise ValueError("plan shapes disagree")
    return (pred_plan - gt_plan).abs().mean()


def loss_total(llm: torch.Tensor, occ: torch.Tensor, flow: torch.Tensor,
               action: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return (weights.llm * llm + weights.occ * occ
            + weights.flow * flow + weights.action * action)
