"""Training losses: normalized focal loss, error-weighted NFL, dice, BCE.

All losses take raw logits and binary float targets of the same shape and
return scalar tensors. p_t is clamped to [1e-7, 1 - 1e-7] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

EPS = 1e-7
ERROR_REGION_WEIGHT = 1.5
DEFAULT_GAMMA = 2.0
DICE_SMOOTH = 1.0


def _pt(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits)
    pt = p * target + (1.0 - p) * (1.0 - target)
    return pt.clamp(EPS, 1.0 - EPS)


def nfl(logits: torch.Tensor, target: torch.Tensor, gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """Focal loss with per-pixel weights (1 - p_t)^gamma normalized to sum to 1."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    pt = _pt(logits, target)
    w = (1.0 - pt) ** gamma
    w = w / w.sum()
    return -(w * torch.log(pt)).sum()


def weighted_nfl(
    logits: torch.Tensor,
    target: torch.Tensor,
    error_region: torch.Tensor,
    weight: float = ERROR_REGION_WEIGHT,
    gamma: float = DEFAULT_GAMMA,
) -> torch.Tensor:
    """NFL with focal weights multiplied by `weight` inside the error region
    before normalization. A spatially constant region cancels out exactly."""
    if logits.shape != target.shape or logits.shape != error_region.shape:
        raise ValueError("shape mismatch between logits/target/error_region")
    pt = _pt(logits, target)
    w = (1.0 - pt) ** gamma
    w = w * (1.0 + (weight - 1.0) * error_region)
    w = w / w.sum()
    return -(w * torch.log(pt)).sum()


def dice(logits: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    p = torch.sigmoid(logits)
    num = 2.0 * (p * target).sum() + smooth
    den = p.sum() + target.sum() + smooth
    return 1.0 - num / den


def bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    return -torch.log(_pt(logits, target)).mean()


def make_error_target(coarse_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Binary mask where the thresholded coarse prediction disagrees with gt."""
    if coarse_logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(coarse_logits.shape)} vs {tuple(gt.shape)}")
    pred = torch.sigmoid(coarse_logits) > 0.5
    return (pred ^ (gt > 0.5)).to(coarse_logits.dtype)


@dataclass
class LossBundle:
    nfl: torch.Tensor
    dice_g: torch.Tensor
    bce_g: torch.Tensor
    bnfl_g: torch.Tensor
    dice_p: torch.Tensor
    bce_p: torch.Tensor
    bnfl_p: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.nfl + self.dice_g + self.bce_g + self.bnfl_g + self.dice_p + self.bce_p + self.bnfl_p

    def to_dict(self) -> dict[str, float]:
        d = {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}
        d["total"] = float(self.total.detach())
        return d


def total_loss(
    stage: int,
    *,
    coarse_logits: torch.Tensor,
    gt: torch.Tensor,
    global_error_logits: torch.Tensor | None = None,
    global_refined_logits: torch.Tensor | None = None,
    patch_error_logits: torch.Tensor | None = None,
    patch_refined_logits: torch.Tensor | None = None,
    patch_coarse_logits: torch.Tensor | None = None,
    patch_gt: torch.Tensor | None = None,
    gamma: float = DEFAULT_GAMMA,
) -> LossBundle:
    """Assemble the full loss bundle for a training step.

    Stage 1 supervises the coarse decoder with NFL only. Stage 2 adds the
    global terms (error head vs the coarse-vs-gt disagreement target, refined
    logits vs gt with error-region weighting) and, when the patch branch ran,
    the analogous local terms in window space. Patch terms are zero when the
    selector skipped.
    """
    zero = coarse_logits.new_zeros(())
    l_nfl = nfl(coarse_logits, gt, gamma)
    if stage == 1:
        return LossBundle(l_nfl, zero, zero, zero, zero, zero, zero)
    if stage != 2:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if global_error_logits is None or global_refined_logits is None:
        raise ValueError("stage 2 requires global_error_logits and global_refined_logits")

    err_target = make_error_target(coarse_logits.detach(), gt)
    l_dice_g = dice(global_error_logits, err_target)
    l_bce_g = bce(global_error_logits, err_target)
    l_bnfl_g = weighted_nfl(global_refined_logits, gt, err_target, gamma=gamma)

    patch_inputs = (patch_error_logits, patch_refined_logits, patch_coarse_logits, patch_gt)
    if any(t is not None for t in patch_inputs):
        if any(t is None for t in patch_inputs):
            raise ValueError("patch terms require patch_error_logits, patch_refined_logits, patch_coarse_logits and patch_gt")
        err_target_p = make_error_target(patch_coarse_logits.detach(), patch_gt)
        l_dice_p = dice(patch_error_logits, err_target_p)
        l_bce_p = bce(patch_error_logits, err_target_p)
        l_bnfl_p = weighted_nfl(patch_refined_logits, patch_gt, err_target_p, gamma=gamma)
    else:
        l_dice_p = l_bce_p = l_bnfl_p = zero

    return LossBundle(l_nfl, l_dice_g, l_bce_g, l_bnfl_g, l_dice_p, l_bce_p, l_bnfl_p)
