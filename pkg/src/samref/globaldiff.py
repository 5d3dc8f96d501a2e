"""Global refinement: residual blocks with embedding re-injection, then
error/detail heads whose outputs gate a blend with the coarse logits.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_N_BLOCKS = 3
ERROR_PROB_THRESHOLD = 0.5


class EmbeddingUpscaler(nn.Module):
    """Upscale 256x64x64 backbone embeddings to 64x256x256 in two x2 stages.

    Each stage is bilinear x2 followed by a pointwise channel reduction
    (256 -> 128 -> 64) and ReLU after the first stage.
    """

    def __init__(self, in_channels: int = 256, mid_channels: int = 128, out_channels: int = 64):
        super().__init__()
        self.reduce1 = nn.Conv2d(in_channels, mid_channels, 1)
        self.reduce2 = nn.Conv2d(mid_channels, out_channels, 1)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(emb, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.relu(self.reduce1(x))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.reduce2(x)


class ResBasicBlock(nn.Module):
    """conv3x3 -> norm -> ReLU -> conv3x3 -> norm, additive skip, ReLU.

    Stride 1 with no resampling, so the spatial shape is invariant.
    """

    def __init__(self, channels: int = 64, groups: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + x)


class GlobalRefiner(nn.Module):
    """Iterated residual blocks with embedding re-injection plus the two heads."""

    def __init__(self, channels: int = 64, n_blocks: int = DEFAULT_N_BLOCKS, head_channels: int = 32):
        super().__init__()
        if n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
        self.blocks = nn.ModuleList(ResBasicBlock(channels) for _ in range(n_blocks))
        self.reduce = nn.Conv2d(channels, head_channels, 3, padding=1)
        self.error_head = nn.Conv2d(head_channels, 1, 1)
        self.detail_head = nn.Conv2d(head_channels, 1, 1)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def extract(self, f0: torch.Tensor, emb_up: torch.Tensor) -> torch.Tensor:
        """F(i) = ResBlock_i(F(i-1) + emb_up) for i in 1..N."""
        f = f0
        for block in self.blocks:
            f = block(f + emb_up)
        return f

    def heads(self, fn: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.reduce(fn))
        return self.error_head(h), self.detail_head(h)

    def forward(self, f0: torch.Tensor, emb_up: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        fn = self.extract(f0, emb_up)
        error_logits, detail_logits = self.heads(fn)
        return error_logits, detail_logits, fn


def error_detail_blend(
    error_logits: torch.Tensor,
    detail_logits: torch.Tensor,
    base_logits: torch.Tensor,
) -> torch.Tensor:
    """out = sigmoid(error) * detail + (1 - sigmoid(error)) * base, in logit space."""
    if error_logits.shape != detail_logits.shape or error_logits.shape != base_logits.shape:
        raise ValueError(
            f"shape mismatch: {tuple(error_logits.shape)}, {tuple(detail_logits.shape)}, {tuple(base_logits.shape)}"
        )
    gate = torch.sigmoid(error_logits)
    return gate * detail_logits + (1.0 - gate) * base_logits


def error_region_area(error_logits: torch.Tensor, threshold: float = ERROR_PROB_THRESHOLD) -> int:
    """Pixel count where sigmoid(error_logits) exceeds the probability threshold."""
    return int((torch.sigmoid(error_logits) > threshold).sum())
