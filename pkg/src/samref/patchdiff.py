"""Local patch refinement: window finding from the prediction diff, RoI crop,
local error/detail heads, paste-back, and the dynamic run/skip selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .prompt_codec import CLICK_SCALE, MAP_HW, Click

DEFAULT_EXPAND_RATIO = 1.4
PATCH_HW = (128, 128)
MIN_WINDOW = 4

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass(frozen=True)
class PatchWindow:
    """Inclusive-exclusive box in 256x256 map coordinates."""

    row0: int
    col0: int
    row1: int
    col1: int
    expand_ratio: float = DEFAULT_EXPAND_RATIO

    def __post_init__(self):
        if not (0 <= self.row0 < self.row1 <= MAP_HW[0] and 0 <= self.col0 < self.col1 <= MAP_HW[1]):
            raise ValueError(f"invalid window {self}")

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    def contains(self, row: int, col: int) -> bool:
        return self.row0 <= row < self.row1 and self.col0 <= col < self.col1


@dataclass
class SelectorState:
    prev_error_area: int | None = None
    curr_error_area: int = 0


def dynamic_select(state: SelectorState) -> str:
    """Run the patch branch iff the error-region area strictly increased.

    Returns "run" or "skip" and rolls curr_error_area into prev_error_area.
    """
    run = state.prev_error_area is not None and state.curr_error_area > state.prev_error_area
    state.prev_error_area = state.curr_error_area
    return "run" if run else "skip"


def _clip_span(start: int, stop: int, min_len: int, limit: int) -> tuple[int, int]:
    """Clip [start, stop) to [0, limit), shifting inward to preserve min_len."""
    start, stop = max(start, 0), min(stop, limit)
    if stop - start < min_len:
        if start == 0:
            stop = min(min_len, limit)
        else:
            start = max(stop - min_len, 0)
    return start, stop


def _expand_and_clip(r0: int, c0: int, r1: int, c1: int, ratio: float, hw: tuple[int, int]) -> tuple[int, int, int, int]:
    h, w = r1 - r0, c1 - c0
    cy, cx = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    nh, nw = max(h * ratio, MIN_WINDOW), max(w * ratio, MIN_WINDOW)
    r0n = int(math.floor(cy - nh / 2.0))
    r1n = int(math.ceil(cy + nh / 2.0))
    c0n = int(math.floor(cx - nw / 2.0))
    c1n = int(math.ceil(cx + nw / 2.0))
    r0n, r1n = _clip_span(r0n, r1n, MIN_WINDOW, hw[0])
    c0n, c1n = _clip_span(c0n, c1n, MIN_WINDOW, hw[1])
    return r0n, c0n, r1n, c1n


def find_refine_window(
    refined_mask: np.ndarray,
    prev_mask: np.ndarray,
    last_click: Click,
    ratio: float = DEFAULT_EXPAND_RATIO,
    scale: float = CLICK_SCALE,
) -> PatchWindow | None:
    """Box around the largest connected component of refined XOR prev.

    The tight bounding box of that component, unioned with the last click's
    map pixel, is expanded symmetrically about its center by `ratio` and
    clipped to bounds. Returns None when the diff is empty. Ties among
    equal-size components are broken by smallest bounding-box (row0, col0).
    """
    refined = np.asarray(refined_mask, dtype=bool)
    prev = np.asarray(prev_mask, dtype=bool)
    if refined.shape != prev.shape:
        raise ValueError(f"mask shape mismatch: {refined.shape} vs {prev.shape}")
    hw = refined.shape
    diff = refined ^ prev
    if not diff.any():
        return None
    labels, n = ndimage.label(diff, structure=FOUR_CONN)
    sizes = ndimage.sum_labels(diff, labels, index=np.arange(1, n + 1))
    boxes = ndimage.find_objects(labels)
    best = None
    for i in range(n):
        sr, sc = boxes[i]
        key = (-sizes[i], sr.start, sc.start)
        if best is None or key < best[0]:
            best = (key, (sr.start, sc.start, sr.stop, sc.stop))
    r0, c0, r1, c1 = best[1]
    cr, cc = last_click.map_coords(scale)
    cr = min(max(cr, 0), hw[0] - 1)
    cc = min(max(cc, 0), hw[1] - 1)
    r0, c0 = min(r0, cr), min(c0, cc)
    r1, c1 = max(r1, cr + 1), max(c1, cc + 1)
    r0, c0, r1, c1 = _expand_and_clip(r0, c0, r1, c1, ratio, hw)
    return PatchWindow(r0, c0, r1, c1, expand_ratio=ratio)


def _roi_grid(window: PatchWindow, src_hw: tuple[int, int], out_hw: tuple[int, int], dtype, device) -> torch.Tensor:
    out_h, out_w = out_hw
    ys = window.row0 + (torch.arange(out_h, dtype=dtype, device=device) + 0.5) * window.height / out_h - 0.5
    xs = window.col0 + (torch.arange(out_w, dtype=dtype, device=device) + 0.5) * window.width / out_w - 0.5
    # normalize to [-1, 1] under align_corners=False
    ys = (2.0 * ys + 1.0) / src_hw[0] - 1.0
    xs = (2.0 * xs + 1.0) / src_hw[1] - 1.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).unsqueeze(0)


def _inflate_window(window: PatchWindow) -> PatchWindow:
    if window.height >= MIN_WINDOW and window.width >= MIN_WINDOW:
        return window
    r0, c0, r1, c1 = _expand_and_clip(window.row0, window.col0, window.row1, window.col1, 1.0, MAP_HW)
    return PatchWindow(r0, c0, r1, c1, expand_ratio=window.expand_ratio)


def roi_crop(
    tensor: torch.Tensor,
    window: PatchWindow,
    out_hw: tuple[int, int] = PATCH_HW,
) -> torch.Tensor:
    """Bilinear RoI resampling of a CxHxW tensor to C x out_hw.

    Sub-pixel alignment follows the align-corners=false convention: output
    pixel j samples source coordinate origin + (j + 0.5) * extent / out - 0.5,
    with border clamping.
    """
    if tensor.dim() != 3:
        raise ValueError(f"expected CxHxW tensor, got shape {tuple(tensor.shape)}")
    window = _inflate_window(window)
    src_hw = (tensor.shape[1], tensor.shape[2])
    grid = _roi_grid(window, src_hw, out_hw, tensor.dtype, tensor.device)
    out = F.grid_sample(
        tensor.unsqueeze(0), grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out.squeeze(0)


def paste_back(global_logits: torch.Tensor, local_refined: torch.Tensor, window: PatchWindow | None) -> torch.Tensor:
    """Resample the local tensor to the window extent and write it into a copy
    of global_logits. Pixels outside the window are bit-identical to the input."""
    if window is None:
        return global_logits.clone()
    window = _inflate_window(window)
    resized = F.interpolate(
        local_refined.unsqueeze(0), size=(window.height, window.width), mode="bilinear", align_corners=False
    ).squeeze(0)
    out = global_logits.clone()
    out[:, window.row0 : window.row1, window.col0 : window.col1] = resized
    return out


class LocalHeads(nn.Module):
    """Local error/detail heads, same family as the global heads but separate params."""

    def __init__(self, channels: int = 64, head_channels: int = 32):
        super().__init__()
        self.reduce = nn.Conv2d(channels, head_channels, 3, padding=1)
        self.error_head = nn.Conv2d(head_channels, 1, 1)
        self.detail_head = nn.Conv2d(head_channels, 1, 1)

    def forward(self, local_feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.reduce(local_feat))
        return self.error_head(h), self.detail_head(h)


def local_refine(
    local_feat: torch.Tensor,
    local_coarse_logits: torch.Tensor,
    heads: LocalHeads,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run the local heads and blend against the local coarse logits.

    Returns (local_error_logits, local_detail_logits, local_refined_logits).
    """
    from .globaldiff import error_detail_blend

    error_logits, detail_logits = heads(local_feat.unsqueeze(0))
    error_logits = error_logits.squeeze(0)
    detail_logits = detail_logits.squeeze(0)
    refined = error_detail_blend(error_logits, detail_logits, local_coarse_logits)
    return error_logits, detail_logits, refined
