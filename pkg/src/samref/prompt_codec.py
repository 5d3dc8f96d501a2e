"""Click prompt encoding and image-prompt fusion.

Clicks live in image coordinates (1024x1024). They are rasterized as small
binary disks on a 256x256 map, stacked with the coarse logits into a dense
3-channel prompt map, and fused with the image through two linear conv stems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

IMAGE_HW = (1024, 1024)
MAP_HW = (256, 256)
CLICK_SCALE = MAP_HW[0] / IMAGE_HW[0]
DISK_RADIUS = 5
FUSE_CHANNELS = 64

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class Click:
    """A single user click in image coordinates (x = column, y = row)."""

    x: int
    y: int
    polarity: str
    index: int

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be 'positive' or 'negative', got {self.polarity!r}")

    @property
    def is_positive(self) -> bool:
        return self.polarity == POSITIVE

    def map_coords(self, scale: float = CLICK_SCALE) -> tuple[int, int]:
        """(row, col) of the click on the prompt map, round-to-nearest."""
        return int(round(self.y * scale)), int(round(self.x * scale))


def encode_clicks_to_disks(
    clicks: list[Click],
    radius: float = DISK_RADIUS,
    out_hw: tuple[int, int] = MAP_HW,
    scale: float = CLICK_SCALE,
) -> np.ndarray:
    """Rasterize clicks as binary disks, one channel per polarity.

    Pixel (r, c) of a channel is 1 iff its Euclidean distance to any
    same-polarity click center (scaled into map coords) is <= radius.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    h, w = out_hw
    img_h, img_w = h / scale, w / scale
    out = np.zeros((2, h, w), dtype=np.float32)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for click in clicks:
        if not (0 <= click.x < img_w and 0 <= click.y < img_h):
            raise ValueError(f"click ({click.x}, {click.y}) outside image bounds {img_w}x{img_h}")
        cr, cc = click.map_coords(scale)
        ch = 0 if click.is_positive else 1
        d2 = (rows - cr) ** 2 + (cols - cc) ** 2
        out[ch][d2 <= radius * radius] = 1.0
    return out


def assemble_dense_map(pos: np.ndarray, neg: np.ndarray, coarse_logits: np.ndarray) -> np.ndarray:
    """Stack (positive disks, negative disks, coarse logits) into a 3x256x256 map."""
    for name, arr in (("pos", pos), ("neg", neg), ("coarse_logits", coarse_logits)):
        a = np.asarray(arr)
        if a.squeeze().shape != MAP_HW:
            raise ValueError(f"{name} must be {MAP_HW}, got {a.shape}")
    return np.stack(
        [
            np.asarray(pos, dtype=np.float32).reshape(MAP_HW),
            np.asarray(neg, dtype=np.float32).reshape(MAP_HW),
            np.asarray(coarse_logits, dtype=np.float32).reshape(MAP_HW),
        ]
    )


class ImagePromptFusion(nn.Module):
    """Linear conv stems aligning the image (x4 downscale) and the dense prompt map.

    Both stems are purely linear (no activations), so the fused output is
    exactly stem_img(image) + stem_prompt(dense).
    """

    def __init__(self, channels: int = FUSE_CHANNELS):
        super().__init__()
        self.image_stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.Conv2d(32, channels, 1),
        )
        self.prompt_stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=1, padding=1),
            nn.Conv2d(32, channels, 1),
        )

    def forward(self, image: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
        return self.image_stem(image) + self.prompt_stem(dense)


def fuse_image_prompt(image: torch.Tensor, dense: torch.Tensor, fusion: ImagePromptFusion) -> torch.Tensor:
    """Fuse an unbatched 3x1024x1024 image with a 3x256x256 dense map into 64x256x256."""
    if image.shape != (3, *IMAGE_HW):
        raise ValueError(f"image must be 3x{IMAGE_HW[0]}x{IMAGE_HW[1]}, got {tuple(image.shape)}")
    if dense.shape != (3, *MAP_HW):
        raise ValueError(f"dense map must be 3x{MAP_HW[0]}x{MAP_HW[1]}, got {tuple(dense.shape)}")
    if not (torch.isfinite(image).all() and torch.isfinite(dense).all()):
        raise ValueError("non-finite values in fusion inputs")
    return fusion(image.unsqueeze(0), dense.unsqueeze(0)).squeeze(0)
