"""Frozen coarse segmenter abstraction: a small convolutional encoder/decoder
pair with the fixed tensor contract (256x64x64 embeddings, 1x256x256 logits),
plus a persistent on-disk embedding cache.
"""

from __future__ import annotations

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .prompt_codec import IMAGE_HW, MAP_HW, Click

EMB_SHAPE = (256, 64, 64)
EMB_GRID = 64
CLICK_TOKEN_DIM = 8
CLICK_SIGMA = 2.0

CACHE_MAGIC = b"SEMB"
CACHE_VERSION = 1
# magic(4) + version(u32) + 3 dims(u32) + elem width(u32) + sha256(32)
CACHE_HEADER = struct.Struct("<4sIIIII32s")


@dataclass
class EmbeddingMap:
    data: torch.Tensor
    image_key: str

    def __post_init__(self):
        if tuple(self.data.shape) != EMB_SHAPE:
            raise ValueError(f"embedding must be {EMB_SHAPE}, got {tuple(self.data.shape)}")


@dataclass
class CoarsePrediction:
    logits: torch.Tensor
    source: str

    @property
    def mask(self) -> np.ndarray:
        return (torch.sigmoid(self.logits) > 0.5).squeeze(0).cpu().numpy()


def image_key_of(image: torch.Tensor | np.ndarray | bytes) -> str:
    """SHA-256 content hash of the raw image bytes."""
    if isinstance(image, bytes):
        raw = image
    else:
        arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
        raw = np.ascontiguousarray(arr).tobytes()
    return hashlib.sha256(raw).hexdigest()


class ToyEncoder(nn.Module):
    """Four stride-2 stages: 3x1024x1024 -> 256x64x64."""

    def __init__(self):
        super().__init__()
        self.stages = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 256, 3, stride=2, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.stages(image)


def render_click_tokens(
    clicks: list[Click],
    polarity_emb: nn.Embedding,
    grid: int = EMB_GRID,
    image_hw: tuple[int, int] = IMAGE_HW,
    sigma: float = CLICK_SIGMA,
) -> torch.Tensor:
    """Scatter per-click coordinate/polarity embeddings onto the feature grid.

    Each click contributes its polarity embedding weighted by a small Gaussian
    around its scaled location, keeping the prompt representation sparse while
    giving the decoder spatial locality.
    """
    dim = polarity_emb.embedding_dim
    device = polarity_emb.weight.device
    dtype = polarity_emb.weight.dtype
    out = torch.zeros(dim, grid, grid, dtype=dtype, device=device)
    if not clicks:
        return out
    rows = torch.arange(grid, dtype=dtype, device=device)[:, None]
    cols = torch.arange(grid, dtype=dtype, device=device)[None, :]
    sy, sx = grid / image_hw[0], grid / image_hw[1]
    for click in clicks:
        cy, cx = click.y * sy, click.x * sx
        kernel = torch.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma * sigma))
        vec = polarity_emb(torch.tensor(0 if click.is_positive else 1, device=device))
        out = out + vec[:, None, None] * kernel[None]
    return out


class ToyDecoder(nn.Module):
    """Lightweight decoder from embeddings + sparse click tokens to 1x256x256 logits."""

    def __init__(self, emb_channels: int = 256, channels: int = 64):
        super().__init__()
        self.polarity_emb = nn.Embedding(2, CLICK_TOKEN_DIM)
        self.emb_proj = nn.Conv2d(emb_channels, channels, 1)
        self.click_proj = nn.Conv2d(CLICK_TOKEN_DIM, channels, 3, padding=1)
        self.prev_proj = nn.Conv2d(1, channels, 3, padding=1)
        self.coord_proj = nn.Conv2d(2, channels, 1)
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
        )
        self.up1 = nn.Conv2d(channels, 32, 3, padding=1)
        self.up2 = nn.Conv2d(32, 16, 3, padding=1)
        self.head = nn.Conv2d(16, 1, 1)

    def _coord_grid(self, grid: int, dtype, device) -> torch.Tensor:
        ys = torch.linspace(-1.0, 1.0, grid, dtype=dtype, device=device)
        gy, gx = torch.meshgrid(ys, ys, indexing="ij")
        return torch.stack([gy, gx]).unsqueeze(0)

    def forward(
        self,
        emb: torch.Tensor,
        clicks: list[Click],
        prev_logits: torch.Tensor | None = None,
    ) -> torch.Tensor:
        x = emb.unsqueeze(0)
        h = self.emb_proj(x)
        tokens = render_click_tokens(clicks, self.polarity_emb)
        h = h + self.click_proj(tokens.unsqueeze(0))
        if prev_logits is not None:
            prev = F.avg_pool2d(prev_logits.unsqueeze(0), kernel_size=4)
            h = h + self.prev_proj(torch.tanh(prev / 4.0))
        h = h + self.coord_proj(self._coord_grid(emb.shape[-1], emb.dtype, emb.device))
        h = F.relu(h)
        h = h + self.trunk(h)
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.relu(self.up1(h))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.relu(self.up2(h))
        return self.head(h).squeeze(0)


class ToyBackbone(nn.Module):
    """Trainable stand-in honoring the frozen-segmenter tensor contract."""

    name = "toy"

    def __init__(self):
        super().__init__()
        self.encoder = ToyEncoder()
        self.decoder = ToyDecoder()
        self.encode_calls = 0

    def encode_image(self, image: torch.Tensor) -> EmbeddingMap:
        if tuple(image.shape) != (3, *IMAGE_HW):
            raise ValueError(f"image must be 3x{IMAGE_HW[0]}x{IMAGE_HW[1]}, got {tuple(image.shape)}")
        self.encode_calls += 1
        # encoder is frozen in both training stages; never needs gradients
        with torch.no_grad():
            data = self.encoder(image.unsqueeze(0)).squeeze(0)
        return EmbeddingMap(data=data, image_key=image_key_of(image))

    def decode_coarse(
        self,
        emb: EmbeddingMap,
        clicks: list[Click],
        prev_logits: torch.Tensor | None = None,
        expected_key: str | None = None,
    ) -> CoarsePrediction:
        if expected_key is not None and emb.image_key != expected_key:
            raise SessionConsistencyError(
                f"embedding key {emb.image_key[:8]} does not match session image {expected_key[:8]}"
            )
        logits = self.decoder(emb.data, clicks, prev_logits)
        if tuple(logits.shape) != (1, *MAP_HW):
            raise RuntimeError(f"decoder produced {tuple(logits.shape)}, expected (1, {MAP_HW[0]}, {MAP_HW[1]})")
        return CoarsePrediction(logits=logits, source=self.name)


class SessionConsistencyError(RuntimeError):
    pass


class CacheChecksumError(RuntimeError):
    pass


class EmbeddingCache:
    """One file per image hash under <root>/emb/<first2>/<hash>.emb.

    Record format: fixed header (magic, version, shape, element width,
    payload sha256) followed by the raw little-endian float32 tensor bytes.
    Corrupt entries are treated as misses with a warning.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.root / "emb" / key[:2] / f"{key}.emb"

    def put(self, key: str, emb: EmbeddingMap) -> Path:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = emb.data.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        header = CACHE_HEADER.pack(
            CACHE_MAGIC, CACHE_VERSION, *EMB_SHAPE, 4, hashlib.sha256(payload).digest()
        )
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(header + payload)
        os.replace(tmp, path)
        return path

    def get(self, key: str) -> EmbeddingMap | None:
        path = self._path(key)
        if not path.exists():
            self.misses += 1
            return None
        raw = path.read_bytes()
        try:
            magic, version, c, h, w, width, digest = CACHE_HEADER.unpack(raw[: CACHE_HEADER.size])
            if magic != CACHE_MAGIC or version != CACHE_VERSION:
                raise CacheChecksumError(f"bad header in {path}")
            payload = raw[CACHE_HEADER.size :]
            if hashlib.sha256(payload).digest() != digest:
                raise CacheChecksumError(f"checksum mismatch in {path}")
            data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
        except (CacheChecksumError, struct.error, ValueError) as exc:
            warnings.warn(f"corrupt embedding cache entry treated as miss: {exc}")
            self.misses += 1
            return None
        self.hits += 1
        return EmbeddingMap(data=torch.from_numpy(data), image_key=key)

    def __len__(self) -> int:
        emb_root = self.root / "emb"
        if not emb_root.exists():
            return 0
        return sum(1 for _ in emb_root.glob("*/*.emb"))


class CachingBackbone:
    """Encode-through wrapper: serves embeddings from the cache when present."""

    def __init__(self, backbone: ToyBackbone, cache: EmbeddingCache):
        self.backbone = backbone
        self.cache = cache
        self.encode_calls = 0

    def encode_image(self, image: torch.Tensor) -> EmbeddingMap:
        key = image_key_of(image)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        self.encode_calls += 1
        emb = self.backbone.encode_image(image)
        self.cache.put(key, emb)
        return emb

    def decode_coarse(self, *args, **kwargs) -> CoarsePrediction:
        return self.backbone.decode_coarse(*args, **kwargs)
