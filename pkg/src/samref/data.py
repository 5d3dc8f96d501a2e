"""Synthetic shape dataset: layered anti-aliased polygons/ellipses/rings with
holes and thin protrusions, plus the on-disk dataset layout
(data/<split>/images/<id>.png, data/<split>/masks/<id>.png).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .prompt_codec import IMAGE_HW, MAP_HW

SUPERSAMPLE = 2
HOLE_FRACTION = 0.5
PROTRUSION_FRACTION = 0.5
MIN_FOREGROUND = 64


@dataclass
class SyntheticSample:
    image: np.ndarray  # HxWx3 uint8
    gt: np.ndarray  # HxW bool
    meta: dict


def _polygon_points(rng: np.random.Generator, cx: float, cy: float, radius: float, n: int) -> list[tuple[float, float]]:
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = radius * rng.uniform(0.55, 1.0, n)
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]


def _draw_shape(draw: ImageDraw.ImageDraw, rng: np.random.Generator, cx, cy, radius, fill) -> str:
    kind = rng.choice(["ellipse", "polygon"])
    if kind == "ellipse":
        rx, ry = radius * rng.uniform(0.6, 1.0), radius * rng.uniform(0.6, 1.0)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=fill)
    else:
        draw.polygon(_polygon_points(rng, cx, cy, radius, int(rng.integers(5, 9))), fill=fill)
    return str(kind)


def generate_synthetic_sample(seed: int, index: int, image_hw: tuple[int, int] = IMAGE_HW) -> SyntheticSample:
    """Render one sample deterministically from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    h, w = image_hw
    ss = SUPERSAMPLE
    H, W = h * ss, w * ss

    # background: vertical color gradient plus distractor shapes
    top = rng.integers(20, 120, 3)
    bot = rng.integers(20, 120, 3)
    ramp = np.linspace(0, 1, H)[:, None, None]
    bg = (top[None, None, :] * (1 - ramp) + bot[None, None, :] * ramp).astype(np.uint8)
    img = Image.fromarray(np.broadcast_to(bg, (H, W, 3)).copy())
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(2, 5))):
        color = tuple(int(v) for v in rng.integers(30, 150, 3))
        _draw_shape(draw, rng, rng.uniform(0, W), rng.uniform(0, H), rng.uniform(0.04, 0.12) * W, color)

    # target object: bright shape, optional ring hole(s) and thin protrusions
    target = Image.new("L", (W, H), 0)
    tdraw = ImageDraw.Draw(target)
    cx, cy = rng.uniform(0.3, 0.7) * W, rng.uniform(0.3, 0.7) * H
    radius = rng.uniform(0.10, 0.22) * W
    kind = _draw_shape(tdraw, rng, cx, cy, radius, 255)

    has_protrusion = bool(rng.random() < PROTRUSION_FRACTION)
    if has_protrusion:
        for _ in range(int(rng.integers(1, 4))):
            ang = rng.uniform(0, 2 * math.pi)
            length = radius * rng.uniform(0.8, 1.6)
            thick = max(2 * ss, radius * rng.uniform(0.02, 0.06))
            x0, y0 = cx + 0.3 * radius * math.cos(ang), cy + 0.3 * radius * math.sin(ang)
            x1, y1 = cx + length * math.cos(ang), cy + length * math.sin(ang)
            tdraw.line([x0, y0, x1, y1], fill=255, width=int(thick))

    has_hole = bool(rng.random() < HOLE_FRACTION)
    if has_hole:
        for _ in range(int(rng.integers(1, 3))):
            hang = rng.uniform(0, 2 * math.pi)
            hd = rng.uniform(0.0, 0.4) * radius
            hr = radius * rng.uniform(0.15, 0.35)
            hx, hy = cx + hd * math.cos(hang), cy + hd * math.sin(hang)
            tdraw.ellipse([hx - hr, hy - hr, hx + hr, hy + hr], fill=0)

    tmask = np.array(target) > 127
    color = tuple(int(v) for v in rng.integers(160, 255, 3))
    overlay = np.array(img)
    overlay[tmask] = color
    img = Image.fromarray(overlay)

    image = np.array(img.resize((w, h), Image.BILINEAR))
    gt = np.array(target.resize((w, h), Image.BILINEAR)) > 127
    if gt.sum() < MIN_FOREGROUND:
        # degenerate draw (hole swallowed the shape); redraw a plain disk
        fallback = Image.new("L", (w, h), 0)
        ImageDraw.Draw(fallback).ellipse(
            [cx / ss - radius / ss, cy / ss - radius / ss, cx / ss + radius / ss, cy / ss + radius / ss],
            fill=255,
        )
        gt = np.array(fallback) > 127
        image = image.copy()
        image[gt] = color
        has_hole = False
    meta = {"seed": int(seed), "index": int(index), "kind": kind, "has_hole": has_hole, "has_protrusion": has_protrusion}
    return SyntheticSample(image=image, gt=gt, meta=meta)


def generate_synthetic_dataset(n: int, seed: int) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [generate_synthetic_sample(seed, i) for i in range(n)]


def save_dataset(samples: list[SyntheticSample], out_dir: str | Path, split: str = "train") -> Path:
    root = Path(out_dir) / split
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    metas = {}
    for i, sample in enumerate(samples):
        sid = f"{i:05d}"
        Image.fromarray(sample.image).save(root / "images" / f"{sid}.png")
        Image.fromarray((sample.gt * 255).astype(np.uint8)).save(root / "masks" / f"{sid}.png")
        metas[sid] = sample.meta
    (root / "meta.json").write_text(json.dumps(metas, indent=1, sort_keys=True))
    return root


@dataclass
class DatasetEntry:
    sample_id: str
    image_path: Path
    mask_path: Path
    meta: dict


def load_dataset(split_dir: str | Path) -> list[DatasetEntry]:
    root = Path(split_dir)
    meta_path = root / "meta.json"
    metas = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    entries = []
    for img_path in sorted((root / "images").glob("*.png")):
        sid = img_path.stem
        mask_path = root / "masks" / f"{sid}.png"
        entries.append(DatasetEntry(sid, img_path, mask_path, metas.get(sid, {})))
    if not entries:
        raise FileNotFoundError(f"no images found under {root}/images")
    return entries


def load_image_tensor(path: str | Path) -> torch.Tensor:
    """8-bit RGB PNG -> normalized 3x1024x1024 float tensor in [0, 1]."""
    img = Image.open(path).convert("RGB")
    if img.size != (IMAGE_HW[1], IMAGE_HW[0]):
        img = img.resize((IMAGE_HW[1], IMAGE_HW[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path: str | Path, hw: tuple[int, int] = IMAGE_HW) -> np.ndarray:
    mask = Image.open(path).convert("L")
    if mask.size != (hw[1], hw[0]):
        mask = mask.resize((hw[1], hw[0]), Image.NEAREST)
    return np.asarray(mask) > 127


def mask_to_map(gt: np.ndarray, hw: tuple[int, int] = MAP_HW) -> np.ndarray:
    """Area-downsample a full-resolution binary mask to map resolution (>0.5 vote)."""
    fy, fx = gt.shape[0] // hw[0], gt.shape[1] // hw[1]
    blocks = gt.reshape(hw[0], fy, hw[1], fx).astype(np.float32)
    return blocks.mean(axis=(1, 3)) > 0.5


def dataset_hash(split_dir: str | Path) -> str:
    """Content hash over all dataset files, for run manifests."""
    root = Path(split_dir)
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()
