"""Two-stage training: decoder fine-tune (stage 1), then the refiner stack
with everything else frozen (stage 2). Includes training-time click
simulation, embedding precompute, JSONL step logging and atomic checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import losses, patchdiff
from .backbone import EmbeddingCache, EmbeddingMap, ToyBackbone, image_key_of
from .data import DatasetEntry, load_dataset, load_image_tensor, load_mask, mask_to_map
from .globaldiff import EmbeddingUpscaler, GlobalRefiner, error_detail_blend, error_region_area
from .patchdiff import FOUR_CONN, LocalHeads
from .prompt_codec import Click, ImagePromptFusion, MAP_HW, encode_clicks_to_disks, assemble_dense_map

CHECKPOINT_VERSION = 1
FIRST_CLICK_MARGIN = 3


@dataclass
class TrainConfig:
    stage: int
    data_dir: str
    out_dir: str
    cache_dir: str | None = None
    iterations: int = 2000
    batch_size: int = 4
    learning_rate: float = 5e-4
    n_blocks: int = 3
    seed: int = 0
    min_clicks: int = 1
    max_clicks: int = 5
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.iterations <= 0:
            raise ValueError(f"iterations must be > 0, got {self.iterations}")


def build_modules(n_blocks: int = 3) -> dict[str, torch.nn.Module]:
    return {
        "backbone": ToyBackbone(),
        "fusion": ImagePromptFusion(),
        "upscaler": EmbeddingUpscaler(),
        "refiner": GlobalRefiner(n_blocks=n_blocks),
        "local_heads": LocalHeads(),
    }


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    stage: int,
    step: int,
    modules: dict[str, torch.nn.Module],
    optimizer: torch.optim.Optimizer | None,
    rng: np.random.Generator,
    config: TrainConfig | None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": step,
        "n_blocks": modules["refiner"].n_blocks,
        "model": {k: m.state_dict() for k, m in modules.items()},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "rng": {
            "numpy": rng.bit_generator.state,
            "torch": torch.get_rng_state(),
        },
        "config": None if config is None else asdict(config),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}: {payload.get('version')}")
    return payload


def modules_from_checkpoint(path: str | Path) -> dict[str, torch.nn.Module]:
    payload = load_checkpoint(path)
    modules = build_modules(n_blocks=payload["n_blocks"])
    for k, m in modules.items():
        m.load_state_dict(payload["model"][k])
        m.eval()
    return modules


def _interior_choice(region: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    """Random pixel from the eroded interior of a region (falls back to the region)."""
    interior = ndimage.binary_erosion(region, structure=FOUR_CONN)
    candidates = np.argwhere(interior if interior.any() else region)
    r, c = candidates[rng.integers(len(candidates))]
    return int(r), int(c)


def _largest_error_region(error: np.ndarray) -> np.ndarray | None:
    if not error.any():
        return None
    labels, n = ndimage.label(error, structure=FOUR_CONN)
    sizes = ndimage.sum_labels(error, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def _map_to_image_coords(r: int, c: int) -> tuple[int, int]:
    # center of the 4x4 image block that rounds back to map pixel (r, c)
    return 4 * c + 1, 4 * r + 1


def simulate_training_clicks(
    gt: np.ndarray,
    current_pred: np.ndarray | None,
    rng: np.random.Generator,
    index: int,
) -> Click | None:
    """One training click: first uniformly inside the eroded gt, afterwards a
    random interior point of the largest misclassified region."""
    gt = np.asarray(gt, dtype=bool)
    if not gt.any():
        raise ValueError("ground truth is empty")
    if current_pred is None or index == 1:
        core = ndimage.distance_transform_edt(gt) > FIRST_CLICK_MARGIN
        region = core if core.any() else gt
        r, c = _interior_choice(region, rng)
        x, y = _map_to_image_coords(r, c)
        return Click(x=x, y=y, polarity="positive", index=index)
    pred = np.asarray(current_pred, dtype=bool)
    fn = gt & ~pred
    fp = pred & ~gt
    fn_region = _largest_error_region(fn)
    fp_region = _largest_error_region(fp)
    if fn_region is None and fp_region is None:
        return None
    if fp_region is None or (fn_region is not None and fn_region.sum() >= fp_region.sum()):
        region, polarity = fn_region, "positive"
    else:
        region, polarity = fp_region, "negative"
    r, c = _interior_choice(region, rng)
    x, y = _map_to_image_coords(r, c)
    return Click(x=x, y=y, polarity=polarity, index=index)


def precompute_embeddings(
    backbone: ToyBackbone, entries: list[DatasetEntry], cache: EmbeddingCache
) -> int:
    """Ensure every dataset image has a cache entry; returns entries written."""
    written = 0
    for entry in entries:
        image = load_image_tensor(entry.image_path)
        key = image_key_of(image)
        if cache.get(key) is not None:
            continue
        cache.put(key, backbone.encode_image(image))
        written += 1
    return written


class _StepLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        else:
            self._fh = None

    def log(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _load_sample(entry: DatasetEntry) -> tuple[torch.Tensor, np.ndarray]:
    image = load_image_tensor(entry.image_path)
    gt_map = mask_to_map(load_mask(entry.mask_path))
    return image, gt_map


def _get_embedding(backbone: ToyBackbone, cache: EmbeddingCache | None, image: torch.Tensor) -> EmbeddingMap:
    key = image_key_of(image)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    emb = backbone.encode_image(image)
    if cache is not None:
        cache.put(key, emb)
    return emb


def _simulate_clicks_coarse(
    backbone: ToyBackbone,
    emb: EmbeddingMap,
    gt_map: np.ndarray,
    n_clicks: int,
    rng: np.random.Generator,
) -> tuple[list[Click], torch.Tensor | None]:
    """Iteratively sample clicks against the decoder's own predictions.

    Returns the click list and the prev-logits tensor feeding the final
    (gradient) decode, i.e. the decode output after the second-to-last click.
    """
    clicks: list[Click] = []
    pred = None
    prev_logits = None
    last_logits = None
    with torch.no_grad():
        for k in range(1, n_clicks + 1):
            click = simulate_training_clicks(gt_map, pred, rng, index=k)
            if click is None:
                break
            clicks.append(click)
            prev_logits = last_logits
            if k < n_clicks:
                last_logits = backbone.decode_coarse(emb, clicks, last_logits).logits
                pred = (torch.sigmoid(last_logits) > 0.5).squeeze(0).numpy()
    return clicks, prev_logits


def _frozen(modules: dict[str, torch.nn.Module], names: list[str]):
    for name in names:
        for p in modules[name].parameters():
            p.requires_grad_(False)


def _restore_rng(rng: np.random.Generator, payload: dict) -> None:
    rng.bit_generator.state = payload["rng"]["numpy"]
    torch.set_rng_state(payload["rng"]["torch"])


def train_stage1(
    config: TrainConfig,
    modules: dict[str, torch.nn.Module] | None = None,
    resume_from: str | Path | None = None,
) -> Path:
    """Fine-tune the coarse decoder with NFL; encoder and refiners untouched.

    `config.iterations` is the final step count; resuming continues from the
    checkpointed step with optimizer and RNG state restored.
    """
    if config.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    modules = modules or build_modules(config.n_blocks)
    resume_payload = None
    if resume_from is not None:
        resume_payload = load_checkpoint(resume_from)
        for k, m in modules.items():
            m.load_state_dict(resume_payload["model"][k])
    backbone: ToyBackbone = modules["backbone"]
    _frozen(modules, ["fusion", "upscaler", "refiner", "local_heads"])
    for p in backbone.encoder.parameters():
        p.requires_grad_(False)
    encoder_hash = state_hash(backbone.encoder)

    entries = load_dataset(config.data_dir)
    cache = EmbeddingCache(config.cache_dir) if config.cache_dir else None
    optimizer = torch.optim.Adam(backbone.decoder.parameters(), lr=config.learning_rate)
    start_step = 1
    if resume_payload is not None:
        if resume_payload["optimizer"] is not None:
            optimizer.load_state_dict(resume_payload["optimizer"])
        _restore_rng(rng, resume_payload)
        start_step = resume_payload["step"] + 1
    out = Path(config.out_dir)
    logger = _StepLogger(config.log_path or out / "train_stage1.jsonl")

    try:
        for step in range(start_step, config.iterations + 1):
            optimizer.zero_grad()
            batch_loss = 0.0
            idxs = rng.integers(len(entries), size=config.batch_size)
            for idx in idxs:
                image, gt_map = _load_sample(entries[idx])
                emb = _get_embedding(backbone, cache, image)
                n_clicks = int(rng.integers(config.min_clicks, config.max_clicks + 1))
                clicks, prev_logits = _simulate_clicks_coarse(backbone, emb, gt_map, n_clicks, rng)
                logits = backbone.decode_coarse(emb, clicks, prev_logits).logits
                gt_t = torch.from_numpy(gt_map.astype(np.float32)).unsqueeze(0)
                bundle = losses.total_loss(1, coarse_logits=logits, gt=gt_t)
                loss = bundle.total / config.batch_size
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite loss at step {step} (sample {entries[idx].sample_id})")
                loss.backward()
                batch_loss += float(bundle.total.detach())
            optimizer.step()
            record = {"stage": 1, "step": step, "nfl": batch_loss / config.batch_size,
                      "dice_g": 0.0, "bce_g": 0.0, "bnfl_g": 0.0,
                      "dice_p": 0.0, "bce_p": 0.0, "bnfl_p": 0.0,
                      "total": batch_loss / config.batch_size}
            logger.log(record)
    finally:
        logger.close()

    assert state_hash(backbone.encoder) == encoder_hash, "frozen encoder drifted during stage 1"
    return save_checkpoint(out / "stage1.ckpt", 1, config.iterations, modules, optimizer, rng, config)


def train_stage2(
    config: TrainConfig,
    stage1_ckpt: str | Path,
    modules: dict[str, torch.nn.Module] | None = None,
    resume_from: str | Path | None = None,
) -> Path:
    """Train fusion/upscaler/refiner/local heads with the backbone frozen."""
    if config.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    payload = load_checkpoint(stage1_ckpt)
    if payload["stage"] != 1:
        raise ValueError(f"{stage1_ckpt} is a stage-{payload['stage']} checkpoint, need stage 1")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    modules = modules or build_modules(config.n_blocks)
    modules["backbone"].load_state_dict(payload["model"]["backbone"])
    resume_payload = None
    if resume_from is not None:
        resume_payload = load_checkpoint(resume_from)
        for k, m in modules.items():
            m.load_state_dict(resume_payload["model"][k])

    backbone: ToyBackbone = modules["backbone"]
    fusion: ImagePromptFusion = modules["fusion"]
    upscaler: EmbeddingUpscaler = modules["upscaler"]
    refiner: GlobalRefiner = modules["refiner"]
    local_heads: LocalHeads = modules["local_heads"]
    _frozen(modules, ["backbone"])
    backbone_hash = state_hash(backbone)

    entries = load_dataset(config.data_dir)
    cache = EmbeddingCache(config.cache_dir) if config.cache_dir else None
    trainable = (
        list(fusion.parameters()) + list(upscaler.parameters())
        + list(refiner.parameters()) + list(local_heads.parameters())
    )
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate)
    start_step = 1
    if resume_payload is not None:
        if resume_payload["optimizer"] is not None:
            optimizer.load_state_dict(resume_payload["optimizer"])
        _restore_rng(rng, resume_payload)
        start_step = resume_payload["step"] + 1
    out = Path(config.out_dir)
    logger = _StepLogger(config.log_path or out / "train_stage2.jsonl")

    def refine(image, emb, clicks, coarse_logits):
        disks = encode_clicks_to_disks(clicks)
        dense = assemble_dense_map(disks[0], disks[1], coarse_logits.detach().squeeze(0).numpy())
        dense_t = torch.from_numpy(dense)
        f0 = fusion(image.unsqueeze(0), dense_t.unsqueeze(0))
        emb_up = upscaler(emb.data.unsqueeze(0))
        error_logits, detail_logits, fn = refiner(f0, emb_up)
        refined = error_detail_blend(error_logits.squeeze(0), detail_logits.squeeze(0), coarse_logits)
        return error_logits.squeeze(0), refined, fn.squeeze(0)

    try:
        for step in range(start_step, config.iterations + 1):
            optimizer.zero_grad()
            sums = {k: 0.0 for k in ("nfl", "dice_g", "bce_g", "bnfl_g", "dice_p", "bce_p", "bnfl_p", "total")}
            idxs = rng.integers(len(entries), size=config.batch_size)
            for idx in idxs:
                image, gt_map = _load_sample(entries[idx])
                emb = _get_embedding(backbone, cache, image)
                gt_t = torch.from_numpy(gt_map.astype(np.float32)).unsqueeze(0)
                n_clicks = int(rng.integers(config.min_clicks, config.max_clicks + 1))
                clicks, prev_logits = _simulate_clicks_coarse(backbone, emb, gt_map, n_clicks, rng)

                # previous interaction's refined state for selector bookkeeping
                prev_area = None
                prev_final_mask = None
                if len(clicks) >= 2 and prev_logits is not None:
                    with torch.no_grad():
                        # prev_logits is the chained decode after clicks[:-1]
                        prev_err, prev_refined, _ = refine(image, emb, clicks[:-1], prev_logits)
                        prev_area = error_region_area(prev_err)
                        prev_final_mask = (torch.sigmoid(prev_refined) > 0.5).squeeze(0).numpy()

                with torch.no_grad():
                    coarse_logits = backbone.decode_coarse(emb, clicks, prev_logits).logits
                error_logits, refined, fn = refine(image, emb, clicks, coarse_logits)

                patch_kwargs = {}
                curr_area = error_region_area(error_logits.detach())
                run_patch = prev_area is not None and curr_area > prev_area
                if run_patch:
                    refined_mask = (torch.sigmoid(refined.detach()) > 0.5).squeeze(0).numpy()
                    window = patchdiff.find_refine_window(refined_mask, prev_final_mask, clicks[-1])
                    if window is not None:
                        local_feat = patchdiff.roi_crop(fn, window)
                        local_coarse = patchdiff.roi_crop(coarse_logits, window)
                        p_err, _, p_refined = patchdiff.local_refine(local_feat, local_coarse, local_heads)
                        patch_gt = (patchdiff.roi_crop(gt_t, window) > 0.5).float()
                        patch_kwargs = dict(
                            patch_error_logits=p_err,
                            patch_refined_logits=p_refined,
                            patch_coarse_logits=local_coarse,
                            patch_gt=patch_gt,
                        )

                bundle = losses.total_loss(
                    2,
                    coarse_logits=coarse_logits,
                    gt=gt_t,
                    global_error_logits=error_logits,
                    global_refined_logits=refined,
                    **patch_kwargs,
                )
                loss = bundle.total / config.batch_size
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite loss at step {step} (sample {entries[idx].sample_id})")
                loss.backward()
                for k, v in bundle.to_dict().items():
                    sums[k] += v / config.batch_size
            optimizer.step()
            logger.log({"stage": 2, "step": step, **sums})
    finally:
        logger.close()

    assert state_hash(backbone) == backbone_hash, "frozen backbone drifted during stage 2"
    return save_checkpoint(out / "stage2.ckpt", 2, config.iterations, modules, optimizer, rng, config)
