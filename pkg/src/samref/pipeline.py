"""Per-click inference pipeline: coarse decode -> global refinement ->
selector-gated local patch refinement, with per-session state.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import patchdiff, prompt_codec
from .backbone import EmbeddingMap, ToyBackbone
from .globaldiff import GlobalRefiner, EmbeddingUpscaler, error_detail_blend, error_region_area
from .patchdiff import LocalHeads, PatchWindow, SelectorState
from .prompt_codec import Click, ImagePromptFusion, MAP_HW


@dataclass
class PipelineConfig:
    n_blocks: int = 3
    disk_radius: float = prompt_codec.DISK_RADIUS
    expand_ratio: float = patchdiff.DEFAULT_EXPAND_RATIO
    enable_patch: bool = True
    force_skip_patch: bool = False


@dataclass
class SessionState:
    image: torch.Tensor
    emb: EmbeddingMap
    emb_up: torch.Tensor
    clicks: list[Click] = field(default_factory=list)
    prev_logits: torch.Tensor | None = None
    prev_final_mask: np.ndarray | None = None
    selector: SelectorState = field(default_factory=SelectorState)
    encode_calls: int = 1

    def snapshot(self) -> dict:
        return {
            "clicks": list(self.clicks),
            "prev_logits": None if self.prev_logits is None else self.prev_logits.clone(),
            "prev_final_mask": None if self.prev_final_mask is None else self.prev_final_mask.copy(),
            "selector": copy.deepcopy(self.selector),
        }

    def restore(self, snap: dict) -> None:
        self.clicks = list(snap["clicks"])
        self.prev_logits = None if snap["prev_logits"] is None else snap["prev_logits"].clone()
        self.prev_final_mask = None if snap["prev_final_mask"] is None else snap["prev_final_mask"].copy()
        self.selector = copy.deepcopy(snap["selector"])


@dataclass
class StepResult:
    coarse_logits: torch.Tensor
    global_refined_logits: torch.Tensor
    final_logits: torch.Tensor
    error_logits: torch.Tensor
    error_area: int
    decision: str
    window: PatchWindow | None
    timings: dict[str, float]

    @property
    def final_mask(self) -> np.ndarray:
        return (torch.sigmoid(self.final_logits) > 0.5).squeeze(0).cpu().numpy()


class SamRefPipeline:
    """Bundles the frozen backbone with the refiner modules for inference."""

    def __init__(
        self,
        backbone: ToyBackbone,
        fusion: ImagePromptFusion,
        upscaler: EmbeddingUpscaler,
        refiner: GlobalRefiner,
        local_heads: LocalHeads,
        config: PipelineConfig | None = None,
    ):
        self.backbone = backbone
        self.fusion = fusion
        self.upscaler = upscaler
        self.refiner = refiner
        self.local_heads = local_heads
        self.config = config or PipelineConfig()
        self.decode_calls = 0

    def modules(self) -> dict[str, torch.nn.Module]:
        return {
            "backbone": self.backbone,
            "fusion": self.fusion,
            "upscaler": self.upscaler,
            "refiner": self.refiner,
            "local_heads": self.local_heads,
        }

    def eval(self) -> "SamRefPipeline":
        for m in self.modules().values():
            m.eval()
        return self

    @torch.no_grad()
    def start_session(self, image: torch.Tensor) -> SessionState:
        emb = self.backbone.encode_image(image)
        emb_up = self.upscaler(emb.data.unsqueeze(0)).squeeze(0)
        return SessionState(image=image, emb=emb, emb_up=emb_up)

    @torch.no_grad()
    def add_click(self, session: SessionState, click: Click) -> StepResult:
        timings: dict[str, float] = {}
        session.clicks.append(click)

        t0 = time.perf_counter()
        coarse = self.backbone.decode_coarse(session.emb, session.clicks, session.prev_logits)
        self.decode_calls += 1
        timings["decode"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        disks = prompt_codec.encode_clicks_to_disks(session.clicks, radius=self.config.disk_radius)
        dense = prompt_codec.assemble_dense_map(
            disks[0], disks[1], coarse.logits.squeeze(0).cpu().numpy()
        )
        f0 = prompt_codec.fuse_image_prompt(
            session.image, torch.from_numpy(dense).to(session.image.dtype), self.fusion
        )
        error_logits, detail_logits, fn = self.refiner(
            f0.unsqueeze(0), session.emb_up.unsqueeze(0)
        )
        error_logits = error_logits.squeeze(0)
        detail_logits = detail_logits.squeeze(0)
        fn = fn.squeeze(0)
        refined_g = error_detail_blend(error_logits, detail_logits, coarse.logits)
        timings["globaldiff"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        area = error_region_area(error_logits)
        session.selector.curr_error_area = area
        if self.config.force_skip_patch or not self.config.enable_patch:
            decision = "skip"
            session.selector.prev_error_area = area
        else:
            decision = patchdiff.dynamic_select(session.selector)

        final = refined_g
        window = None
        if decision == "run" and session.prev_final_mask is not None:
            refined_mask = (torch.sigmoid(refined_g) > 0.5).squeeze(0).cpu().numpy()
            window = patchdiff.find_refine_window(
                refined_mask, session.prev_final_mask, click, ratio=self.config.expand_ratio
            )
            if window is not None:
                local_feat = patchdiff.roi_crop(fn, window)
                local_coarse = patchdiff.roi_crop(coarse.logits, window)
                _, _, local_refined = patchdiff.local_refine(local_feat, local_coarse, self.local_heads)
                final = patchdiff.paste_back(refined_g, local_refined, window)
        timings["patchdiff"] = time.perf_counter() - t0
        timings["total"] = sum(timings.values())

        session.prev_logits = final.clone()
        session.prev_final_mask = (torch.sigmoid(final) > 0.5).squeeze(0).cpu().numpy()
        return StepResult(
            coarse_logits=coarse.logits,
            global_refined_logits=refined_g,
            final_logits=final,
            error_logits=error_logits,
            error_area=area,
            decision=decision,
            window=window,
            timings=timings,
        )


class CoarseOnlyPipeline:
    """Baseline: the frozen coarse decoder with no refinement."""

    def __init__(self, backbone: ToyBackbone):
        self.backbone = backbone
        self.decode_calls = 0

    def eval(self) -> "CoarseOnlyPipeline":
        self.backbone.eval()
        return self

    @torch.no_grad()
    def start_session(self, image: torch.Tensor) -> SessionState:
        emb = self.backbone.encode_image(image)
        return SessionState(image=image, emb=emb, emb_up=torch.zeros(0))

    @torch.no_grad()
    def add_click(self, session: SessionState, click: Click) -> StepResult:
        t0 = time.perf_counter()
        session.clicks.append(click)
        coarse = self.backbone.decode_coarse(session.emb, session.clicks, session.prev_logits)
        self.decode_calls += 1
        timings = {"decode": time.perf_counter() - t0, "globaldiff": 0.0, "patchdiff": 0.0}
        timings["total"] = timings["decode"]
        session.prev_logits = coarse.logits.clone()
        session.prev_final_mask = (torch.sigmoid(coarse.logits) > 0.5).squeeze(0).cpu().numpy()
        return StepResult(
            coarse_logits=coarse.logits,
            global_refined_logits=coarse.logits,
            final_logits=coarse.logits,
            error_logits=torch.full_like(coarse.logits, -20.0),
            error_area=0,
            decision="skip",
            window=None,
            timings=timings,
        )
