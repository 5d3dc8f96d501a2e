"""Interactive evaluation: deterministic click simulation, session loop, and
NoC/NoF/mIoU/SPC/SAT metrics with CSV + JSONL + figure reporting.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .patchdiff import FOUR_CONN
from .prompt_codec import Click, IMAGE_HW, MAP_HW

MAX_CLICKS = 20
DEFAULT_TARGETS = (0.90, 0.95)
SAT_GRID = 16


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def _largest_component(mask: np.ndarray) -> tuple[np.ndarray | None, int]:
    if not mask.any():
        return None, 0
    labels, n = ndimage.label(mask, structure=FOUR_CONN)
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    i = int(np.argmax(sizes))
    return labels == i + 1, int(sizes[i])


def next_eval_click(pred: np.ndarray, gt: np.ndarray, index: int) -> Click:
    """Deterministic protocol click: center (max distance-to-boundary pixel) of
    the largest misclassified component; positive for false negatives,
    negative for false positives. Ties break toward smallest (row, col)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    if np.array_equal(pred, gt):
        raise ValueError("prediction equals ground truth; session should have stopped")
    fn_comp, fn_size = _largest_component(gt & ~pred)
    fp_comp, fp_size = _largest_component(pred & ~gt)
    if fn_size >= fp_size and fn_comp is not None:
        comp, polarity = fn_comp, "positive"
    else:
        comp, polarity = fp_comp, "negative"
    dist = ndimage.distance_transform_edt(comp)
    best = np.max(dist)
    candidates = np.argwhere(dist == best)
    r, c = min(map(tuple, candidates))
    scale = IMAGE_HW[0] // comp.shape[0]
    return Click(x=int(c) * scale + scale // 2 - 1, y=int(r) * scale + scale // 2 - 1,
                 polarity=polarity, index=index)


@dataclass
class ClickOutcome:
    index: int
    x: int
    y: int
    polarity: str
    iou: float
    decision: str
    seconds: float


@dataclass
class SessionRecord:
    image_id: str
    clicks: list[ClickOutcome] = field(default_factory=list)
    noc: dict[str, int] = field(default_factory=dict)
    failed: dict[str, bool] = field(default_factory=dict)
    error: str | None = None
    encode_calls: int = 0

    @property
    def final_iou(self) -> float:
        return self.clicks[-1].iou if self.clicks else 0.0

    def iou_at(self, k: int) -> float:
        """IoU at click k, or the final IoU if the session ended earlier."""
        if not self.clicks:
            return 0.0
        return self.clicks[min(k, len(self.clicks)) - 1].iou

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "noc": self.noc,
            "failed": self.failed,
            "error": self.error,
            "encode_calls": self.encode_calls,
            "clicks": [vars(c) for c in self.clicks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionRecord":
        return cls(
            image_id=d["image_id"],
            clicks=[ClickOutcome(**c) for c in d["clicks"]],
            noc=d["noc"],
            failed=d["failed"],
            error=d.get("error"),
            encode_calls=d.get("encode_calls", 0),
        )


def run_session(
    pipeline,
    image: torch.Tensor,
    gt_map: np.ndarray,
    image_id: str = "",
    max_clicks: int = MAX_CLICKS,
    targets: tuple[float, ...] = DEFAULT_TARGETS,
    dump_dir: str | Path | None = None,
) -> SessionRecord:
    """Interactive loop: simulate a click, run the full pipeline, record IoU
    and timing; stop at max_clicks or once every target IoU is reached."""
    gt_map = np.asarray(gt_map, dtype=bool)
    if not gt_map.any():
        raise ValueError("ground truth is empty")
    record = SessionRecord(image_id=image_id)
    targets = tuple(sorted(targets))
    try:
        before = getattr(pipeline.backbone, "encode_calls", 0)
        session = pipeline.start_session(image)
        record.encode_calls = getattr(pipeline.backbone, "encode_calls", 1) - before
        pred = np.zeros(MAP_HW, dtype=bool)
        for k in range(1, max_clicks + 1):
            click = next_eval_click(pred, gt_map, index=k)
            t0 = time.perf_counter()
            result = pipeline.add_click(session, click)
            seconds = time.perf_counter() - t0
            pred = result.final_mask
            score = iou(pred, gt_map)
            record.clicks.append(
                ClickOutcome(k, click.x, click.y, click.polarity, score, result.decision, seconds)
            )
            if dump_dir is not None:
                dump = Path(dump_dir)
                dump.mkdir(parents=True, exist_ok=True)
                Image.fromarray((pred * 255).astype(np.uint8)).save(dump / f"{image_id}_click{k:02d}.png")
            for tau in targets:
                key = f"{tau:.2f}"
                if key not in record.noc and score >= tau:
                    record.noc[key] = k
            if all(f"{tau:.2f}" in record.noc for tau in targets):
                break
        for tau in targets:
            key = f"{tau:.2f}"
            if key not in record.noc:
                record.noc[key] = max_clicks
                record.failed[key] = True
            else:
                record.failed[key] = False
    except Exception as exc:  # pipeline failure: counted in NoF, excluded from SPC
        record.error = f"{type(exc).__name__}: {exc}"
        for tau in targets:
            key = f"{tau:.2f}"
            record.noc[key] = max_clicks
            record.failed[key] = True
    return record


def sat_latency(pipeline, image: torch.Tensor, grid: int = SAT_GRID) -> tuple[float, int]:
    """Total wall-clock for grid*grid sequential single-point prompts on one
    pre-encoded image, each fed with the previous mask. Returns (seconds, prompts)."""
    session = pipeline.start_session(image)
    h, w = IMAGE_HW
    prompts = 0
    t0 = time.perf_counter()
    for i in range(grid):
        for j in range(grid):
            x = int((j + 0.5) * w / grid)
            y = int((i + 0.5) * h / grid)
            prompts += 1
            click = Click(x=x, y=y, polarity="positive", index=prompts)
            # single point at a time: the prompt is just this click, with the
            # previous mask carried through the session's prev logits
            session.clicks = []
            pipeline.add_click(session, click)
    return time.perf_counter() - t0, prompts


@dataclass
class BenchmarkReport:
    noc90: float
    noc95: float
    nof95: int
    miou5: float
    spc: float
    n_sessions: int
    sessions: list[SessionRecord]
    skipped: int = 0

    def to_row(self) -> dict:
        return {
            "NoC90": round(self.noc90, 4),
            "NoC95": round(self.noc95, 4),
            "NoF95": self.nof95,
            "mIoU@5": round(self.miou5, 4),
            "SPC": round(self.spc, 4),
            "sessions": self.n_sessions,
            "skipped": self.skipped,
        }


def compute_report(sessions: list[SessionRecord]) -> BenchmarkReport:
    if not sessions:
        raise ValueError("need at least one session")
    noc90 = float(np.mean([s.noc["0.90"] for s in sessions]))
    noc95 = float(np.mean([s.noc["0.95"] for s in sessions]))
    nof95 = sum(1 for s in sessions if s.failed.get("0.95", False))
    miou5 = float(np.mean([s.iou_at(5) for s in sessions]))
    click_times = [c.seconds for s in sessions if s.error is None for c in s.clicks]
    spc = float(np.mean(click_times)) if click_times else float("nan")
    return BenchmarkReport(noc90, noc95, nof95, miou5, spc, len(sessions), sessions)


def write_report(report: BenchmarkReport, out_dir: str | Path, name: str = "benchmark") -> dict[str, Path]:
    """Serialize the aggregate CSV, per-image JSONL rows and summary figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        row = report.to_row()
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    paths["csv"] = csv_path

    jsonl_path = out / f"{name}_sessions.jsonl"
    with open(jsonl_path, "w") as fh:
        for s in report.sessions:
            fh.write(json.dumps(s.to_dict()) + "\n")
    paths["jsonl"] = jsonl_path
    paths.update(render_figures(report, out, name))
    return paths


def render_figures(report: BenchmarkReport, out_dir: str | Path, name: str = "benchmark") -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    max_k = max((len(s.clicks) for s in report.sessions), default=1)
    ks = np.arange(1, max_k + 1)
    mean_iou = [np.mean([s.iou_at(k) for s in report.sessions]) for k in ks]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, mean_iou, marker="o")
    ax.set_xlabel("click")
    ax.set_ylabel("mean IoU")
    ax.set_ylim(0, 1)
    ax.set_title("Mean IoU vs. clicks")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    curve_path = out / f"{name}_iou_curve.png"
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    paths["iou_curve"] = curve_path

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist([s.noc["0.90"] for s in report.sessions], bins=np.arange(0.5, MAX_CLICKS + 1.5), edgecolor="black")
    ax.set_xlabel("NoC90")
    ax.set_ylabel("sessions")
    ax.set_title("Clicks to reach IoU 0.90")
    fig.tight_layout()
    hist_path = out / f"{name}_noc90_hist.png"
    fig.savefig(hist_path, dpi=120)
    plt.close(fig)
    paths["noc90_hist"] = hist_path
    return paths
