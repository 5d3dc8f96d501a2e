import numpy as np
import pytest
import torch

from samref import trainer


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def modules():
    torch.manual_seed(0)
    return trainer.build_modules()


def zero_biases(module: torch.nn.Module) -> torch.nn.Module:
    with torch.no_grad():
        for m in module.modules():
            if hasattr(m, "bias") and m.bias is not None:
                m.bias.zero_()
    return module


def bilinear_resize_oracle(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Independent scalar-loop bilinear resampler, align-corners=false, border clamp."""
    c, h, w = arr.shape
    oh, ow = out_hw
    out = np.zeros((c, oh, ow), dtype=np.float64)
    for i in range(oh):
        sy = (i + 0.5) * h / oh - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(ow):
            sx = (j + 0.5) * w / ow - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            out[:, i, j] = (
                arr[:, y0c, x0c] * (1 - fy) * (1 - fx)
                + arr[:, y0c, x1c] * (1 - fy) * fx
                + arr[:, y1c, x0c] * fy * (1 - fx)
                + arr[:, y1c, x1c] * fy * fx
            )
    return out


def roi_crop_oracle(arr: np.ndarray, window, out_hw: tuple[int, int]) -> np.ndarray:
    """Scalar bilinear RoI sampler with the same sub-pixel convention as roi_crop."""
    c, h, w = arr.shape
    oh, ow = out_hw
    out = np.zeros((c, oh, ow), dtype=np.float64)
    for i in range(oh):
        sy = window.row0 + (i + 0.5) * window.height / oh - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(ow):
            sx = window.col0 + (j + 0.5) * window.width / ow - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            out[:, i, j] = (
                arr[:, y0c, x0c] * (1 - fy) * (1 - fx)
                + arr[:, y0c, x1c] * (1 - fy) * fx
                + arr[:, y1c, x0c] * fy * (1 - fx)
                + arr[:, y1c, x1c] * fy * fx
            )
    return out


def label_components_oracle(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    """Brute-force 4-connected component labeling by BFS."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                comp = set()
                stack = [(r, c)]
                seen[r, c] = True
                while stack:
                    cr, cc = stack.pop()
                    comp.add((cr, cc))
                    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        nr, nc = cr + dr, cc + dc
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                            seen[nr, nc] = True
                            stack.append((nr, nc))
                comps.append(comp)
    return comps
