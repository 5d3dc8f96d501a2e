"""HTTP session API for live interactive segmentation.

JSON over HTTP: POST /v1/sessions (multipart image) -> {id};
POST /v1/sessions/{id}/clicks {x,y,polarity} -> mask + diagnostics;
POST /v1/sessions/{id}/undo; GET /v1/sessions/{id}; GET /v1/health.
All error bodies are {code, message}.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, Request, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .pipeline import SamRefPipeline, SessionState
from .prompt_codec import Click, IMAGE_HW

MAX_PIXELS = 16_000_000
DEFAULT_IDLE_TIMEOUT = 30 * 60.0


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def encode_rle(mask: np.ndarray) -> dict:
    """Row-major run-length encoding; runs alternate starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"height": 0, "width": 0, "counts": []}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"height": int(mask.shape[0]), "width": int(mask.shape[1]), "counts": counts}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = rle["height"], rle["width"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for count in rle["counts"]:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape(h, w)


def heatmap_png_b64(prob: np.ndarray) -> str:
    img = Image.fromarray((np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _full_res_mask(final_logits: torch.Tensor) -> np.ndarray:
    up = torch.nn.functional.interpolate(
        final_logits.unsqueeze(0), size=IMAGE_HW, mode="bilinear", align_corners=False
    ).squeeze()
    return (up > 0).numpy()


@dataclass
class LiveSession:
    session_id: str
    state: SessionState
    lock: threading.Lock = field(default_factory=threading.Lock)
    history: list[dict] = field(default_factory=list)
    last_response: dict | None = None
    created: float = field(default_factory=time.time)
    last_access: float = field(default_factory=time.time)


class SessionStore:
    def __init__(self, idle_timeout: float = DEFAULT_IDLE_TIMEOUT):
        self.idle_timeout = idle_timeout
        self._sessions: dict[str, LiveSession] = {}
        self._lock = threading.Lock()

    def add(self, session: LiveSession) -> None:
        with self._lock:
            self._sessions[session.session_id] = session

    def get(self, session_id: str) -> LiveSession:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is not None and time.time() - session.last_access > self.idle_timeout:
                del self._sessions[session_id]
                session = None
            if session is None:
                raise ApiError(404, "session_not_found", f"unknown or expired session {session_id}")
            session.last_access = time.time()
            return session

    def __len__(self) -> int:
        return len(self._sessions)


def _load_image(raw: bytes) -> torch.Tensor:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ApiError(400, "bad_image", f"could not decode image: {exc}") from exc
    if img.width * img.height > MAX_PIXELS:
        raise ApiError(413, "image_too_large", f"{img.width}x{img.height} exceeds {MAX_PIXELS} pixels")
    img = img.convert("RGB").resize((IMAGE_HW[1], IMAGE_HW[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def create_app(
    pipeline: SamRefPipeline,
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    version: str = "0.1.0",
    checkpoint_hash: str = "",
) -> FastAPI:
    app = FastAPI(title="samref session api")
    store = SessionStore(idle_timeout)
    app.state.store = store

    @app.exception_handler(ApiError)
    async def on_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "version": version, "checkpoint_hash": checkpoint_hash}

    @app.post("/v1/sessions")
    async def create_session(image: UploadFile):
        raw = await image.read()
        tensor = _load_image(raw)
        state = pipeline.start_session(tensor)
        session = LiveSession(session_id=uuid.uuid4().hex, state=state)
        store.add(session)
        return {"id": session.session_id, "clicks": 0}

    def _state_payload(session: LiveSession) -> dict:
        return {
            "id": session.session_id,
            "clicks": [
                {"x": c.x, "y": c.y, "polarity": c.polarity, "index": c.index}
                for c in session.state.clicks
            ],
            "last_response": session.last_response,
        }

    @app.post("/v1/sessions/{session_id}/clicks")
    def add_click(session_id: str, payload: dict):
        session = store.get(session_id)
        try:
            x, y = int(payload["x"]), int(payload["y"])
            polarity = str(payload["polarity"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ApiError(400, "bad_request", f"click payload must have x, y, polarity: {exc}") from exc
        if polarity not in ("positive", "negative"):
            raise ApiError(400, "bad_polarity", f"polarity must be positive|negative, got {polarity!r}")
        if not (0 <= x < IMAGE_HW[1] and 0 <= y < IMAGE_HW[0]):
            raise ApiError(400, "click_out_of_bounds", f"({x}, {y}) outside {IMAGE_HW[1]}x{IMAGE_HW[0]}")
        with session.lock:
            click = Click(x=x, y=y, polarity=polarity, index=len(session.state.clicks) + 1)
            snapshot = {"state": session.state.snapshot(), "response": session.last_response}
            t0 = time.perf_counter()
            result = pipeline.add_click(session.state, click)
            total_s = time.perf_counter() - t0
            mask = _full_res_mask(result.final_logits)
            error_prob = torch.sigmoid(result.error_logits).squeeze(0).numpy()
            response = {
                "mask_rle": encode_rle(mask),
                "error_heatmap_png_b64": heatmap_png_b64(error_prob),
                "selector": result.decision,
                "timings_ms": {k: v * 1000.0 for k, v in result.timings.items()},
                "total_ms": total_s * 1000.0,
                "click_index": click.index,
            }
            session.history.append(snapshot)
            session.last_response = response
            return response

    @app.post("/v1/sessions/{session_id}/undo")
    def undo(session_id: str):
        session = store.get(session_id)
        with session.lock:
            if not session.history:
                raise ApiError(409, "nothing_to_undo", "session has no clicks to undo")
            snapshot = session.history.pop()
            session.state.restore(snapshot["state"])
            session.last_response = snapshot["response"]
            return _state_payload(session)

    @app.get("/v1/sessions/{session_id}")
    def get_state(session_id: str):
        session = store.get(session_id)
        with session.lock:
            return _state_payload(session)

    return app
