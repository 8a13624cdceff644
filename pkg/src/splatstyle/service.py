"""Realtime render service: one immutable model snapshot, many sessions.

Wire protocol, per session on /stream:
  client -> server: JSON {frame_id, camera:{fx,fy,cx,cy,w,h,R:[9],t:[3]},
                          weights:[4], res:[w,h]}
  server -> client: binary frame: 16-byte header (frame_id u64, w u32, h u32 LE)
                    + RGB8 pixels row-major, then a JSON telemetry text frame
                    {frame_id, render_us}.
When the client outpaces rendering, only the newest pending request is served
(latest-wins); stale frame_ids are dropped, so replies carry strictly
increasing frame_ids.
"""

from __future__ import annotations

import asyncio
import base64
import io
import json
import os
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import PlainTextResponse

from . import rasterizer, stylefield
from .errors import ConfigurationError
from .imageio import load_png, to_uint8
from .scene import Camera, load_bundle
from .styletransfer2d import style_latent

MAX_RESOLUTION = (1920, 1080)
WEIGHT_SUM_TOL = 1e-3
COLOR_CACHE_SIZE = 16
MULTICORE = (os.cpu_count() or 1) > 1


@dataclass
class ModelSnapshot:
    cloud: object
    background: np.ndarray
    field: object
    latents: np.ndarray          # (4, latent_dim)
    style_thumbs: list           # 4 PNG blobs
    _cache: OrderedDict = dc_field(default_factory=OrderedDict)
    _lock: threading.Lock = dc_field(default_factory=threading.Lock)

    def colors_for_weights(self, weights: np.ndarray) -> np.ndarray:
        key = tuple(float(w) for w in weights)
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
                return cached
        latent = weights @ self.latents
        colors = stylefield.predict_colors(self.field, self.cloud.means, latent)
        colors.setflags(write=False)
        with self._lock:
            self._cache[key] = colors
            self._cache.move_to_end(key)
            while len(self._cache) > COLOR_CACHE_SIZE:
                self._cache.popitem(last=False)
        return colors


def build_snapshot(scene_path, field_path, style_dir, cams=None) -> ModelSnapshot:
    bundle = load_bundle(scene_path)
    field = stylefield.load_field(field_path)
    style_paths = sorted(p for p in Path(style_dir).glob("*")
                         if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(style_paths) < 4:
        raise ConfigurationError(
            f"style directory {style_dir} must hold at least 4 images")
    style_paths = style_paths[:4]
    latents = np.stack([style_latent(load_png(p)) for p in style_paths])
    latents.setflags(write=False)
    thumbs = []
    from PIL import Image

    for p in style_paths:
        with Image.open(p) as im:
            im = im.convert("RGB").resize((64, 64))
            buf = io.BytesIO()
            im.save(buf, format="PNG")
            thumbs.append(buf.getvalue())
    return ModelSnapshot(cloud=bundle.cloud, background=bundle.background,
                         field=field, latents=latents, style_thumbs=thumbs)


@dataclass
class RenderRequest:
    frame_id: int
    camera: Camera
    weights: np.ndarray
    width: int
    height: int


def parse_request(raw: str):
    """Returns (RenderRequest, None) or (None, error message)."""
    try:
        msg = json.loads(raw)
    except json.JSONDecodeError as exc:
        return None, f"malformed JSON: {exc.msg}"
    try:
        frame_id = int(msg["frame_id"])
        weights = np.asarray([float(w) for w in msg["weights"]], dtype=np.float64)
        res_w, res_h = (int(v) for v in msg["res"])
        camera = Camera.from_json(msg["camera"])
    except (KeyError, TypeError, ValueError) as exc:
        return None, f"malformed request: {exc}"
    if weights.shape != (4,) or np.any(weights < 0):
        return None, "weights must be 4 non-negative numbers"
    total = float(weights.sum())
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        return None, f"weights sum {total:.6f} is outside 1 +/- {WEIGHT_SUM_TOL}"
    weights = weights / total
    if res_w > MAX_RESOLUTION[0] or res_h > MAX_RESOLUTION[1] or res_w < 1 or res_h < 1:
        return None, f"resolution {res_w}x{res_h} outside limits {MAX_RESOLUTION}"
    if (res_w, res_h) != (camera.width, camera.height):
        camera = camera.resized(res_w, res_h)
    return RenderRequest(frame_id=frame_id, camera=camera, weights=weights,
                         width=res_w, height=res_h), None


def render_frame(snapshot: ModelSnapshot, req: RenderRequest):
    """Returns (payload bytes, telemetry dict). Runs off the event loop."""
    from . import kernels

    start = time.perf_counter()
    colors = snapshot.colors_for_weights(req.weights)
    out = rasterizer.render(snapshot.cloud, req.camera, color_override=colors,
                            background=snapshot.background, color_only=True)
    n_px = req.width * req.height * 3
    payload = bytearray(16 + n_px)
    struct.pack_into("<QII", payload, 0, req.frame_id, req.width, req.height)
    if kernels.NUMBA_ENABLED:
        kernels.pack_rgb8_numba(out.color,
                                np.frombuffer(payload, dtype=np.uint8,
                                              offset=16, count=n_px))
    else:
        np.frombuffer(payload, dtype=np.uint8, offset=16,
                      count=n_px)[:] = to_uint8(out.color).reshape(-1)
    payload = bytes(payload)
    render_us = int((time.perf_counter() - start) * 1e6)
    return payload, {"frame_id": req.frame_id, "render_us": render_us}


def create_app(snapshot: ModelSnapshot) -> FastAPI:
    app = FastAPI(title="splatstyle render service")
    app.state.snapshot = snapshot

    @app.get("/healthz")
    async def healthz():
        return PlainTextResponse("ok")

    @app.get("/info")
    async def info():
        return {
            "n_gaussians": len(snapshot.cloud),
            "latent_dim": int(snapshot.latents.shape[1]),
            "styles": [base64.b64encode(t).decode() for t in snapshot.style_thumbs],
        }

    @app.websocket("/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        pending: list = []
        got_message = asyncio.Event()
        closed = False

        async def receiver():
            nonlocal closed
            try:
                while True:
                    raw = await ws.receive_text()
                    pending.append(raw)
                    got_message.set()
            except (WebSocketDisconnect, RuntimeError):
                closed = True
                got_message.set()

        recv_task = asyncio.create_task(receiver())
        last_frame_id = -1
        try:
            while True:
                await got_message.wait()
                if closed and not pending:
                    break
                raw = pending[-1]          # latest wins; older requests dropped
                pending.clear()
                got_message.clear()
                req, err = parse_request(raw)
                if err is not None:
                    await ws.send_json({"error": err})
                    continue
                if req.frame_id <= last_frame_id:
                    continue               # stale
                if MULTICORE:
                    payload, telemetry = await asyncio.to_thread(
                        render_frame, snapshot, req)
                else:
                    # on a single core the thread hop only adds GIL contention;
                    # pending messages buffer in the transport and drain before
                    # the next frame, so latest-wins coalescing is unchanged
                    payload, telemetry = render_frame(snapshot, req)
                    await asyncio.sleep(0)
                last_frame_id = req.frame_id
                await ws.send_bytes(payload)
                await ws.send_json(telemetry)
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            recv_task.cancel()

    return app
