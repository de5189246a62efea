"""Background-removal HTTP service.

Pipeline per request: validate -> fetch/decode -> resize to the network
input -> predict (prediction + refinement) -> resize back -> post-process
-> compose (RGBA cutout or grayscale mask) -> respond inline or store to
the local storage backend and return its URL. Validation happens before
any inference; oversized payloads are rejected up front.

Endpoints:
  POST /v1/remove  multipart file field "image" or JSON {"image_url": ...};
                   query: output_format=rgba_png|mask_png,
                          response_mode=inline|stored_url
  GET  /v1/health  model checksum, queue depth, uptime
"""

from __future__ import annotations

import copy
import dataclasses
import io
import queue
import threading
import time
import uuid
from pathlib import Path

import httpx
import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image as PILImage

from .checkpoints import manifest_hash, restore_model
from .data import eval_transform
from .postprocess import PostprocessParams, postprocess_mask


@dataclasses.dataclass(frozen=True)
class ServiceConfig:
    model_path: Path
    storage_root: Path
    byte_limit: int = 10 * 1024 * 1024
    pool_size: int = 1
    queue_capacity: int = 8
    url_prefix: str = "/storage"
    resize: int = 320
    postprocess: PostprocessParams = PostprocessParams()


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str,
                 headers: dict | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.headers = headers or {}

    def response(self) -> JSONResponse:
        return JSONResponse(status_code=self.status, headers=self.headers,
                            content={"error": {"code": self.code,
                                               "message": self.message}})


class LocalStorage:
    """Local-disk storage behind the one-method interface a cloud bucket
    backend would also implement. Writes are atomic (temp then rename)."""

    def __init__(self, root: Path, url_prefix: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.url_prefix = url_prefix.rstrip("/")

    def store(self, name: str, data: bytes) -> str:
        tmp = self.root / (name + ".tmp")
        tmp.write_bytes(data)
        tmp.rename(self.root / name)
        return f"{self.url_prefix}/{name}"


class ModelPool:
    """Fixed set of frozen model replicas; requests beyond the queue
    capacity are rejected with a retry-after signal."""

    def __init__(self, model, pool_size: int, queue_capacity: int):
        self._replicas: queue.Queue = queue.Queue()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        for i in range(pool_size):
            self._replicas.put(model if i == 0 else copy.deepcopy(model))
        self._depth = 0
        self._capacity = pool_size + queue_capacity
        self._lock = threading.Lock()

    @property
    def queue_depth(self) -> int:
        return self._depth

    def run(self, fn):
        with self._lock:
            if self._depth >= self._capacity:
                raise ApiError(503, "over_capacity", "inference queue full",
                               headers={"Retry-After": "1"})
            self._depth += 1
        try:
            replica = self._replicas.get()
            try:
                return fn(replica)
            finally:
                self._replicas.put(replica)
        finally:
            with self._lock:
                self._depth -= 1


def _decode_image(data: bytes) -> np.ndarray:
    try:
        with PILImage.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise ApiError(400, "undecodable_image", f"cannot decode image: {exc}")


def _encode_png(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI()
    state = {"started": time.monotonic(), "pool": None, "checksum": None}
    storage = LocalStorage(config.storage_root, config.url_prefix)

    try:
        model, _ = restore_model(config.model_path)
        state["pool"] = ModelPool(model, config.pool_size, config.queue_capacity)
        state["checksum"] = manifest_hash(config.model_path)
    except FileNotFoundError:
        pass  # served as degraded by /v1/health

    @app.exception_handler(ApiError)
    async def _api_error(_request, exc: ApiError):
        return exc.response()

    def _infer(image: np.ndarray) -> tuple[np.ndarray, dict[str, float]]:
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        inp, restore = eval_transform(image, resize=config.resize)
        timings["preprocess_ms"] = (time.perf_counter() - t0) * 1000

        t0 = time.perf_counter()

        def run(replica):
            with torch.no_grad():
                return replica.predict(inp.unsqueeze(0))
        prob = state["pool"].run(run)
        timings["inference_ms"] = (time.perf_counter() - t0) * 1000

        t0 = time.perf_counter()
        mask = restore(prob)
        mask = postprocess_mask(mask, config.postprocess)
        timings["postprocess_ms"] = (time.perf_counter() - t0) * 1000
        return mask, timings

    async def _read_source(request: Request) -> bytes:
        length = request.headers.get("content-length")
        if length and int(length) > config.byte_limit + 4096:
            raise ApiError(413, "payload_too_large",
                           f"payload exceeds {config.byte_limit} bytes")
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            upload = form.get("image")
            if upload is None:
                raise ApiError(422, "missing_source",
                               "multipart requests need an 'image' file field")
            data = await upload.read()
            if len(data) > config.byte_limit:
                raise ApiError(413, "payload_too_large",
                               f"payload exceeds {config.byte_limit} bytes")
            return data
        if "json" in content_type:
            body = await request.json()
            url = body.get("image_url")
            if not url or len(body) != 1:
                raise ApiError(422, "missing_source",
                               "JSON requests need exactly one field: image_url")
            return _fetch_url(url)
        raise ApiError(415, "unsupported_content_type",
                       f"unsupported content type {content_type!r}")

    def _fetch_url(url: str) -> bytes:
        try:
            resp = httpx.get(url, timeout=10.0, follow_redirects=True)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise ApiError(400, "url_unreachable", f"cannot fetch {url}: {exc}")
        data = resp.content
        if len(data) > config.byte_limit:
            raise ApiError(413, "payload_too_large",
                           f"payload exceeds {config.byte_limit} bytes")
        return data

    @app.post("/v1/remove")
    async def remove_background(request: Request,
                                output_format: str = "rgba_png",
                                response_mode: str = "inline"):
        if output_format not in ("rgba_png", "mask_png"):
            raise ApiError(422, "bad_output_format",
                           "output_format must be rgba_png or mask_png")
        if response_mode not in ("inline", "stored_url"):
            raise ApiError(422, "bad_response_mode",
                           "response_mode must be inline or stored_url")
        if state["pool"] is None:
            raise ApiError(503, "model_not_loaded", "no model checkpoint loaded")

        data = await _read_source(request)
        image = _decode_image(data)
        try:
            mask, timings = _infer(image)
        except ApiError:
            raise
        except Exception as exc:
            correlation = uuid.uuid4().hex[:12]
            raise ApiError(500, "inference_failed",
                           f"internal error (correlation id {correlation}): {exc}")

        mask8 = np.rint(mask * 255.0).astype(np.uint8)
        if output_format == "rgba_png":
            rgb8 = np.rint(image * 255.0).astype(np.uint8)
            payload = _encode_png(np.dstack([rgb8, mask8]), "RGBA")
        else:
            payload = _encode_png(mask8, "L")

        height, width = mask.shape
        if response_mode == "inline":
            timing_header = ",".join(f"{k}={v:.1f}" for k, v in timings.items())
            return Response(content=payload, media_type="image/png",
                            headers={"X-Width": str(width), "X-Height": str(height),
                                     "X-Timings-Ms": timing_header})
        name = f"{uuid.uuid4().hex}.png"
        url = storage.store(name, payload)
        return JSONResponse({"output_url": url, "width": width, "height": height,
                             "timings_ms": timings})

    @app.get("/v1/health")
    async def health():
        loaded = state["pool"] is not None
        body = {
            "status": "ok" if loaded else "degraded",
            "model_checksum": state["checksum"],
            "queue_depth": state["pool"].queue_depth if loaded else None,
            "uptime_s": time.monotonic() - state["started"],
        }
        return JSONResponse(body, status_code=200 if loaded else 503)

    return app


def run_service(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8000):
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port)
