"""HTTP sidecar turning keyframe images into captions and embeddings.

Endpoints: POST /v1/embed, POST /v1/caption, GET /v1/health. Request
handling is stateless; response items always mirror the request ids in
order, and payload-level problems (bad base64, undecodable image) fail
only their own item. Request-shape problems are 400, oversize batches
413, and model mode without a loaded backend 503.
"""

from __future__ import annotations

import base64
import binascii
import io
from typing import Literal, Protocol

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel

from .config import ServiceConfig


class EmbedItem(BaseModel):
    id: str
    kind: Literal["image", "text"]
    payload: str


class EmbedRequest(BaseModel):
    items: list[EmbedItem]


class CaptionItem(BaseModel):
    id: str
    payload: str


class CaptionRequest(BaseModel):
    items: list[CaptionItem]


class ModelBackend(Protocol):
    """Real encoder/captioner pair; which models is deployment config."""

    model_id: str
    dim: int

    def embed_image(self, image: bytes) -> list[float]: ...

    def embed_text(self, text: str) -> list[float]: ...

    def caption(self, image: bytes) -> str: ...


class ItemError(ValueError):
    """A payload-level problem scoped to one request item."""


def decode_image(payload: str) -> bytes:
    """Base64-decode and verify the bytes parse as an image."""
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ItemError(f"payload is not valid base64: {exc}") from None
    try:
        with Image.open(io.BytesIO(raw)) as img:
            img.verify()
    except (UnidentifiedImageError, OSError):
        # Pillow error text can embed object addresses; keep the message stable.
        raise ItemError("payload does not decode as an image") from None
    return raw


def create_app(config: ServiceConfig | None = None, backend: ModelBackend | None = None) -> FastAPI:
    cfg = config if config is not None else ServiceConfig.from_env()
    app = FastAPI(title="capembed", version="0.1.0")

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def check_batch(n: int) -> None:
        if n > cfg.max_batch:
            raise HTTPException(
                status_code=413, detail=f"batch of {n} exceeds max_batch {cfg.max_batch}"
            )

    def require_backend() -> ModelBackend:
        if backend is None:
            raise HTTPException(status_code=503, detail="model unavailable")
        return backend

    from .stub import expand_unit_vector, stub_caption

    def embed_one(item: EmbedItem) -> dict:
        try:
            if cfg.mode == "stub":
                payload = (
                    decode_image(item.payload)
                    if item.kind == "image"
                    else item.payload.encode("utf-8")
                )
                vector = expand_unit_vector(payload, cfg.stub_seed, cfg.dim)
            elif item.kind == "image":
                vector = require_backend().embed_image(decode_image(item.payload))
            else:
                vector = require_backend().embed_text(item.payload)
        except ItemError as exc:
            return {"id": item.id, "error": str(exc)}
        return {"id": item.id, "vector": vector, "dim": len(vector)}

    def caption_one(item: CaptionItem) -> dict:
        try:
            raw = decode_image(item.payload)
            text = stub_caption(raw) if cfg.mode == "stub" else require_backend().caption(raw)
        except ItemError as exc:
            return {"id": item.id, "error": str(exc)}
        return {"id": item.id, "caption": text}

    @app.get("/v1/health")
    def health() -> dict:
        if cfg.mode == "stub":
            return {"mode": "stub", "model_id": cfg.model_id, "dim": cfg.dim}
        return {
            "mode": "model",
            "model_id": backend.model_id if backend is not None else cfg.model_id,
            "dim": backend.dim if backend is not None else None,
        }

    @app.post("/v1/embed")
    def embed(request: EmbedRequest) -> dict:
        check_batch(len(request.items))
        if cfg.mode == "model":
            require_backend()
        return {"items": [embed_one(item) for item in request.items]}

    @app.post("/v1/caption")
    def caption(request: CaptionRequest) -> dict:
        check_batch(len(request.items))
        if cfg.mode == "model":
            require_backend()
        return {"items": [caption_one(item) for item in request.items]}

    return app
