"""Protocol endpoint: POST /v1/classify with base64 PNG payloads, softmax answers.

The served artifact fixes the model role ("building" or "scene") and the label
set. Requests for the other role get a protocol-level error object; items that
fail to decode get a per-item error entry. The response body is always valid
JSON and every returned distribution sums to one.
"""

from __future__ import annotations

import base64
import io
import logging
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .data import center_crop
from .train import load_artifact

log = logging.getLogger(__name__)


class ImageItem(BaseModel):
    id: str
    png_base64: str


class ClassifyRequest(BaseModel):
    model: str
    images: list[ImageItem]


def create_app(artifact_path: Path) -> FastAPI:
    model, classes, role, config = load_artifact(Path(artifact_path))
    app = FastAPI(title="building classifier", version="0.1.0")

    def prepare(png_bytes: bytes) -> torch.Tensor:
        with Image.open(io.BytesIO(png_bytes)) as img:
            rgb = img.convert("RGB").resize(
                (config.source_size, config.source_size), Image.BILINEAR
            )
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
        arr = center_crop(arr, config.crop_size)
        return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)

    @app.post("/v1/classify")
    def classify(request: ClassifyRequest):
        if request.model != role:
            return JSONResponse(
                status_code=400,
                content={
                    "error": f"this endpoint serves the {role!r} model, not {request.model!r}"
                },
            )
        results = []
        for item in request.images:
            try:
                tensor = prepare(base64.b64decode(item.png_base64, validate=True))
            except Exception as exc:
                log.warning("undecodable image %s: %s", item.id, exc)
                results.append({"id": item.id, "error": "undecodable image payload"})
                continue
            with torch.no_grad():
                probs = torch.softmax(model(tensor)[0], dim=0)
            results.append(
                {
                    "id": item.id,
                    "probs": {cls: float(p) for cls, p in zip(classes, probs)},
                }
            )
        return {"results": results}

    return app


def serve(artifact_path: Path, port: int, host: str = "127.0.0.1") -> None:
    """Run the endpoint until interrupted."""
    import uvicorn

    uvicorn.run(create_app(artifact_path), host=host, port=port, log_level="info")
