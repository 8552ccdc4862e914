import base64
import io

import pytest
from fastapi.testclient import TestClient
from PIL import Image

from capembed import ServiceConfig, create_app


def png_bytes(rgb: tuple[int, int, int], size: tuple[int, int] = (8, 6)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, rgb).save(buf, format="PNG")
    return buf.getvalue()


def b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


@pytest.fixture
def cfg() -> ServiceConfig:
    return ServiceConfig(mode="stub", stub_seed=7, dim=8, max_batch=4)


@pytest.fixture
def client(cfg) -> TestClient:
    return TestClient(create_app(cfg))
