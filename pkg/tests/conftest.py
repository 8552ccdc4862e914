"""Shared builders for chains, frame clips, embedding clouds, and the
stub embedding service."""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

from driftaudit.chains import AuditDataset, RecommendationChain, VideoRecord
from driftaudit.embeddings import EmbeddingKey, EmbeddingSet, normalize
from driftaudit.keyframes import FrameSequence


def make_record(
    video_id: str,
    depth: int = 0,
    seed_id: str | None = None,
    domain: str = "test",
    keyword: str = "",
    frame_dir: str | None = None,
) -> VideoRecord:
    role = "seed" if depth == 0 else "recommended"
    return VideoRecord(
        video_id=video_id,
        domain_label=domain,
        role=role,
        depth=depth,
        seed_id=video_id if depth == 0 else (seed_id or "seed"),
        keyword=keyword,
        frame_dir=frame_dir,
    )


def make_chain(
    seed_id: str,
    n_recs: int,
    session_id: str | None = None,
    domain: str = "test",
    rec_prefix: str | None = None,
) -> RecommendationChain:
    prefix = rec_prefix if rec_prefix is not None else f"{seed_id}-r"
    recs = tuple(
        make_record(f"{prefix}{d}", depth=d, seed_id=seed_id, domain=domain)
        for d in range(1, n_recs + 1)
    )
    return RecommendationChain(
        seed=make_record(seed_id, domain=domain),
        recs=recs,
        session_id=session_id or f"{seed_id}-session",
    )


def make_dataset(
    n_chains: int = 3,
    depth: int = 4,
    domain: str = "test",
    name: str = "test",
    seed_prefix: str = "s",
) -> AuditDataset:
    chains = tuple(
        make_chain(f"{seed_prefix}{i}", depth, domain=domain) for i in range(n_chains)
    )
    return AuditDataset(name=name, max_depth=depth, chains=chains)


def solid_frame(rgb: tuple[int, int, int], size: tuple[int, int] = (24, 16)) -> np.ndarray:
    h, w = size
    frame = np.empty((h, w, 3), dtype=np.uint8)
    frame[..., 0], frame[..., 1], frame[..., 2] = rgb
    return frame


def constant_clip(n_frames: int = 20, rgb=(90, 120, 40)) -> FrameSequence:
    return FrameSequence.from_frames([solid_frame(rgb) for _ in range(n_frames)])


def two_scene_clip(n_frames: int = 30, cut: int = 15) -> FrameSequence:
    frames = [solid_frame((200, 40, 40)) if i < cut else solid_frame((30, 60, 220))
              for i in range(n_frames)]
    return FrameSequence.from_frames(frames)


def noise_clip(n_frames: int, rng: np.random.Generator, size=(24, 16)) -> FrameSequence:
    h, w = size
    frames = rng.integers(0, 256, size=(n_frames, h, w, 3), dtype=np.uint8)
    return FrameSequence(frames=frames)


def write_frame_dir(path, seq: FrameSequence) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        Image.fromarray(seq.frames[i]).save(path / f"{i:06d}.png")


def random_cloud(rng: np.random.Generator, n: int, dim: int, scale: float = 1.0) -> np.ndarray:
    return rng.standard_normal((n, dim)) * scale


def unit_cloud(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    pts = rng.standard_normal((n, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def embedding_set_for(
    dataset: AuditDataset,
    rng: np.random.Generator,
    dim: int = 6,
    modalities: tuple[str, ...] = ("image", "caption"),
    keyframe_indices: tuple[int, ...] = (0,),
) -> EmbeddingSet:
    entries = {}
    for record in dataset.videos():
        for modality in modalities:
            for idx in keyframe_indices:
                key = EmbeddingKey(record.video_id, idx, modality)
                if key not in entries:
                    entries[key] = normalize(rng.standard_normal(dim))
    return EmbeddingSet(dim, entries)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260815)


class StubServiceHandler(BaseHTTPRequestHandler):
    """Programmable embed-service stub: the server instance carries the
    behavior (health payload, per-item embed function, failure budget)."""

    def log_message(self, *args):
        pass

    def do_GET(self):
        self.server.calls.append(("GET", self.path))
        if self.path == "/v1/health":
            self._reply(200, self.server.health_payload)
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        self.server.calls.append(("POST", self.path))
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        fail_budget = self.server.failures_remaining
        if fail_budget > 0:
            self.server.failures_remaining = fail_budget - 1
            self._reply(503, {"error": "warming up"})
            return
        if self.path == "/v1/embed":
            self._reply(200, {"items": [self.server.embed_item(i) for i in body["items"]]})
        elif self.path == "/v1/caption":
            items = [{"id": i["id"], "caption": f"caption of {i['id']}"} for i in body["items"]]
            self._reply(200, {"items": items})
        else:
            self._reply(404, {"error": "not found"})

    def _reply(self, status, payload):
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def stub_embed_item(item, dim=4):
    """Deterministic unit vector derived from the item id alone."""
    digest = hashlib.sha256(item["id"].encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return {"id": item["id"], "vector": list(vec), "dim": dim}


@pytest.fixture
def stub_service():
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubServiceHandler)
    server.calls = []
    server.failures_remaining = 0
    server.health_payload = {"mode": "stub", "model_id": "stub", "dim": 4}
    server.embed_item = stub_embed_item
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server, f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join()
