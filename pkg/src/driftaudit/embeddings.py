"""L2-normalized embedding storage keyed by (video, keyframe, modality).

Image and caption vectors live in one keyed set so the two modalities
cannot drift out of alignment. On-disk format is a compact binary file
(magic, version, dim, count header; float32 little-endian rows) with a
JSONL key sidecar; a pure-JSONL flavor is also read for fixtures and
hand-built inputs. Every vector exposed downstream has unit L2 norm
within 1e-6.
"""

from __future__ import annotations

import base64
import json
import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .chains import ROLE_SEED, AuditDataset
from .errors import DriftAuditError

logger = logging.getLogger(__name__)

MODALITY_IMAGE = "image"
MODALITY_CAPTION = "caption"
MODALITIES = (MODALITY_IMAGE, MODALITY_CAPTION)

_MAGIC = b"EMBF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count
_ZERO_NORM = 1e-8  # below this a vector has no usable direction
_NORM_WARN = 1e-3  # input norms further than this from 1 are logged


class ZeroVector(DriftAuditError):
    """A vector with (near-)zero norm cannot be normalized."""


class DimMismatch(DriftAuditError):
    """Vector dimensions disagree with each other or with expectations."""


class MissingKeyFields(DriftAuditError):
    """A key record lacks one of video_id / keyframe_index / modality."""


class ServiceUnavailable(DriftAuditError):
    """The embedding service could not be reached after retries."""


class PartialFailure(DriftAuditError):
    """Some items failed; successful entries are kept on the error."""

    def __init__(self, keys: Sequence["EmbeddingKey"], embeddings: "EmbeddingSet"):
        self.keys = tuple(keys)
        self.embeddings = embeddings
        super().__init__(f"{len(self.keys)} items failed: {list(self.keys[:3])}...")


class EmbeddingKey(NamedTuple):
    video_id: str
    keyframe_index: int
    modality: str


@dataclass(frozen=True)
class CaptionRecord:
    """A generated caption for one keyframe."""

    video_id: str
    keyframe_index: int
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise DriftAuditError(
                f"empty caption for ({self.video_id!r}, {self.keyframe_index})"
            )


@dataclass(frozen=True)
class KeyframeImage:
    """Locator for one keyframe's image file."""

    video_id: str
    keyframe_index: int
    path: Path


def normalize(vector: np.ndarray) -> np.ndarray:
    """Project a vector onto the unit sphere; idempotent."""
    v = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < _ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    return v / norm


class EmbeddingSet:
    """Immutable map of EmbeddingKey -> unit vector, single dimension.

    ``dim`` may be None only while the set is empty.
    """

    def __init__(self, dim: int | None, entries: Mapping[EmbeddingKey, np.ndarray]):
        if entries and (dim is None or dim < 2):
            raise DimMismatch(f"a non-empty set needs dim >= 2, got {dim}")
        self._dim = dim
        checked: dict[EmbeddingKey, np.ndarray] = {}
        for key, vec in entries.items():
            key = EmbeddingKey(*key)
            if key.modality not in MODALITIES:
                raise MissingKeyFields(f"unknown modality {key.modality!r} for {key}")
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (dim,):
                raise DimMismatch(f"vector for {key} has shape {v.shape}, expected ({dim},)")
            if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
                raise DimMismatch(f"vector for {key} is not unit norm")
            v.setflags(write=False)
            checked[key] = v
        self._entries = checked

    @property
    def dim(self) -> int | None:
        return self._dim

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: EmbeddingKey) -> bool:
        return EmbeddingKey(*key) in self._entries

    def get(self, key: EmbeddingKey) -> np.ndarray | None:
        return self._entries.get(EmbeddingKey(*key))

    def keys(self) -> list[EmbeddingKey]:
        return sorted(self._entries)

    def items(self) -> list[tuple[EmbeddingKey, np.ndarray]]:
        return [(k, self._entries[k]) for k in self.keys()]

    def keys_for_video(self, video_id: str, modality: str) -> list[EmbeddingKey]:
        return sorted(
            k for k in self._entries if k.video_id == video_id and k.modality == modality
        )

    @classmethod
    def from_raw(
        cls, dim: int | None, raw: Mapping[EmbeddingKey, np.ndarray], warn: bool = True
    ) -> "EmbeddingSet":
        """Build a set from un-normalized vectors, normalizing each.

        ``warn=False`` silences the norm-deviation log for sources that
        are legitimately unnormalized (e.g. synthetic ground truth).
        """
        entries = {}
        for key, vec in raw.items():
            key = EmbeddingKey(*key)
            v = np.asarray(vec, dtype=np.float64)
            norm = float(np.linalg.norm(v))
            if norm < _ZERO_NORM:
                raise ZeroVector(f"near-zero vector for {key} (norm {norm:g})")
            if warn and abs(norm - 1.0) > _NORM_WARN:
                logger.warning("vector for %s had norm %.6f, renormalized", key, norm)
            entries[key] = v / norm
        return cls(dim=dim, entries=entries)


def merge_embeddings(*sets: EmbeddingSet) -> EmbeddingSet:
    """Union of keyed sets; mixed dims are errors.

    A key present in several sets is fine when the vectors agree (the
    same video can show up in more than one dataset); conflicting
    vectors for one key are an error, never silently overwritten.
    """
    dims = {s.dim for s in sets if s.dim is not None and len(s)}
    if len(dims) > 1:
        raise DimMismatch(f"cannot merge sets with dims {sorted(dims)}")
    dim = dims.pop() if dims else next((s.dim for s in sets if s.dim is not None), None)
    merged: dict[EmbeddingKey, np.ndarray] = {}
    for s in sets:
        for key, vec in s.items():
            existing = merged.get(key)
            if existing is not None and not np.array_equal(existing, vec):
                raise DriftAuditError(f"conflicting vectors for duplicate key: {key}")
            merged[key] = vec
    return EmbeddingSet(dim, merged)


def _keys_sidecar(path: Path) -> Path:
    return path.with_suffix(".keys.jsonl")


def save_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    """Write the binary .embf file plus its JSONL key sidecar.

    Rows are sorted by key, so identical sets serialize byte-identically.
    """
    path = Path(path)
    items = emb.items()
    dim = emb.dim if emb.dim is not None else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, dim, len(items)))
        for _, vec in items:
            f.write(vec.astype("<f4").tobytes())
    with open(_keys_sidecar(path), "w", encoding="utf-8") as f:
        for key, _ in items:
            f.write(
                json.dumps(
                    {
                        "video_id": key.video_id,
                        "keyframe_index": key.keyframe_index,
                        "modality": key.modality,
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )


def _parse_key_obj(obj: dict, where: str) -> EmbeddingKey:
    for name in ("video_id", "keyframe_index", "modality"):
        if name not in obj:
            raise MissingKeyFields(f"{where}: missing {name!r}")
    if obj["modality"] not in MODALITIES:
        raise MissingKeyFields(f"{where}: unknown modality {obj['modality']!r}")
    return EmbeddingKey(obj["video_id"], int(obj["keyframe_index"]), obj["modality"])


def _load_binary(path: Path, expected_dim: int | None) -> EmbeddingSet:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DimMismatch(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise DimMismatch(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DimMismatch(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != count * dim * 4:
        raise DimMismatch(
            f"{path}: body is {len(body)} bytes, header promises {count} x {dim} float32 rows"
        )
    rows = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)

    keys: list[EmbeddingKey] = []
    keys_path = _keys_sidecar(path)
    if count:
        with open(keys_path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if line.strip():
                    keys.append(_parse_key_obj(json.loads(line), f"{keys_path}:{line_no}"))
    if len(keys) != count:
        raise MissingKeyFields(f"{keys_path}: {len(keys)} keys for {count} rows")
    if expected_dim is not None and count and dim != expected_dim:
        raise DimMismatch(f"{path}: dim {dim} != expected {expected_dim}")
    raw = {key: rows[i] for i, key in enumerate(keys)}
    effective_dim = dim if count else (expected_dim if expected_dim is not None else dim or None)
    return EmbeddingSet.from_raw(effective_dim or None, raw) if count else EmbeddingSet(
        effective_dim, {}
    )


def _load_jsonl(path: Path, expected_dim: int | None) -> EmbeddingSet:
    raw: dict[EmbeddingKey, np.ndarray] = {}
    dim = expected_dim
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            key = _parse_key_obj(obj, f"{path}:{line_no}")
            if "vector" not in obj:
                raise MissingKeyFields(f"{path}:{line_no}: missing 'vector'")
            vec = np.asarray(obj["vector"], dtype=np.float64)
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DimMismatch(f"{path}:{line_no}: vector dim {len(vec)} != {dim}")
            raw[key] = vec
    if not raw:
        if expected_dim is None:
            raise DimMismatch(f"{path}: empty file and no expected_dim to take dim from")
        return EmbeddingSet(expected_dim, {})
    return EmbeddingSet.from_raw(dim, raw)


def load_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingSet:
    """Load embeddings from .embf (binary) or .jsonl, normalizing on load."""
    path = Path(path)
    if path.stat().st_size == 0:
        if expected_dim is None:
            raise DimMismatch(f"{path}: empty file and no expected_dim to take dim from")
        return EmbeddingSet(expected_dim, {})
    if path.suffix == ".jsonl":
        return _load_jsonl(path, expected_dim)
    return _load_binary(path, expected_dim)


class EmbedServiceClient:
    """Thin HTTP client for the caption/embed sidecar.

    Transient transport failures and 5xx responses are retried with a
    short backoff; anything else surfaces as ServiceUnavailable.
    """

    def __init__(self, base_url: str, timeout: float = 30.0, max_retries: int = 2):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self._session = requests.Session()

    def _post(self, route: str, payload: dict) -> dict:
        import requests

        url = f"{self.base_url}{route}"
        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(url, json=payload, timeout=self.timeout)
                if resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                else:
                    resp.raise_for_status()
                    return resp.json()
            except requests.RequestException as exc:
                last_error = str(exc)
            if attempt < self.max_retries:
                time.sleep(0.2 * 2**attempt)
        raise ServiceUnavailable(f"POST {url} failed after retries: {last_error}")

    def health(self) -> dict:
        import requests

        try:
            resp = self._session.get(f"{self.base_url}/v1/health", timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except requests.RequestException as exc:
            raise ServiceUnavailable(f"health check failed: {exc}") from None

    def embed(self, items: list[dict]) -> list[dict]:
        return self._post("/v1/embed", {"items": items})["items"]

    def caption(self, items: list[dict]) -> list[dict]:
        return self._post("/v1/caption", {"items": items})["items"]


def _item_id(key: EmbeddingKey) -> str:
    # modality and index are colon-free, so the video_id may contain colons
    return f"{key.modality}:{key.keyframe_index}:{key.video_id}"


def fetch_embeddings(
    client: EmbedServiceClient,
    captions: Sequence[CaptionRecord],
    images: Sequence[KeyframeImage],
    batch_size: int = 32,
    expected_dim: int | None = None,
    strict: bool = False,
) -> tuple[EmbeddingSet, list[EmbeddingKey]]:
    """Embed captions and keyframe images through the sidecar.

    Returns the set of successful entries plus the keys that failed;
    per-item failures never discard the rest of the batch (with
    strict=True they raise PartialFailure carrying both instead). With
    no items the service is never contacted. When the service reports a
    dim that contradicts ``expected_dim``, raises DimMismatch before
    any batch.
    """
    if batch_size < 1:
        raise DriftAuditError("batch_size must be >= 1")
    requests_items: list[tuple[EmbeddingKey, dict]] = []
    for cap in captions:
        key = EmbeddingKey(cap.video_id, cap.keyframe_index, MODALITY_CAPTION)
        requests_items.append((key, {"id": _item_id(key), "kind": "text", "payload": cap.text}))
    for img in images:
        key = EmbeddingKey(img.video_id, img.keyframe_index, MODALITY_IMAGE)
        payload = base64.b64encode(Path(img.path).read_bytes()).decode("ascii")
        requests_items.append((key, {"id": _item_id(key), "kind": "image", "payload": payload}))

    if not requests_items:
        return EmbeddingSet(expected_dim, {}), []

    if expected_dim is not None:
        service_dim = client.health().get("dim")
        if service_dim is not None and service_dim != expected_dim:
            raise DimMismatch(f"service dim {service_dim} != expected {expected_dim}")

    raw: dict[EmbeddingKey, np.ndarray] = {}
    failed: list[EmbeddingKey] = []
    dim = expected_dim
    for start in range(0, len(requests_items), batch_size):
        batch = requests_items[start : start + batch_size]
        by_id = {item["id"]: key for key, item in batch}
        responses = client.embed([item for _, item in batch])
        seen = set()
        for entry in responses:
            key = by_id.get(entry.get("id"))
            if key is None:
                continue
            seen.add(entry["id"])
            if entry.get("error") or entry.get("vector") is None:
                failed.append(key)
                continue
            vec = np.asarray(entry["vector"], dtype=np.float64)
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DimMismatch(f"service returned dim {len(vec)} != {dim} for {key}")
            raw[key] = vec
        failed.extend(key for item_id, key in by_id.items() if item_id not in seen)

    result = EmbeddingSet.from_raw(dim, raw)
    failed = sorted(failed)
    if failed and strict:
        raise PartialFailure(failed, result)
    return result, failed


@dataclass(frozen=True)
class PointLabel:
    video_id: str
    keyframe_index: int
    modality: str
    domain: str
    group: str  # seed | recommended
    depth: int


@dataclass(frozen=True)
class PointCloud:
    """A stack of unit vectors with per-point provenance."""

    points: np.ndarray  # (n, dim) float64
    labels: tuple[PointLabel, ...]
    gaps: tuple[str, ...] = ()  # coverage gaps found while grouping

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "gaps", tuple(self.gaps))
        if self.points.ndim != 2 or self.points.shape[0] != len(self.labels):
            raise DimMismatch(
                f"points shape {self.points.shape} does not match {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return self.points.shape[0]


def group_points(
    dataset: AuditDataset,
    emb: EmbeddingSet,
    modality: str,
    group: str,
    keyframes: Mapping[str, object] | None = None,
) -> PointCloud:
    """All vectors of one modality whose video role matches ``group``.

    Point order follows the dataset (chains in order, keyframes
    ascending). With a keyframes map, coverage gaps are reported per
    missing (video, keyframe) pair; otherwise per video with no entries.
    """
    if modality not in MODALITIES:
        raise MissingKeyFields(f"unknown modality {modality!r}")
    if group not in ("seed", "recommended"):
        raise DriftAuditError(f"unknown group {group!r}")
    vectors: list[np.ndarray] = []
    labels: list[PointLabel] = []
    gaps: list[str] = []
    for record in dataset.videos():
        role_group = "seed" if record.role == ROLE_SEED else "recommended"
        if role_group != group:
            continue
        if keyframes is not None:
            entry = keyframes.get(record.video_id)
            expected = [int(i) for i in entry.indices] if entry is not None else []
            found_keys = [
                EmbeddingKey(record.video_id, i, modality)
                for i in expected
                if EmbeddingKey(record.video_id, i, modality) in emb
            ]
            gaps.extend(
                f"{record.video_id}:{i}:{modality}"
                for i in expected
                if EmbeddingKey(record.video_id, i, modality) not in emb
            )
        else:
            found_keys = emb.keys_for_video(record.video_id, modality)
            if not found_keys:
                gaps.append(f"{record.video_id}:*:{modality}")
        for key in found_keys:
            vectors.append(emb.get(key))
            labels.append(
                PointLabel(
                    video_id=record.video_id,
                    keyframe_index=key.keyframe_index,
                    modality=modality,
                    domain=record.domain_label,
                    group=group,
                    depth=record.depth,
                )
            )
    dim = emb.dim if emb.dim is not None else 2
    points = np.vstack(vectors) if vectors else np.empty((0, dim), dtype=np.float64)
    return PointCloud(points=points, labels=tuple(labels), gaps=tuple(gaps))


def mean_pool_per_video(cloud: PointCloud) -> PointCloud:
    """Collapse each video's keyframe points to one renormalized mean.

    Pooled labels carry keyframe_index -1. Effect on the divergence
    metrics is undocumented; per-keyframe analysis is the default.
    """
    order: list[str] = []
    grouped: dict[str, list[int]] = {}
    for i, label in enumerate(cloud.labels):
        if label.video_id not in grouped:
            grouped[label.video_id] = []
            order.append(label.video_id)
        grouped[label.video_id].append(i)
    vectors = []
    labels = []
    for video_id in order:
        rows = grouped[video_id]
        pooled = cloud.points[rows].mean(axis=0)
        vectors.append(normalize(pooled))
        first = cloud.labels[rows[0]]
        labels.append(
            PointLabel(
                video_id=video_id,
                keyframe_index=-1,
                modality=first.modality,
                domain=first.domain,
                group=first.group,
                depth=first.depth,
            )
        )
    points = np.vstack(vectors) if vectors else cloud.points[:0]
    return PointCloud(points=points, labels=tuple(labels), gaps=cloud.gaps)
