"""Config-driven audit pipeline with content-hash cached stages.

One JSON config describes the whole run: where chains come from (files
or the synthetic graph), where frames and embeddings come from, and
which stages to execute. Stages run in dependency order (collect,
keyframes, embed, analyze, project); each writes its artifacts under
the output directory plus a manifest entry keyed by a hash of its
inputs, so re-running with unchanged inputs skips completed work.
Caching is content-addressed, never timestamp-based, because reports
and plot CSVs must be byte-identical across reruns. One pipeline
instance owns an output directory at a time via a lock file.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .analysis import (
    AnalysisConfig,
    TooFewPoints,
    _resolve_domain,
    analyze_single_domain,
    build_clouds,
    compare_domains,
    report_from_clouds,
    report_to_json,
    report_to_text,
)
from .chains import AuditDataset, parse_dataset, serialize_dataset
from .collect import (
    SyntheticGraphParams,
    VideoDescriptor,
    WalkConfig,
    build_synthetic_provider,
    collect_dataset,
)
from .embeddings import (
    MODALITIES,
    CaptionRecord,
    EmbeddingSet,
    EmbedServiceClient,
    KeyframeImage,
    PointCloud,
    fetch_embeddings,
    group_points,
    load_embeddings,
    merge_embeddings,
    save_embeddings,
)
from .errors import DriftAuditError
from .keyframes import KeyframeConfig, KeyframeSet, extract_keyframes, load_frame_dir
from .projection import HullPolygon, convex_hull, emit_plot_data, import_coords, pca_project

logger = logging.getLogger(__name__)

STAGES = ("collect", "keyframes", "embed", "analyze", "project")
EMBED_MODES = ("file", "service", "synthetic-ground-truth")
_COMBINED_KEY = "combined"


class ConfigError(DriftAuditError):
    """The config is invalid; findings holds every violation found."""

    def __init__(self, findings: Sequence[str]):
        self.findings = tuple(findings)
        super().__init__("; ".join(self.findings))


class LockHeld(DriftAuditError):
    """Another pipeline instance owns this output directory."""


class StageError(DriftAuditError):
    """A stage failed; upstream artifacts are preserved."""

    def __init__(self, stage: str, reason: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {reason}")


@dataclass(frozen=True)
class SyntheticCollectSpec:
    """How to generate one dataset from the synthetic graph."""

    n_topics: int
    videos_per_topic: int
    drift: float
    embed_dim: int
    n_seeds: int
    depth: int = 10
    seeds_topic: int = 0
    topic_spread: float = 1.0
    rng_seed: int = 0
    seeds: tuple[str, ...] = ()
    id_prefix: str | None = None  # None -> "<dataset key>-"

    def to_dict(self) -> dict:
        return {
            "n_topics": self.n_topics,
            "videos_per_topic": self.videos_per_topic,
            "drift": self.drift,
            "embed_dim": self.embed_dim,
            "n_seeds": self.n_seeds,
            "depth": self.depth,
            "seeds_topic": self.seeds_topic,
            "topic_spread": self.topic_spread,
            "rng_seed": self.rng_seed,
            "seeds": list(self.seeds),
            "id_prefix": self.id_prefix,
        }


@dataclass(frozen=True)
class DatasetSpec:
    """One audit domain: either a pre-collected file or a synthetic spec."""

    key: str
    name: str
    path: Path | None = None
    synthetic: SyntheticCollectSpec | None = None

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "name": self.name,
            "path": self.path.as_posix() if self.path else None,
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
        }


@dataclass(frozen=True)
class EmbeddingSourceSpec:
    """Exactly one origin for vectors: file, service, or ground truth."""

    mode: str
    paths: tuple[tuple[str, Path], ...] = ()  # dataset key (or combined) -> file
    url: str | None = None
    batch_size: int = 32
    expected_dim: int | None = None

    def path_map(self) -> dict[str, Path]:
        return dict(self.paths)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "paths": {k: p.as_posix() for k, p in self.paths},
            "url": self.url,
            "batch_size": self.batch_size,
            "expected_dim": self.expected_dim,
        }


@dataclass(frozen=True)
class ProjectionSpec:
    method: str = "pca"  # pca | import
    coords: tuple[tuple[str, Path], ...] = ()  # modality -> CSV of x,y
    hull_recs: bool = False

    def coords_map(self) -> dict[str, Path]:
        return dict(self.coords)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "coords": {m: p.as_posix() for m, p in self.coords},
            "hull_recs": self.hull_recs,
        }


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: Path
    datasets: tuple[DatasetSpec, ...]
    embedding: EmbeddingSourceSpec
    frames_root: Path | None = None
    keyframes: KeyframeConfig = KeyframeConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    projection: ProjectionSpec = ProjectionSpec()
    stages: tuple[str, ...] = ()
    on_projection: bool = False

    def dataset(self, key: str) -> DatasetSpec:
        for spec in self.datasets:
            if spec.key == key:
                return spec
        raise KeyError(key)

    def selected_stages(self) -> tuple[str, ...]:
        if self.stages:
            return self.stages
        default = [s for s in STAGES if s != "keyframes" or self.frames_root is not None]
        return tuple(default)


def _get(raw: dict, key: str, kind, default, findings: list[str], where: str):
    value = raw.get(key, default)
    if value is default:
        return default
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        findings.append(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
        return default
    return value


def parse_config(raw: dict, base_dir: Path) -> PipelineConfig:
    """Build a typed config from JSON, collecting every structural
    violation into one ConfigError. Relative paths resolve against the
    config file's directory."""
    findings: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])

    def _path(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    out_dir_raw = _get(raw, "out_dir", str, None, findings, "config")
    if out_dir_raw is None:
        findings.append("config.out_dir: required")
    frames_root_raw = _get(raw, "frames_root", str, None, findings, "config")

    datasets: list[DatasetSpec] = []
    raw_datasets = raw.get("datasets")
    if not isinstance(raw_datasets, dict) or "A" not in raw_datasets:
        findings.append("config.datasets: must be an object with at least dataset 'A'")
        raw_datasets = {}
    for key in sorted(raw_datasets):
        if key not in ("A", "B"):
            findings.append(f"config.datasets.{key}: only keys 'A' and 'B' are supported")
            continue
        entry = raw_datasets[key]
        where = f"datasets.{key}"
        if not isinstance(entry, dict):
            findings.append(f"{where}: must be an object")
            continue
        name = _get(entry, "name", str, key, findings, where)
        path_raw = _get(entry, "path", str, None, findings, where)
        syn_raw = entry.get("synthetic")
        synthetic = None
        if syn_raw is not None:
            if not isinstance(syn_raw, dict):
                findings.append(f"{where}.synthetic: must be an object")
                continue
            sw = f"{where}.synthetic"
            seeds_raw = syn_raw.get("seeds", [])
            if not isinstance(seeds_raw, list) or any(
                not isinstance(s, str) for s in seeds_raw
            ):
                findings.append(f"{sw}.seeds: must be a list of video ids")
                seeds_raw = []
            synthetic = SyntheticCollectSpec(
                n_topics=_get(syn_raw, "n_topics", int, 0, findings, sw),
                videos_per_topic=_get(syn_raw, "videos_per_topic", int, 0, findings, sw),
                drift=_get(syn_raw, "drift", float, 0.0, findings, sw),
                embed_dim=_get(syn_raw, "embed_dim", int, 0, findings, sw),
                n_seeds=_get(syn_raw, "n_seeds", int, 0, findings, sw),
                depth=_get(syn_raw, "depth", int, 10, findings, sw),
                seeds_topic=_get(syn_raw, "seeds_topic", int, 0, findings, sw),
                topic_spread=_get(syn_raw, "topic_spread", float, 1.0, findings, sw),
                rng_seed=_get(syn_raw, "rng_seed", int, 0, findings, sw),
                seeds=tuple(seeds_raw),
                id_prefix=_get(syn_raw, "id_prefix", str, None, findings, sw),
            )
        datasets.append(
            DatasetSpec(
                key=key,
                name=name,
                path=_path(path_raw) if path_raw else None,
                synthetic=synthetic,
            )
        )

    emb_raw = raw.get("embedding", {})
    if not isinstance(emb_raw, dict):
        findings.append("config.embedding: must be an object")
        emb_raw = {}
    mode = _get(emb_raw, "mode", str, "", findings, "embedding")
    paths: list[tuple[str, Path]] = []
    if "path" in emb_raw:
        single = _get(emb_raw, "path", str, None, findings, "embedding")
        if single:
            paths.append((_COMBINED_KEY, _path(single)))
    if "paths" in emb_raw and isinstance(emb_raw["paths"], dict):
        for key in sorted(emb_raw["paths"]):
            paths.append((key, _path(str(emb_raw["paths"][key]))))
    embedding = EmbeddingSourceSpec(
        mode=mode,
        paths=tuple(paths),
        url=_get(emb_raw, "url", str, None, findings, "embedding"),
        batch_size=_get(emb_raw, "batch_size", int, 32, findings, "embedding"),
        expected_dim=_get(emb_raw, "expected_dim", int, None, findings, "embedding"),
    )

    kf_raw = raw.get("keyframes", {})
    if not isinstance(kf_raw, dict):
        findings.append("config.keyframes: must be an object")
        kf_raw = {}
    try:
        keyframes = KeyframeConfig(
            lam=_get(kf_raw, "lam", float, 1.5, findings, "keyframes"),
            min_gap=_get(kf_raw, "min_gap", int, 5, findings, "keyframes"),
            smoothing_window=_get(kf_raw, "smoothing_window", int, 3, findings, "keyframes"),
        )
    except DriftAuditError as exc:
        findings.append(f"keyframes: {exc}")
        keyframes = KeyframeConfig()

    an_raw = raw.get("analysis", {})
    if not isinstance(an_raw, dict):
        findings.append("config.analysis: must be an object")
        an_raw = {}
    try:
        analysis = AnalysisConfig(
            k_codebook=_get(an_raw, "k_codebook", int, 64, findings, "analysis"),
            n_slices=_get(an_raw, "n_slices", int, 128, findings, "analysis"),
            rng_seed=_get(an_raw, "rng_seed", int, 0, findings, "analysis"),
            max_exact_n=_get(an_raw, "max_exact_n", int, 2000, findings, "analysis"),
        )
    except DriftAuditError as exc:
        findings.append(f"analysis: {exc}")
        analysis = AnalysisConfig()
    on_projection = _get(an_raw, "on_projection", bool, False, findings, "analysis")

    proj_raw = raw.get("projection", {})
    if not isinstance(proj_raw, dict):
        findings.append("config.projection: must be an object")
        proj_raw = {}
    method = _get(proj_raw, "method", str, "pca", findings, "projection")
    coords: list[tuple[str, Path]] = []
    coords_raw = proj_raw.get("coords", {})
    if isinstance(coords_raw, dict):
        for modality in sorted(coords_raw):
            if modality not in MODALITIES:
                findings.append(f"projection.coords: unknown modality {modality!r}")
                continue
            coords.append((modality, _path(str(coords_raw[modality]))))
    projection = ProjectionSpec(
        method=method,
        coords=tuple(coords),
        hull_recs=_get(proj_raw, "hull_recs", bool, False, findings, "projection"),
    )

    stages_raw = raw.get("stages", [])
    stages: list[str] = []
    if not isinstance(stages_raw, list):
        findings.append("config.stages: must be a list of stage names")
    else:
        for stage in stages_raw:
            if stage not in STAGES:
                findings.append(f"config.stages: unknown stage {stage!r}")
            elif stage not in stages:
                stages.append(stage)
    stages.sort(key=STAGES.index)

    if findings:
        raise ConfigError(findings)
    return PipelineConfig(
        out_dir=_path(out_dir_raw),
        datasets=tuple(datasets),
        embedding=embedding,
        frames_root=_path(frames_root_raw) if frames_root_raw else None,
        keyframes=keyframes,
        analysis=analysis,
        projection=projection,
        stages=tuple(stages),
        on_projection=on_projection,
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from None
    return parse_config(raw, path.parent.resolve())


def validate_config(cfg: PipelineConfig) -> list[str]:
    """Semantic checks; returns all violations, not just the first."""
    findings: list[str] = []
    selected = cfg.selected_stages()

    for spec in cfg.datasets:
        where = f"datasets.{spec.key}"
        if (spec.path is None) == (spec.synthetic is None):
            findings.append(f"{where}: exactly one of 'path' or 'synthetic' is required")
        if spec.path is not None and not spec.path.exists():
            findings.append(f"{where}.path: {spec.path} does not exist")
        if spec.synthetic is not None:
            syn = spec.synthetic
            if syn.depth < 1:
                findings.append(
                    f"{where}.synthetic.depth: must be >= 1 (chains need at least one"
                    f" recommendation step), got {syn.depth}"
                )
            try:
                SyntheticGraphParams(
                    n_topics=syn.n_topics,
                    videos_per_topic=syn.videos_per_topic,
                    drift=syn.drift,
                    embed_dim=syn.embed_dim,
                    topic_spread=syn.topic_spread,
                    rng_seed=syn.rng_seed,
                )
            except DriftAuditError as exc:
                findings.append(f"{where}.synthetic: {exc}")
            if syn.n_seeds < 1 and not syn.seeds:
                findings.append(f"{where}.synthetic.n_seeds: must be >= 1")
            if not syn.seeds and 0 <= syn.seeds_topic < syn.n_topics:
                if syn.n_seeds > syn.videos_per_topic:
                    findings.append(
                        f"{where}.synthetic: n_seeds {syn.n_seeds} exceeds"
                        f" videos_per_topic {syn.videos_per_topic}"
                    )
            if not syn.seeds and not 0 <= syn.seeds_topic < max(syn.n_topics, 1):
                findings.append(
                    f"{where}.synthetic.seeds_topic: {syn.seeds_topic} outside"
                    f" [0, {syn.n_topics})"
                )

    if "keyframes" in selected:
        if cfg.frames_root is None:
            findings.append("frames_root: required when the keyframes stage is enabled")
        elif not cfg.frames_root.is_dir():
            findings.append(f"frames_root: {cfg.frames_root} is not a directory")

    emb = cfg.embedding
    if emb.mode not in EMBED_MODES:
        findings.append(f"embedding.mode: must be one of {list(EMBED_MODES)}, got {emb.mode!r}")
    if emb.paths and emb.url:
        findings.append(
            "embedding: two sources set: file path(s) and service url; keep exactly one"
        )
    if emb.mode == "file":
        path_map = emb.path_map()
        if not path_map:
            findings.append("embedding: mode 'file' needs 'path' or per-dataset 'paths'")
        keys = set(path_map)
        if _COMBINED_KEY not in keys:
            missing = [s.key for s in cfg.datasets if s.key not in keys]
            if missing:
                findings.append(f"embedding.paths: missing entries for datasets {missing}")
        for key, path in sorted(path_map.items()):
            if not path.exists():
                findings.append(f"embedding.paths.{key}: {path} does not exist")
    elif emb.mode == "service":
        if not (emb.url or os.environ.get("EMBED_SERVICE_URL")):
            findings.append("embedding: mode 'service' needs 'url' or EMBED_SERVICE_URL")
    elif emb.mode == "synthetic-ground-truth":
        non_synthetic = [s.key for s in cfg.datasets if s.synthetic is None]
        if non_synthetic:
            findings.append(
                "embedding: synthetic-ground-truth needs synthetic dataset specs;"
                f" datasets {non_synthetic} come from files"
            )
    if emb.batch_size < 1:
        findings.append(f"embedding.batch_size: must be >= 1, got {emb.batch_size}")

    if cfg.projection.method not in ("pca", "import"):
        findings.append(
            f"projection.method: must be 'pca' or 'import', got {cfg.projection.method!r}"
        )
    if cfg.projection.method == "import" and "project" in selected:
        coords = cfg.projection.coords_map()
        for modality in MODALITIES:
            if modality not in coords:
                findings.append(f"projection.coords: missing file for modality {modality!r}")
            elif not coords[modality].exists():
                findings.append(
                    f"projection.coords.{modality}: {coords[modality]} does not exist"
                )

    try:
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        findings.append(f"out_dir: cannot create {cfg.out_dir}: {exc}")
    else:
        if not os.access(cfg.out_dir, os.W_OK):
            findings.append(f"out_dir: {cfg.out_dir} is not writable")
    return findings


@dataclass
class PipelineResult:
    manifest: dict
    ran: list[str]
    cached: list[str]
    failed: str | None = None
    error: str | None = None

    @property
    def exit_code(self) -> int:
        if self.failed is None:
            return 0
        return 4 if self.ran else 3


def _sha_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return _sha_bytes(
        json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    )


@contextmanager
def _lock(out_dir: Path):
    lock_path = out_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(
            f"{lock_path} exists; another pipeline instance owns this output directory"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


class _Runner:
    """Executes stages against one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self._provider_cache: dict[str, object] = {}

    # ---- artifact paths ----

    def chains_path(self, key: str) -> Path:
        return self.out / "collect" / f"{key}.jsonl"

    def groundtruth_path(self, key: str) -> Path:
        return self.out / "collect" / f"{key}.groundtruth.jsonl"

    def keyframes_path(self) -> Path:
        return self.out / "keyframes" / "keyframes.jsonl"

    def embed_path(self, key: str) -> Path:
        return self.out / "embed" / f"{key}.embf"

    # ---- shared loading ----

    def _require(self, path: Path, stage: str, hint: str) -> Path:
        if not path.exists():
            raise StageError(stage, f"missing {path}; {hint}")
        return path

    def load_datasets(self, stage: str) -> dict[str, AuditDataset]:
        out = {}
        for spec in self.cfg.datasets:
            path = self._require(self.chains_path(spec.key), stage, "run the collect stage first")
            out[spec.key] = parse_dataset(path.read_bytes(), name=spec.name)
        return out

    def load_keyframe_map(self) -> dict[str, KeyframeSet] | None:
        path = self.keyframes_path()
        if not path.exists():
            return None
        result: dict[str, KeyframeSet] = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                obj = json.loads(line)
                result[obj["video_id"]] = KeyframeSet(
                    indices=tuple(obj["indices"]),
                    n_frames=obj["n_frames"],
                    config_hash=obj["config_hash"],
                )
        return result

    def load_merged_embeddings(self, stage: str) -> EmbeddingSet:
        combined = self.embed_path(_COMBINED_KEY)
        if combined.exists():
            return load_embeddings(combined, self.cfg.embedding.expected_dim)
        sets = []
        for spec in self.cfg.datasets:
            path = self._require(self.embed_path(spec.key), stage, "run the embed stage first")
            sets.append(load_embeddings(path, self.cfg.embedding.expected_dim))
        return merge_embeddings(*sets)

    def _frame_dir(self, stage: str, video_id: str, frame_dir: str) -> Path:
        p = Path(frame_dir)
        if not p.is_absolute():
            if self.cfg.frames_root is None:
                raise StageError(
                    stage, f"video {video_id!r} has relative frame_dir but no frames_root set"
                )
            p = self.cfg.frames_root / p
        if not p.is_dir():
            raise StageError(stage, f"frame directory {p} for video {video_id!r} missing")
        return p

    def _videos_with_frames(self, datasets: Mapping[str, AuditDataset], stage: str):
        """Unique (video_id, resolved dir) pairs in dataset order."""
        seen: set[str] = set()
        for key in sorted(datasets):
            for record in datasets[key].videos():
                if record.frame_dir is None or record.video_id in seen:
                    continue
                seen.add(record.video_id)
                yield record.video_id, self._frame_dir(stage, record.video_id, record.frame_dir)

    # ---- stage inputs (cache keys) ----

    def stage_inputs(self, stage: str) -> dict:
        fn = getattr(self, f"_inputs_{stage}")
        return fn()

    def _inputs_collect(self) -> dict:
        files = {}
        for spec in self.cfg.datasets:
            if spec.path is not None:
                if not spec.path.exists():
                    raise StageError("collect", f"dataset file {spec.path} missing")
                files[spec.key] = _sha_file(spec.path)
        return {"config": [s.to_dict() for s in self.cfg.datasets], "files": files}

    def _chain_files(self, stage: str) -> dict:
        files = {}
        for spec in self.cfg.datasets:
            path = self._require(self.chains_path(spec.key), stage, "run the collect stage first")
            files[f"chains:{spec.key}"] = _sha_file(path)
        return files

    def _inputs_keyframes(self) -> dict:
        files = self._chain_files("keyframes")
        datasets = self.load_datasets("keyframes")
        for video_id, frame_dir in self._videos_with_frames(datasets, "keyframes"):
            for frame in sorted(frame_dir.glob("*.png")):
                files[f"frame:{video_id}/{frame.name}"] = _sha_file(frame)
        return {
            "config": {
                "keyframes": self.cfg.keyframes.config_hash(),
                "frames_root": self.cfg.frames_root.as_posix() if self.cfg.frames_root else None,
            },
            "files": files,
        }

    def _inputs_embed(self) -> dict:
        files = self._chain_files("embed")
        emb = self.cfg.embedding
        if emb.mode == "file":
            for key, path in sorted(emb.path_map().items()):
                if not path.exists():
                    raise StageError("embed", f"embedding source {path} missing")
                files[f"source:{key}"] = _sha_file(path)
        elif emb.mode == "synthetic-ground-truth":
            for spec in self.cfg.datasets:
                path = self._require(
                    self.groundtruth_path(spec.key), "embed", "run the collect stage first"
                )
                files[f"groundtruth:{spec.key}"] = _sha_file(path)
        elif emb.mode == "service":
            kf_path = self._require(
                self.keyframes_path(), "embed", "run the keyframes stage first"
            )
            files["keyframes"] = _sha_file(kf_path)
            datasets = self.load_datasets("embed")
            for video_id, frame_dir in self._videos_with_frames(datasets, "embed"):
                for frame in sorted(frame_dir.glob("*.png")):
                    files[f"frame:{video_id}/{frame.name}"] = _sha_file(frame)
        return {"config": emb.to_dict(), "files": files}

    def _embed_files(self, stage: str) -> dict:
        files = {}
        combined = self.embed_path(_COMBINED_KEY)
        if combined.exists():
            files[f"emb:{_COMBINED_KEY}"] = _sha_file(combined)
        else:
            for spec in self.cfg.datasets:
                path = self._require(
                    self.embed_path(spec.key), stage, "run the embed stage first"
                )
                files[f"emb:{spec.key}"] = _sha_file(path)
        return files

    def _inputs_analyze(self) -> dict:
        files = self._chain_files("analyze")
        files.update(self._embed_files("analyze"))
        kf_path = self.keyframes_path()
        if kf_path.exists():
            files["keyframes"] = _sha_file(kf_path)
        return {
            "config": {
                "k_codebook": self.cfg.analysis.k_codebook,
                "n_slices": self.cfg.analysis.n_slices,
                "rng_seed": self.cfg.analysis.rng_seed,
                "max_exact_n": self.cfg.analysis.max_exact_n,
                "on_projection": self.cfg.on_projection,
            },
            "files": files,
        }

    def _inputs_project(self) -> dict:
        files = self._chain_files("project")
        files.update(self._embed_files("project"))
        if self.cfg.projection.method == "import":
            for modality, path in sorted(self.cfg.projection.coords_map().items()):
                if not path.exists():
                    raise StageError("project", f"coords file {path} missing")
                files[f"coords:{modality}"] = _sha_file(path)
        return {"config": self.cfg.projection.to_dict(), "files": files}

    # ---- stage bodies ----

    def run_stage(self, stage: str) -> list[Path]:
        fn = getattr(self, f"_run_{stage}")
        return fn()

    def _run_collect(self) -> list[Path]:
        (self.out / "collect").mkdir(parents=True, exist_ok=True)
        outputs = []
        for spec in self.cfg.datasets:
            if spec.path is not None:
                dataset = parse_dataset(spec.path.read_bytes(), name=spec.name)
            else:
                dataset = self._collect_synthetic(spec)
            path = self.chains_path(spec.key)
            path.write_bytes(serialize_dataset(dataset))
            outputs.append(path)
            if spec.synthetic is not None:
                outputs.append(self._write_groundtruth(spec, dataset))
        return outputs

    def _collect_synthetic(self, spec: DatasetSpec) -> AuditDataset:
        syn = spec.synthetic
        prefix = f"{spec.key}-" if syn.id_prefix is None else syn.id_prefix
        params = SyntheticGraphParams(
            n_topics=syn.n_topics,
            videos_per_topic=syn.videos_per_topic,
            drift=syn.drift,
            embed_dim=syn.embed_dim,
            topic_spread=syn.topic_spread,
            rng_seed=syn.rng_seed,
            id_prefix=prefix,
        )
        provider, _ = build_synthetic_provider(params)
        self._provider_cache[spec.key] = provider
        if syn.seeds:
            seed_ids = syn.seeds
        else:
            topic_videos = provider.videos_in_topic(syn.seeds_topic)
            if len(topic_videos) < syn.n_seeds:
                raise StageError(
                    "collect",
                    f"topic {syn.seeds_topic} has {len(topic_videos)} videos,"
                    f" fewer than n_seeds {syn.n_seeds}",
                )
            seed_ids = topic_videos[: syn.n_seeds]
        walk = WalkConfig(
            seeds=tuple(VideoDescriptor(video_id=v) for v in seed_ids), depth=syn.depth
        )
        return collect_dataset(provider, walk, domain_label=spec.name, name=spec.name)

    def _write_groundtruth(self, spec: DatasetSpec, dataset: AuditDataset) -> Path:
        provider = self._provider_cache[spec.key]
        table = provider.ground_truth
        path = self.groundtruth_path(spec.key)
        seen: set[str] = set()
        lines = []
        for record in dataset.videos():
            if record.video_id in seen:
                continue
            seen.add(record.video_id)
            vec = table[record.video_id]
            lines.append(
                json.dumps(
                    {"video_id": record.video_id, "vector": [float(x) for x in vec]},
                    separators=(",", ":"),
                    ensure_ascii=False,
                )
            )
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        return path

    def _run_keyframes(self) -> list[Path]:
        (self.out / "keyframes").mkdir(parents=True, exist_ok=True)
        datasets = self.load_datasets("keyframes")
        results: dict[str, KeyframeSet] = {}
        for video_id, frame_dir in self._videos_with_frames(datasets, "keyframes"):
            frames = load_frame_dir(frame_dir)
            results[video_id] = extract_keyframes(frames, self.cfg.keyframes)
        path = self.keyframes_path()
        with open(path, "w", encoding="utf-8") as f:
            for video_id in sorted(results):
                ks = results[video_id]
                f.write(
                    json.dumps(
                        {
                            "video_id": video_id,
                            "n_frames": ks.n_frames,
                            "indices": list(ks.indices),
                            "config_hash": ks.config_hash,
                        },
                        separators=(",", ":"),
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        return [path]

    def _run_embed(self) -> list[Path]:
        (self.out / "embed").mkdir(parents=True, exist_ok=True)
        mode = self.cfg.embedding.mode
        if mode == "file":
            return self._embed_from_files()
        if mode == "synthetic-ground-truth":
            return self._embed_from_groundtruth()
        return self._embed_from_service()

    def _embed_from_files(self) -> list[Path]:
        outputs = []
        expected = self.cfg.embedding.expected_dim
        path_map = self.cfg.embedding.path_map()
        keys = [_COMBINED_KEY] if _COMBINED_KEY in path_map else [s.key for s in self.cfg.datasets]
        for key in keys:
            source = path_map[key]
            emb = load_embeddings(source, expected)
            out_path = self.embed_path(key)
            save_embeddings(emb, out_path)
            outputs.extend([out_path, out_path.with_suffix(".keys.jsonl")])
        return outputs

    def _embed_from_groundtruth(self) -> list[Path]:
        outputs = []
        for spec in self.cfg.datasets:
            gt_path = self._require(
                self.groundtruth_path(spec.key), "embed", "run the collect stage first"
            )
            raw: dict = {}
            dim = None
            with open(gt_path, "r", encoding="utf-8") as f:
                for line in f:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    vec = np.asarray(obj["vector"], dtype=np.float64)
                    if dim is None:
                        dim = vec.shape[0]
                    for modality in MODALITIES:
                        raw[(obj["video_id"], 0, modality)] = vec
            emb = EmbeddingSet.from_raw(dim, raw, warn=False)
            out_path = self.embed_path(spec.key)
            save_embeddings(emb, out_path)
            outputs.extend([out_path, out_path.with_suffix(".keys.jsonl")])
        return outputs

    def _embed_from_service(self) -> list[Path]:
        url = self.cfg.embedding.url or os.environ.get("EMBED_SERVICE_URL", "")
        if not url:
            raise StageError("embed", "no service url configured")
        client = EmbedServiceClient(url)
        keyframe_map = self.load_keyframe_map()
        if keyframe_map is None:
            raise StageError("embed", "keyframes artifact missing; run the keyframes stage first")
        datasets = self.load_datasets("embed")
        batch = self.cfg.embedding.batch_size
        outputs = []
        for spec in self.cfg.datasets:
            images: list[KeyframeImage] = []
            failures: list[str] = []
            single = {spec.key: datasets[spec.key]}
            for video_id, frame_dir in self._videos_with_frames(single, "embed"):
                entry = keyframe_map.get(video_id)
                if entry is None:
                    failures.append(f"{video_id}: no keyframe entry")
                    continue
                pngs = sorted(frame_dir.glob("*.png"))
                for idx in entry.indices:
                    if idx >= len(pngs):
                        failures.append(f"{video_id}: keyframe {idx} beyond {len(pngs)} frames")
                        continue
                    images.append(KeyframeImage(video_id, idx, pngs[idx]))
            captions = self._caption_images(client, images, batch, failures)
            emb, failed = fetch_embeddings(
                client,
                captions,
                images,
                batch_size=batch,
                expected_dim=self.cfg.embedding.expected_dim,
            )
            failures.extend(f"{k.video_id}:{k.keyframe_index}:{k.modality}" for k in failed)
            if failures:
                logger.warning(
                    "embed %s: %d items failed (first: %s)",
                    spec.key,
                    len(failures),
                    failures[0],
                )
            out_path = self.embed_path(spec.key)
            save_embeddings(emb, out_path)
            outputs.extend([out_path, out_path.with_suffix(".keys.jsonl")])
        return outputs

    @staticmethod
    def _caption_images(
        client: EmbedServiceClient,
        images: Sequence[KeyframeImage],
        batch_size: int,
        failures: list[str],
    ) -> list[CaptionRecord]:
        captions: list[CaptionRecord] = []
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            items = []
            by_id = {}
            for img in chunk:
                item_id = f"caption:{img.keyframe_index}:{img.video_id}"
                by_id[item_id] = img
                payload = base64.b64encode(Path(img.path).read_bytes()).decode("ascii")
                items.append({"id": item_id, "payload": payload})
            for entry in client.caption(items):
                img = by_id.get(entry.get("id"))
                if img is None:
                    continue
                text = entry.get("caption")
                if entry.get("error") or not text:
                    failures.append(
                        f"{img.video_id}:{img.keyframe_index}:caption: {entry.get('error')}"
                    )
                    continue
                captions.append(CaptionRecord(img.video_id, img.keyframe_index, text))
        return captions

    def _run_analyze(self) -> list[Path]:
        (self.out / "analyze").mkdir(parents=True, exist_ok=True)
        datasets = self.load_datasets("analyze")
        embeddings = self.load_merged_embeddings("analyze")
        keyframe_map = self.load_keyframe_map()
        cfg = self.cfg.analysis
        ds_a = datasets["A"]
        ds_b = datasets.get("B")
        if self.cfg.on_projection:
            report = self._projected_report(ds_a, ds_b, embeddings, keyframe_map, cfg)
        elif ds_b is None:
            report = analyze_single_domain(ds_a, embeddings, cfg, keyframe_map)
        else:
            report = compare_domains(ds_a, ds_b, embeddings, cfg, keyframe_map, keyframe_map)
        json_path = self.out / "analyze" / "report.json"
        text_path = self.out / "analyze" / "report.txt"
        json_path.write_text(report_to_json(report), encoding="utf-8")
        text_path.write_text(report_to_text(report), encoding="utf-8")
        return [json_path, text_path]

    @staticmethod
    def _projected_report(ds_a, ds_b, embeddings, keyframe_map, cfg) -> object:
        """Metric suite over shared 2-D PCA coordinates per modality."""
        domain_a = _resolve_domain(ds_a)
        _, clouds, gaps = build_clouds(ds_a, embeddings, domain_a, keyframe_map)
        domain_b = ""
        if ds_b is not None:
            domain_b = _resolve_domain(ds_b)
            if domain_b == domain_a:
                domain_b = f"{domain_a} (B)"
            _, clouds_b, gaps_b = build_clouds(ds_b, embeddings, domain_b, keyframe_map)
            clouds.update(clouds_b)
            gaps = gaps + gaps_b
        projected = {}
        for modality in MODALITIES:
            keys = [k for k in clouds if k[1] == modality]
            keys.sort()
            parts = [clouds[k] for k in keys]
            non_empty = [c for c in parts if len(c)]
            if not non_empty:
                projected.update({k: clouds[k] for k in keys})
                continue
            stacked = np.vstack([c.points for c in non_empty])
            proj = pca_project(stacked)
            offset = 0
            for key, cloud in zip(keys, parts):
                take = len(cloud)
                projected[key] = PointCloud(
                    points=proj.coords[offset : offset + take],
                    labels=cloud.labels,
                    gaps=cloud.gaps,
                )
                offset += take
        return report_from_clouds(domain_a, domain_b, projected, cfg, gaps)

    def _run_project(self) -> list[Path]:
        (self.out / "project").mkdir(parents=True, exist_ok=True)
        datasets = self.load_datasets("project")
        embeddings = self.load_merged_embeddings("project")
        spec = self.cfg.projection
        outputs = []
        for modality in MODALITIES:
            clouds = []
            for key in sorted(datasets):
                for group in ("seed", "recommended"):
                    clouds.append(group_points(datasets[key], embeddings, modality, group))
            points = [c.points for c in clouds if len(c)]
            labels = tuple(label for c in clouds for label in c.labels)
            if not points or sum(p.shape[0] for p in points) < 2:
                logger.warning("project: fewer than 2 %s points; skipping modality", modality)
                continue
            cloud = PointCloud(points=np.vstack(points), labels=labels)
            if spec.method == "import":
                proj = import_coords(spec.coords_map()[modality], cloud.labels)
            else:
                proj = pca_project(cloud)
            hulls: dict[tuple[str, str, str], HullPolygon] = {}
            groups = ("seed", "recommended") if spec.hull_recs else ("seed",)
            domains = sorted({label.domain for label in proj.labels})
            for domain in domains:
                for group in groups:
                    mask = [
                        i
                        for i, label in enumerate(proj.labels)
                        if label.domain == domain and label.group == group
                    ]
                    if len(mask) < 3:
                        continue
                    try:
                        hulls[(group, domain, modality)] = convex_hull(proj.coords[mask])
                    except TooFewPoints:
                        logger.warning(
                            "project: %s/%s/%s hull skipped (too few distinct points)",
                            group,
                            domain,
                            modality,
                        )
            points_path, hulls_path = emit_plot_data(
                proj, hulls, self.out / "project" / modality
            )
            outputs.extend([points_path, hulls_path])
        if not outputs:
            raise StageError("project", "no modality had enough points to project")
        return outputs


def _manifest_path(out_dir: Path) -> Path:
    return out_dir / "manifest.json"


def _load_manifest(out_dir: Path) -> dict:
    path = _manifest_path(out_dir)
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
            if isinstance(manifest, dict) and isinstance(manifest.get("stages"), dict):
                return manifest
        except (OSError, json.JSONDecodeError):
            logger.warning("manifest at %s unreadable; rebuilding", path)
    return {"version": 1, "stages": {}}


def _save_manifest(out_dir: Path, manifest: dict) -> None:
    _manifest_path(out_dir).write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _outputs_intact(out_dir: Path, entry: dict) -> bool:
    for rel, sha in entry.get("outputs", {}).items():
        path = out_dir / rel
        if not path.exists() or _sha_file(path) != sha:
            return False
    return bool(entry.get("outputs"))


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] | None = None) -> PipelineResult:
    """Execute the selected stages with hash-keyed caching.

    Raises ConfigError (exit code 2 territory) before touching the
    output directory; stage failures are reported in the result, with
    completed artifacts and manifest entries preserved.
    """
    findings = validate_config(cfg)
    if findings:
        raise ConfigError(findings)
    selected = tuple(stages) if stages else cfg.selected_stages()
    unknown = [s for s in selected if s not in STAGES]
    if unknown:
        raise ConfigError([f"unknown stage {s!r}" for s in unknown])
    ordered = [s for s in STAGES if s in selected]

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with _lock(cfg.out_dir):
        manifest = _load_manifest(cfg.out_dir)
        runner = _Runner(cfg)
        result = PipelineResult(manifest=manifest, ran=[], cached=[])
        for stage in ordered:
            try:
                inputs = runner.stage_inputs(stage)
                input_hash = _hash_obj(inputs)
                entry = manifest["stages"].get(stage)
                if (
                    entry
                    and entry.get("input_hash") == input_hash
                    and _outputs_intact(cfg.out_dir, entry)
                ):
                    entry["last_run"] = {"cached": True}
                    result.cached.append(stage)
                    logger.info("stage %s: cached", stage)
                    continue
                started = time.monotonic()
                outputs = runner.run_stage(stage)
                elapsed = time.monotonic() - started
                manifest["stages"][stage] = {
                    "input_hash": input_hash,
                    "outputs": {
                        p.relative_to(cfg.out_dir).as_posix(): _sha_file(p) for p in outputs
                    },
                    "last_run": {"cached": False, "elapsed_s": round(elapsed, 3)},
                }
                result.ran.append(stage)
                logger.info("stage %s: completed in %.2fs", stage, elapsed)
            except DriftAuditError as exc:
                result.failed = stage
                result.error = str(exc)
                logger.error("stage %s failed: %s", stage, exc)
                break
            finally:
                _save_manifest(cfg.out_dir, manifest)
        return result
