"""Chain collection against pluggable recommendation providers.

A provider only has to open isolated sessions and serve one
recommendation at a time; the walker turns that into chains with
fresh-session semantics. The synthetic provider generates a topic
graph with known ground-truth embeddings so drift detection can be
tested end to end: a drift parameter is the per-step probability of
leaving the current topic, which makes expected topic spread a pure
function of the walk settings.

Live-platform collection is out of scope here; external scrapers feed
records in through the chain JSONL schema instead (see LiveProviderStub
for the hooks a real adapter must implement).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .chains import (
    ROLE_RECOMMENDED,
    ROLE_SEED,
    AuditDataset,
    RecommendationChain,
    VideoRecord,
)
from .errors import DriftAuditError

logger = logging.getLogger(__name__)


class ProviderUnavailable(DriftAuditError):
    """The provider cannot open sessions at all."""


class StepFailed(DriftAuditError):
    """One recommendation step failed; the chain truncates here."""

    def __init__(self, depth: int, reason: str = ""):
        self.depth = depth
        super().__init__(f"step at depth {depth} failed{': ' + reason if reason else ''}")


class InvalidParams(DriftAuditError):
    """Synthetic graph parameters violate their bounds."""


class AllSeedsFailed(DriftAuditError):
    """Every seed walk failed; there is no dataset to return."""


@dataclass(frozen=True)
class VideoDescriptor:
    """Provider-facing handle for one video."""

    video_id: str
    keyword: str = ""

    def __post_init__(self):
        if not self.video_id:
            raise DriftAuditError("video_id must be non-empty")


@runtime_checkable
class RecommendationProvider(Protocol):
    """Behavioral contract for recommendation sources.

    Sessions must be isolated: nothing carried over from a closed
    session may influence a new one. next_recommendation must accept
    any video the provider itself has returned.
    """

    def open_session(self) -> object: ...

    def next_recommendation(self, session: object, current: VideoDescriptor) -> VideoDescriptor: ...

    def close_session(self, session: object) -> None: ...


@dataclass(frozen=True)
class WalkConfig:
    """Settings for one collection run."""

    seeds: tuple[VideoDescriptor, ...]
    depth: int = 10
    session_per_seed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise DriftAuditError("seeds must be non-empty")
        if self.depth < 1:
            raise DriftAuditError(f"depth must be >= 1, got {self.depth}")


@dataclass(frozen=True)
class SyntheticGraphParams:
    """Topic-cluster graph with controllable drift.

    Topic centroids sit on orthogonal axes at 10x topic_spread, so
    embed_dim must be >= n_topics; within-topic noise is uniform in a
    ball of radius topic_spread, which keeps every video within
    3x topic_spread of its centroid by construction.
    """

    n_topics: int
    videos_per_topic: int
    drift: float
    embed_dim: int
    topic_spread: float = 1.0
    rng_seed: int = 0
    id_prefix: str = ""  # namespaces video ids so two graphs never collide

    def __post_init__(self):
        if self.n_topics < 1:
            raise InvalidParams(f"n_topics must be >= 1, got {self.n_topics}")
        if self.videos_per_topic < 1:
            raise InvalidParams(f"videos_per_topic must be >= 1, got {self.videos_per_topic}")
        if not 0.0 <= self.drift <= 1.0:
            raise InvalidParams(f"drift must be in [0,1], got {self.drift}")
        if self.embed_dim < 2:
            raise InvalidParams(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.embed_dim < self.n_topics:
            raise InvalidParams(
                f"orthogonal centroids need embed_dim >= n_topics, got {self.embed_dim} < {self.n_topics}"
            )
        if self.topic_spread <= 0:
            raise InvalidParams(f"topic_spread must be > 0, got {self.topic_spread}")


class _SyntheticSession:
    """One isolated walk context.

    The RNG is created lazily from (graph seed, first video seen), so a
    walk's randomness depends only on its own starting point, never on
    how many other sessions ran before it.
    """

    def __init__(self, graph_seed: int):
        self._graph_seed = graph_seed
        self.rng: np.random.Generator | None = None
        self.served: set[str] = set()

    def rng_for(self, first_video_id: str) -> np.random.Generator:
        if self.rng is None:
            digest = hashlib.sha256(
                f"{self._graph_seed}:{first_video_id}".encode("utf-8")
            ).digest()
            self.rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return self.rng


class SyntheticProvider:
    """Deterministic topic-cluster recommendation graph."""

    def __init__(self, params: SyntheticGraphParams):
        self.params = params
        rng = np.random.default_rng(params.rng_seed)
        self._topic_videos: list[list[str]] = []
        self._topic_of: dict[str, int] = {}
        self._embeddings: dict[str, np.ndarray] = {}
        for t in range(params.n_topics):
            centroid = np.zeros(params.embed_dim)
            centroid[t] = 10.0 * params.topic_spread
            ids = []
            for v in range(params.videos_per_topic):
                video_id = f"{params.id_prefix}t{t:02d}-v{v:04d}"
                direction = rng.standard_normal(params.embed_dim)
                direction /= np.linalg.norm(direction)
                radius = params.topic_spread * rng.random() ** (1.0 / params.embed_dim)
                vec = centroid + direction * radius
                vec.setflags(write=False)
                ids.append(video_id)
                self._topic_of[video_id] = t
                self._embeddings[video_id] = vec
            self._topic_videos.append(ids)

    @property
    def ground_truth(self) -> dict[str, np.ndarray]:
        """video_id -> raw embedding (centroid + noise, not unit norm)."""
        return dict(self._embeddings)

    def videos_in_topic(self, topic: int) -> tuple[str, ...]:
        return tuple(self._topic_videos[topic])

    def topic_of(self, video_id: str) -> int:
        return self._topic_of[video_id]

    def open_session(self) -> _SyntheticSession:
        return _SyntheticSession(self.params.rng_seed)

    def close_session(self, session: _SyntheticSession) -> None:
        session.served = set()
        session.rng = None

    def next_recommendation(
        self, session: _SyntheticSession, current: VideoDescriptor
    ) -> VideoDescriptor:
        topic = self._topic_of.get(current.video_id)
        if topic is None:
            raise StepFailed(0, f"unknown video {current.video_id!r}")
        rng = session.rng_for(current.video_id)
        session.served.add(current.video_id)

        target = topic
        if self.params.n_topics > 1 and rng.random() < self.params.drift:
            other = int(rng.integers(0, self.params.n_topics - 1))
            target = other if other < topic else other + 1
        candidates = [v for v in self._topic_videos[target] if v not in session.served]
        if not candidates:
            raise StepFailed(0, f"topic {target} exhausted in this session")
        choice = candidates[int(rng.integers(0, len(candidates)))]
        session.served.add(choice)
        return VideoDescriptor(video_id=choice)


def build_synthetic_provider(
    params: SyntheticGraphParams,
) -> tuple[SyntheticProvider, dict[str, np.ndarray]]:
    """Construct the graph once; provider and ground truth share it."""
    provider = SyntheticProvider(params)
    return provider, provider.ground_truth


class LiveProviderStub:
    """Placeholder for a real platform adapter.

    A live implementation must map open_session to a fresh isolated
    browser context (no login, cookies, or history), next_recommendation
    to one scroll-and-read step, and close_session to a full context
    teardown. None of that runs here.
    """

    def open_session(self) -> object:
        raise ProviderUnavailable("live platform collection is not available in this build")

    def next_recommendation(self, session: object, current: VideoDescriptor) -> VideoDescriptor:
        raise ProviderUnavailable("live platform collection is not available in this build")

    def close_session(self, session: object) -> None:
        return None


def walk_chain(
    provider: RecommendationProvider,
    seed: VideoDescriptor,
    depth: int,
    domain_label: str = "synthetic",
    session_id: str | None = None,
) -> RecommendationChain:
    """Walk one chain in a fresh session.

    Takes exactly ``depth`` steps unless a step fails, in which case
    the partial chain is returned with truncated=True, never silently
    shortened. The session is always closed.
    """
    if depth < 1:
        raise DriftAuditError(f"depth must be >= 1, got {depth}")
    session = provider.open_session()
    try:
        return _walk_in_session(provider, session, seed, depth, domain_label, session_id)
    finally:
        provider.close_session(session)


def _walk_in_session(
    provider: RecommendationProvider,
    session: object,
    seed: VideoDescriptor,
    depth: int,
    domain_label: str,
    session_id: str | None,
) -> RecommendationChain:
    sid = session_id if session_id is not None else f"walk-{seed.video_id}"
    seed_record = VideoRecord(
        video_id=seed.video_id,
        domain_label=domain_label,
        role=ROLE_SEED,
        depth=0,
        seed_id=seed.video_id,
        keyword=seed.keyword,
    )
    recs: list[VideoRecord] = []
    truncated = False
    current = seed
    for step in range(1, depth + 1):
        try:
            current = provider.next_recommendation(session, current)
        except StepFailed as exc:
            logger.warning("chain %s truncated at depth %d: %s", sid, step, exc)
            truncated = True
            break
        recs.append(
            VideoRecord(
                video_id=current.video_id,
                domain_label=domain_label,
                role=ROLE_RECOMMENDED,
                depth=step,
                seed_id=seed.video_id,
            )
        )
    return RecommendationChain(
        seed=seed_record, recs=tuple(recs), session_id=sid, truncated=truncated
    )


def collect_dataset(
    provider: RecommendationProvider,
    cfg: WalkConfig,
    domain_label: str,
    name: str | None = None,
) -> AuditDataset:
    """One chain per seed, each in its own session by default.

    Session ids are generated as <domain>-s<index> so chains stay
    unique inside the dataset even when a provider session is shared
    (session_per_seed=false shares provider state, not identity).
    Per-seed failures are logged and skipped; only all seeds failing
    is fatal.
    """
    chains: list[RecommendationChain] = []
    failures: list[str] = []
    shared_session = None if cfg.session_per_seed else provider.open_session()
    try:
        for i, seed in enumerate(cfg.seeds):
            sid = f"{domain_label}-s{i:04d}"
            try:
                if shared_session is None:
                    chain = walk_chain(provider, seed, cfg.depth, domain_label, sid)
                else:
                    chain = _walk_in_session(
                        provider, shared_session, seed, cfg.depth, domain_label, sid
                    )
            except DriftAuditError as exc:
                logger.warning("seed %s failed: %s", seed.video_id, exc)
                failures.append(f"{seed.video_id}: {exc}")
                continue
            chains.append(chain)
    finally:
        if shared_session is not None:
            provider.close_session(shared_session)
    if not chains:
        raise AllSeedsFailed("; ".join(failures))
    return AuditDataset(
        name=name if name is not None else domain_label,
        max_depth=cfg.depth,
        chains=tuple(chains),
    )
