"""Dataset model for recommendation-chain audits.

A dataset is a collection of recommendation chains. Each chain pairs one
seed video with the ordered list of videos served after it; a video's
``depth`` is its position in that list (0 for the seed itself).

Persistence is line-delimited JSON, one video per line, so an 11k-video
dataset streams and diffs cleanly. Chains are reconstructed from
(seed_id, session_id, depth); there is no header. Unknown extra fields
on a record survive a round-trip untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterator, Mapping

from .errors import DriftAuditError

ROLE_SEED = "seed"
ROLE_RECOMMENDED = "recommended"

# JSONL field order is part of the persistence contract.
RECORD_FIELDS = (
    "video_id",
    "domain_label",
    "role",
    "depth",
    "seed_id",
    "session_id",
    "keyword",
    "frame_dir",
)


class MalformedLine(DriftAuditError):
    """A line of the input stream is not a valid record."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class InvariantViolation(DriftAuditError):
    """A record or chain breaks a structural invariant."""


class DuplicateVideoId(DriftAuditError):
    """The same video_id appears twice within one chain."""

    def __init__(self, video_id: str, session_id: str = ""):
        self.video_id = video_id
        where = f" in session {session_id!r}" if session_id else ""
        super().__init__(f"duplicate video_id {video_id!r}{where}")


@dataclass(frozen=True)
class VideoRecord:
    """One video occurrence in a recommendation walk.

    Invariant: role == "seed" iff depth == 0 iff seed_id == video_id.
    The same video_id may appear in several chains of a dataset (the
    platform can recommend one video from many seeds) but never twice
    within one chain.
    """

    video_id: str
    domain_label: str
    role: str
    depth: int
    seed_id: str
    keyword: str = ""
    frame_dir: str | None = None
    extras: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.video_id:
            raise InvariantViolation("video_id must be non-empty")
        if self.role not in (ROLE_SEED, ROLE_RECOMMENDED):
            raise InvariantViolation(f"unknown role {self.role!r}")
        if self.depth < 0:
            raise InvariantViolation(f"negative depth {self.depth}")
        is_seed = self.role == ROLE_SEED
        if is_seed != (self.depth == 0) or is_seed != (self.seed_id == self.video_id):
            raise InvariantViolation(
                f"record {self.video_id!r}: role={self.role!r}, depth={self.depth}, "
                f"seed_id={self.seed_id!r} are inconsistent (seed <=> depth 0 <=> seed_id == video_id)"
            )


@dataclass(frozen=True)
class RecommendationChain:
    """A seed plus its ordered recommendations at depths 1..N.

    ``truncated`` marks a walk that ended before its requested depth
    (collection metadata: not serialized, excluded from equality).
    """

    seed: VideoRecord
    recs: tuple[VideoRecord, ...]
    session_id: str
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "recs", tuple(self.recs))
        if self.seed.role != ROLE_SEED:
            raise InvariantViolation("chain seed must have role 'seed'")
        if not self.session_id:
            raise InvariantViolation("session_id must be non-empty")
        seen = {self.seed.video_id}
        for i, rec in enumerate(self.recs, start=1):
            if rec.role != ROLE_RECOMMENDED:
                raise InvariantViolation(f"rec at position {i} has role {rec.role!r}")
            if rec.depth != i:
                raise InvariantViolation(
                    f"session {self.session_id!r}: depth gap (expected depth {i}, got {rec.depth})"
                )
            if rec.seed_id != self.seed.video_id:
                raise InvariantViolation(
                    f"rec {rec.video_id!r} has seed_id {rec.seed_id!r}, expected {self.seed.video_id!r}"
                )
            if rec.video_id in seen:
                raise DuplicateVideoId(rec.video_id, self.session_id)
            seen.add(rec.video_id)

    @property
    def depth(self) -> int:
        return len(self.recs)

    def videos(self) -> Iterator[VideoRecord]:
        yield self.seed
        yield from self.recs


@dataclass(frozen=True)
class AuditDataset:
    """A named set of chains, all bounded by one maximum walk depth."""

    name: str
    max_depth: int
    chains: tuple[RecommendationChain, ...]

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(self.chains))
        if self.max_depth < 0:
            raise InvariantViolation(f"negative max_depth {self.max_depth}")
        sessions = set()
        for chain in self.chains:
            if chain.session_id in sessions:
                raise InvariantViolation(f"duplicate session_id {chain.session_id!r}")
            sessions.add(chain.session_id)
            if chain.depth > self.max_depth:
                raise InvariantViolation(
                    f"session {chain.session_id!r} reaches depth {chain.depth} > max_depth {self.max_depth}"
                )

    @property
    def n_videos(self) -> int:
        return len(self.chains) + sum(c.depth for c in self.chains)

    def videos(self) -> Iterator[VideoRecord]:
        for chain in self.chains:
            yield from chain.videos()

    def videos_with_sessions(self) -> Iterator[tuple[VideoRecord, str]]:
        for chain in self.chains:
            for rec in chain.videos():
                yield rec, chain.session_id

    def domain_labels(self) -> tuple[str, ...]:
        return tuple(sorted({record.domain_label for record in self.videos()}))


@dataclass(frozen=True)
class DatasetStats:
    """Aggregate counts over a dataset and its keyframe extraction."""

    n_videos: int
    n_seeds: int
    n_recs: int
    n_frames: int
    n_keyframes: int

    def __post_init__(self):
        if min(self.n_videos, self.n_seeds, self.n_recs, self.n_frames, self.n_keyframes) < 0:
            raise InvariantViolation("stats counts must be non-negative")
        if self.n_videos != self.n_seeds + self.n_recs:
            raise InvariantViolation("n_videos must equal n_seeds + n_recs")
        if self.n_keyframes > self.n_frames:
            raise InvariantViolation("n_keyframes cannot exceed n_frames")


def _record_from_obj(obj: dict, line_no: int) -> tuple[VideoRecord, str]:
    for name in RECORD_FIELDS:
        if name not in obj:
            raise MalformedLine(line_no, f"missing field {name!r}")
    depth = obj["depth"]
    if isinstance(depth, bool) or not isinstance(depth, int):
        raise MalformedLine(line_no, f"depth must be an integer, got {depth!r}")
    for name in ("video_id", "domain_label", "role", "seed_id", "session_id", "keyword"):
        if not isinstance(obj[name], str):
            raise MalformedLine(line_no, f"field {name!r} must be a string")
    frame_dir = obj["frame_dir"]
    if frame_dir is not None and not isinstance(frame_dir, str):
        raise MalformedLine(line_no, "frame_dir must be a string or null")
    extras = {k: v for k, v in obj.items() if k not in RECORD_FIELDS}
    try:
        record = VideoRecord(
            video_id=obj["video_id"],
            domain_label=obj["domain_label"],
            role=obj["role"],
            depth=depth,
            seed_id=obj["seed_id"],
            keyword=obj["keyword"],
            frame_dir=frame_dir,
            extras=extras,
        )
    except InvariantViolation as exc:
        raise InvariantViolation(f"line {line_no}: {exc}") from None
    return record, obj["session_id"]


def parse_dataset(
    raw: bytes | str | IO[bytes],
    *,
    name: str = "",
    max_depth: int | None = None,
) -> AuditDataset:
    """Parse a line-delimited record stream into a validated dataset.

    Records may arrive in any order; chains are regrouped by session_id
    and recs re-sorted by depth. Invalid input is rejected, never
    repaired. When ``max_depth`` is None it is inferred as the maximum
    observed depth (0 for an empty stream).
    """
    if hasattr(raw, "read"):
        raw = raw.read()
    if isinstance(raw, bytes):
        text = raw.decode("utf-8")
    else:
        text = raw

    by_session: dict[str, list[VideoRecord]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "record must be a JSON object")
        record, session_id = _record_from_obj(obj, line_no)
        if not session_id:
            raise MalformedLine(line_no, "session_id must be non-empty")
        by_session.setdefault(session_id, []).append(record)

    chains = []
    for session_id, records in by_session.items():
        seeds = [r for r in records if r.role == ROLE_SEED]
        if len(seeds) != 1:
            raise InvariantViolation(
                f"session {session_id!r} has {len(seeds)} seed records, expected exactly 1"
            )
        recs = sorted((r for r in records if r.role == ROLE_RECOMMENDED), key=lambda r: r.depth)
        depths = [r.depth for r in recs]
        if len(set(depths)) != len(depths):
            raise InvariantViolation(f"session {session_id!r}: duplicate depth in chain")
        chains.append(RecommendationChain(seed=seeds[0], recs=tuple(recs), session_id=session_id))

    if max_depth is None:
        max_depth = max((c.depth for c in chains), default=0)
    return AuditDataset(name=name, max_depth=max_depth, chains=tuple(chains))


def _record_to_obj(record: VideoRecord, session_id: str) -> dict:
    obj = {
        "video_id": record.video_id,
        "domain_label": record.domain_label,
        "role": record.role,
        "depth": record.depth,
        "seed_id": record.seed_id,
        "session_id": session_id,
        "keyword": record.keyword,
        "frame_dir": record.frame_dir,
    }
    for key in sorted(record.extras):
        obj[key] = record.extras[key]
    return obj


def serialize_dataset(dataset: AuditDataset) -> bytes:
    """Serialize a dataset to its JSONL form, one video per line.

    Output is deterministic: fixed field order, chains in dataset order,
    seed first then recs by depth. ``parse_dataset`` of the result
    reproduces the dataset (given the same name and max_depth).
    """
    lines = []
    for chain in dataset.chains:
        for record in chain.videos():
            obj = _record_to_obj(record, chain.session_id)
            lines.append(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
    if not lines:
        return b""
    return ("\n".join(lines) + "\n").encode("utf-8")


def dataset_stats(
    dataset: AuditDataset,
    keyframes: Mapping[str, object],
) -> tuple[DatasetStats, list[str]]:
    """Total video/frame/keyframe counts for a dataset.

    ``keyframes`` maps video_id to anything exposing ``n_frames`` and
    ``indices`` (a KeyframeSet works). Videos absent from the map count
    zero frames; those that declared a frame_dir are returned as
    warnings. A video appearing in several chains is counted once per
    occurrence, consistent with n_videos.
    """
    n_seeds = n_recs = n_frames = n_keyframes = 0
    warnings = []
    for record in dataset.videos():
        if record.role == ROLE_SEED:
            n_seeds += 1
        else:
            n_recs += 1
        entry = keyframes.get(record.video_id)
        if entry is None:
            if record.frame_dir is not None:
                warnings.append(f"no keyframe entry for video {record.video_id!r}")
            continue
        n_frames += entry.n_frames
        n_keyframes += len(entry.indices)
    stats = DatasetStats(
        n_videos=n_seeds + n_recs,
        n_seeds=n_seeds,
        n_recs=n_recs,
        n_frames=n_frames,
        n_keyframes=n_keyframes,
    )
    return stats, warnings
