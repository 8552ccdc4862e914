"""Divergence suite between seed and recommended embedding clouds.

Spread within a cloud is measured two ways (mean squared distance to
the centroid, and mean pairwise distance); distribution shift between
two clouds is measured two ways (Jensen-Shannon divergence over a
shared k-means codebook, and sliced Wasserstein-1 scaled by the union
diameter). Delta metrics subtract seed spread from recommended spread,
and the cross-domain normalization turns two deltas into shares of
total drift. Every stochastic step (codebook init, slice directions,
pair sampling) takes an explicit seed that is recorded in the report.

Pairwise-distance loops use differences row by row rather than the
Gram-matrix shortcut: the shortcut loses ~1e-8 of absolute precision
on near-coincident points, which would break the zero-spread
invariants and the 1e-9 oracle tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .chains import AuditDataset
from .embeddings import MODALITIES, EmbeddingSet, PointCloud, group_points
from .errors import DriftAuditError

_SAMPLE_PAIRS = 1_000_000
_SAMPLE_CHUNK = 100_000
_KMEANS_MAX_ITER = 100
_KMEANS_TOL = 1e-6


class EmptyCloud(DriftAuditError):
    """An operation needing at least one point got none."""


class SinglePoint(DriftAuditError):
    """Pairwise statistics need at least two points."""


class TooFewPoints(DriftAuditError):
    """Fewer distinct points than the operation needs."""


class DegenerateDiameter(DriftAuditError):
    """All points identical, so distances cannot be scaled."""


class BothZero(DriftAuditError):
    """Both deltas floor to zero; shares of zero are undefined."""


@dataclass(frozen=True)
class AnalysisConfig:
    """Knobs for the divergence suite, all recorded in reports."""

    k_codebook: int = 64
    n_slices: int = 128
    rng_seed: int = 0
    max_exact_n: int = 2000

    def __post_init__(self):
        if self.k_codebook < 2:
            raise DriftAuditError(f"k_codebook must be >= 2, got {self.k_codebook}")
        if self.n_slices < 1:
            raise DriftAuditError(f"n_slices must be >= 1, got {self.n_slices}")
        if self.max_exact_n < 2:
            raise DriftAuditError(f"max_exact_n must be >= 2, got {self.max_exact_n}")

    # One base seed fans out to independent streams per stochastic step
    # so changing e.g. n_slices never perturbs the codebook.
    @property
    def codebook_seed(self) -> int:
        return self.rng_seed

    @property
    def slices_seed(self) -> int:
        return self.rng_seed + 1

    @property
    def pairs_seed(self) -> int:
        return self.rng_seed + 2


@dataclass(frozen=True)
class ClusterStats:
    """Spread summary of one point cloud."""

    n: int
    variance: float
    intra_dist: float
    centroid: tuple[float, ...]
    intra_sampled: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise EmptyCloud("stats need at least one point")
        if self.variance < 0 or self.intra_dist < 0:
            raise DriftAuditError("spread measures cannot be negative")


@dataclass(frozen=True)
class Codebook:
    """Shared discretization for JSD: k centers plus the seed that fit them."""

    k: int
    centers: np.ndarray  # (k, dim) float64
    rng_seed: int

    def __post_init__(self):
        if self.k < 2 or self.centers.shape[0] != self.k:
            raise DriftAuditError(f"codebook needs k >= 2 centers, got {self.centers.shape}")
        if not np.all(np.isfinite(self.centers)):
            raise DriftAuditError("codebook centers must be finite")
        self.centers.setflags(write=False)


def _as_points(points) -> np.ndarray:
    arr = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise DriftAuditError(f"points must be 2-D, got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def centroid_variance(points) -> float:
    """Mean squared Euclidean distance to the centroid (two-pass)."""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise EmptyCloud("variance needs at least one point")
    centered = pts - pts.mean(axis=0)
    return float(np.mean(np.einsum("ij,ij->i", centered, centered)))


def _pairwise_reduce(pts: np.ndarray) -> tuple[float, float, int]:
    """Sum and max of all pairwise distances, in fixed row order."""
    n = pts.shape[0]
    total = 0.0
    biggest = 0.0
    for i in range(n - 1):
        d = np.linalg.norm(pts[i + 1 :] - pts[i], axis=1)
        total += float(d.sum())
        biggest = max(biggest, float(d.max()))
    return total, biggest, n * (n - 1) // 2


def _sampled_pair_reduce(pts: np.ndarray, rng_seed: int) -> tuple[float, float]:
    """Mean and max of distances over 1,000,000 seeded uniform pairs."""
    n = pts.shape[0]
    rng = np.random.default_rng(rng_seed)
    total = 0.0
    biggest = 0.0
    for start in range(0, _SAMPLE_PAIRS, _SAMPLE_CHUNK):
        m = min(_SAMPLE_CHUNK, _SAMPLE_PAIRS - start)
        i = rng.integers(0, n, size=m)
        j = rng.integers(0, n - 1, size=m)
        j = j + (j >= i)  # skip self-pairs, stay uniform over the rest
        d = np.linalg.norm(pts[i] - pts[j], axis=1)
        total += float(d.sum())
        biggest = max(biggest, float(d.max()))
    return total / _SAMPLE_PAIRS, biggest


def mean_intra_distance(points, max_exact_n: int = 2000, rng_seed: int = 0) -> float:
    """Mean pairwise Euclidean distance.

    Exact over all unordered pairs up to max_exact_n points; beyond
    that, the mean over 1,000,000 seeded uniformly sampled pairs (the
    sampled flag surfaces through cluster_stats).
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 0:
        raise EmptyCloud("intra distance needs points")
    if n == 1:
        raise SinglePoint("intra distance needs at least two points")
    if n <= max_exact_n:
        total, _, pairs = _pairwise_reduce(pts)
        return total / pairs
    mean, _ = _sampled_pair_reduce(pts, rng_seed)
    return mean


def diameter(points, max_exact_n: int = 2000, rng_seed: int = 0) -> float:
    """Max pairwise distance, sampled the same way as mean_intra_distance."""
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 0:
        raise EmptyCloud("diameter needs points")
    if n == 1:
        raise DegenerateDiameter("a single point has no extent")
    if n <= max_exact_n:
        _, biggest, _ = _pairwise_reduce(pts)
    else:
        _, biggest = _sampled_pair_reduce(pts, rng_seed)
    if biggest < 1e-12:
        raise DegenerateDiameter("all points identical")
    return biggest


def cluster_stats(points, config: AnalysisConfig | None = None) -> ClusterStats:
    """Bundle variance, intra distance, and centroid for one cloud."""
    cfg = config or AnalysisConfig()
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 0:
        raise EmptyCloud("stats need at least one point")
    centroid = tuple(float(x) for x in pts.mean(axis=0))
    intra = 0.0 if n == 1 else mean_intra_distance(pts, cfg.max_exact_n, cfg.pairs_seed)
    return ClusterStats(
        n=n,
        variance=centroid_variance(pts),
        intra_dist=intra,
        centroid=centroid,
        intra_sampled=n > cfg.max_exact_n,
    )


def fit_codebook(points, k: int = 64, rng_seed: int = 0) -> Codebook:
    """Seeded k-means++ then Lloyd iterations, capped at 100, tol 1e-6.

    The precondition counts distinct points so the centers can be
    pairwise distinct.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if np.unique(pts, axis=0).shape[0] < k:
        raise TooFewPoints(f"need at least k={k} distinct points, got fewer (n={n})")
    rng = np.random.default_rng(rng_seed)

    centers = np.empty((k, pts.shape[1]), dtype=np.float64)
    centers[0] = pts[int(rng.integers(0, n))]
    d2 = np.einsum("ij,ij->i", pts - centers[0], pts - centers[0])
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            # all remaining points coincide with chosen centers
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = pts[idx]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", pts - centers[c], pts - centers[c]))

    for _ in range(_KMEANS_MAX_ITER):
        labels = _nearest_center(pts, centers)
        new_centers = centers.copy()
        dist_to_own = np.linalg.norm(pts - centers[labels], axis=1)
        for c in range(k):
            members = labels == c
            if members.any():
                new_centers[c] = pts[members].mean(axis=0)
            else:
                # deterministic empty-cluster fix: steal the worst-fit point
                idx = int(np.argmax(dist_to_own))
                new_centers[c] = pts[idx]
                dist_to_own[idx] = 0.0
        movement = float(np.linalg.norm(new_centers - centers, axis=1).max())
        centers = new_centers
        if movement <= _KMEANS_TOL:
            break
    return Codebook(k=k, centers=centers, rng_seed=rng_seed)


def _nearest_center(pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ties break to the lowest center index via argmin
    d2 = (
        np.einsum("ij,ij->i", pts, pts)[:, None]
        - 2.0 * pts @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.argmin(d2, axis=1)


def codeword_histogram(points, codebook: Codebook) -> np.ndarray:
    """Empirical distribution of nearest-center assignments."""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise EmptyCloud("histogram needs points")
    counts = np.bincount(_nearest_center(pts, codebook.centers), minlength=codebook.k)
    return counts.astype(np.float64) / pts.shape[0]


def jsd_from_histograms(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence, base-2 logs, 0·log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DriftAuditError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def _kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    value = 0.5 * _kl(p) + 0.5 * _kl(q)
    return min(max(value, 0.0), 1.0)  # exact bound; clamp float fuzz only


def jsd(cloud_p, cloud_q, codebook: Codebook) -> float:
    """JSD between two clouds over a codebook fit on their union."""
    return jsd_from_histograms(
        codeword_histogram(cloud_p, codebook), codeword_histogram(cloud_q, codebook)
    )


def _w1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-D Wasserstein-1 between empirical samples.

    Integral of |quantile_a - quantile_b| over [0,1], evaluated on the
    merged breakpoint grid (plain sorted coupling when sizes match).
    """
    a = np.sort(a)
    b = np.sort(b)
    n, m = a.shape[0], b.shape[0]
    if n == m:
        return float(np.abs(a - b).mean())
    edges = np.concatenate(([0.0], np.union1d(np.arange(1, n) / n, np.arange(1, m) / m), [1.0]))
    widths = np.diff(edges)
    mids = (edges[:-1] + edges[1:]) / 2.0
    ai = np.minimum((mids * n).astype(np.int64), n - 1)
    bi = np.minimum((mids * m).astype(np.int64), m - 1)
    return float(np.sum(widths * np.abs(a[ai] - b[bi])))


def sliced_wasserstein(
    cloud_p,
    cloud_q,
    n_slices: int = 128,
    rng_seed: int = 0,
    directions: np.ndarray | None = None,
) -> float:
    """Average exact 1-D W1 over seeded random unit directions.

    ``directions`` overrides the random draw for reproduction and
    testing against hand-computed slices.
    """
    p = _as_points(cloud_p)
    q = _as_points(cloud_q)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise EmptyCloud("sliced Wasserstein needs non-empty clouds")
    if p.shape[1] != q.shape[1]:
        raise DriftAuditError(f"dims differ: {p.shape[1]} vs {q.shape[1]}")
    if directions is None:
        rng = np.random.default_rng(rng_seed)
        directions = rng.standard_normal((n_slices, p.shape[1]))
    directions = np.asarray(directions, dtype=np.float64)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DriftAuditError("zero-length slice direction")
    directions = directions / norms
    total = 0.0
    for direction in directions:  # fixed order keeps the reduction bit-stable
        total += _w1_1d(p @ direction, q @ direction)
    return total / directions.shape[0]


def scale_wasserstein(raw: float, union_points, config: AnalysisConfig | None = None) -> float:
    """Divide by the union cloud's diameter and clamp into [0,1]."""
    if raw < 0:
        raise DriftAuditError(f"raw distance cannot be negative, got {raw}")
    cfg = config or AnalysisConfig()
    d = diameter(union_points, cfg.max_exact_n, cfg.pairs_seed)
    return min(max(raw / d, 0.0), 1.0)


def delta_metrics(seed: ClusterStats, rec: ClusterStats) -> tuple[float, float]:
    """Recommended-minus-seed spread; negative means recs are tighter."""
    return rec.variance - seed.variance, rec.intra_dist - seed.intra_dist


def cross_domain_normalize(delta_a: float, delta_b: float) -> float:
    """Domain A's share of total drift, negatives floored at zero."""
    a = max(delta_a, 0.0)
    b = max(delta_b, 0.0)
    if a + b == 0.0:
        raise BothZero("no positive drift in either domain to apportion")
    return a / (a + b)


@dataclass(frozen=True)
class DomainModalityCell:
    """Seed-vs-recommended comparison within one (domain, modality)."""

    domain: str
    modality: str
    seed: ClusterStats | None
    rec: ClusterStats | None
    delta_variance: float | None
    delta_intra: float | None
    jsd_seed_rec: float | None
    wasserstein_scaled_seed_rec: float | None
    missing: tuple[str, ...] = ()


@dataclass(frozen=True)
class CrossDomainBlock:
    """Whole-domain comparison (seed and rec pooled) for one modality."""

    modality: str
    jsd: float | None
    wasserstein_scaled: float | None
    normalized_delta_variance: Mapping[str, float] | None
    normalized_delta_intra: Mapping[str, float] | None
    missing: tuple[str, ...] = ()


@dataclass(frozen=True)
class DivergenceReport:
    domain_a: str
    domain_b: str
    config: AnalysisConfig
    cells: tuple[DomainModalityCell, ...]
    cross: tuple[CrossDomainBlock, ...]
    gaps: tuple[str, ...] = ()

    def cell(self, domain: str, modality: str) -> DomainModalityCell:
        for c in self.cells:
            if c.domain == domain and c.modality == modality:
                return c
        raise KeyError((domain, modality))

    def cross_block(self, modality: str) -> CrossDomainBlock:
        for block in self.cross:
            if block.modality == modality:
                return block
        raise KeyError(modality)


def _guarded(missing: list[str], what: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DriftAuditError as exc:
        missing.append(f"{what}: {type(exc).__name__}: {exc}")
        return None


def _compare_clouds(
    cloud_p: PointCloud, cloud_q: PointCloud, cfg: AnalysisConfig, missing: list[str], what: str
) -> tuple[float | None, float | None]:
    """JSD and scaled sliced W1 between two clouds over their union."""
    if len(cloud_p) == 0 or len(cloud_q) == 0:
        missing.append(f"{what}: EmptyCloud: one side has no points")
        return None, None
    union = np.vstack([cloud_p.points, cloud_q.points])

    def _jsd_route():
        codebook = fit_codebook(union, k=cfg.k_codebook, rng_seed=cfg.codebook_seed)
        return jsd(cloud_p, cloud_q, codebook)

    def _w_route():
        raw = sliced_wasserstein(
            cloud_p, cloud_q, n_slices=cfg.n_slices, rng_seed=cfg.slices_seed
        )
        return scale_wasserstein(raw, union, cfg)

    return _guarded(missing, f"{what} jsd", _jsd_route), _guarded(
        missing, f"{what} wasserstein", _w_route
    )


CloudMap = dict[tuple[str, str, str], PointCloud]  # (domain, modality, group)


def _resolve_domain(dataset: AuditDataset) -> str:
    labels = dataset.domain_labels()
    return dataset.name or (labels[0] if labels else "unnamed")


def build_clouds(
    dataset: AuditDataset,
    embeddings: EmbeddingSet,
    domain: str | None = None,
    keyframes: Mapping[str, object] | None = None,
) -> tuple[str, CloudMap, list[str]]:
    """Seed/rec clouds per modality for one dataset, plus coverage gaps."""
    if domain is None:
        domain = _resolve_domain(dataset)
    clouds: CloudMap = {}
    gaps: list[str] = []
    for modality in MODALITIES:
        for group, key in (("seed", "seed"), ("recommended", "rec")):
            cloud = group_points(dataset, embeddings, modality, group, keyframes)
            clouds[(domain, modality, key)] = cloud
            gaps.extend(f"{domain}:{g}" for g in cloud.gaps)
    return domain, clouds, gaps


def report_from_clouds(
    domain_a: str,
    domain_b: str,
    clouds: CloudMap,
    config: AnalysisConfig | None = None,
    gaps: Sequence[str] = (),
) -> DivergenceReport:
    """Fill the report from prebuilt clouds; empty domain_b skips the
    cross-domain section. Failed cells are annotated, never fatal."""
    cfg = config or AnalysisConfig()
    domains = [domain_a] + ([domain_b] if domain_b else [])
    cells: list[DomainModalityCell] = []
    for domain in domains:
        for modality in MODALITIES:
            missing: list[str] = []
            seed_cloud = clouds[(domain, modality, "seed")]
            rec_cloud = clouds[(domain, modality, "rec")]
            seed_stats = _guarded(missing, "seed stats", cluster_stats, seed_cloud, cfg)
            rec_stats = _guarded(missing, "rec stats", cluster_stats, rec_cloud, cfg)
            if seed_stats and rec_stats:
                delta_var, delta_intra = delta_metrics(seed_stats, rec_stats)
            else:
                delta_var = delta_intra = None
            cell_jsd, cell_w = _compare_clouds(
                seed_cloud, rec_cloud, cfg, missing, "seed-vs-rec"
            )
            cells.append(
                DomainModalityCell(
                    domain=domain,
                    modality=modality,
                    seed=seed_stats,
                    rec=rec_stats,
                    delta_variance=delta_var,
                    delta_intra=delta_intra,
                    jsd_seed_rec=cell_jsd,
                    wasserstein_scaled_seed_rec=cell_w,
                    missing=tuple(missing),
                )
            )

    cross_blocks: list[CrossDomainBlock] = []
    if domain_b:
        for modality in MODALITIES:
            missing = []
            cloud_a = _pool(clouds, domain_a, modality)
            cloud_b = _pool(clouds, domain_b, modality)
            block_jsd, block_w = _compare_clouds(cloud_a, cloud_b, cfg, missing, "cross-domain")
            cell_a = next(c for c in cells if c.domain == domain_a and c.modality == modality)
            cell_b = next(c for c in cells if c.domain == domain_b and c.modality == modality)
            norm_var = _normalized_shares(
                cell_a.delta_variance, cell_b.delta_variance, domains, missing, "delta variance"
            )
            norm_intra = _normalized_shares(
                cell_a.delta_intra, cell_b.delta_intra, domains, missing, "delta intra"
            )
            cross_blocks.append(
                CrossDomainBlock(
                    modality=modality,
                    jsd=block_jsd,
                    wasserstein_scaled=block_w,
                    normalized_delta_variance=norm_var,
                    normalized_delta_intra=norm_intra,
                    missing=tuple(missing),
                )
            )

    return DivergenceReport(
        domain_a=domain_a,
        domain_b=domain_b,
        config=cfg,
        cells=tuple(cells),
        cross=tuple(cross_blocks),
        gaps=tuple(gaps),
    )


def compare_domains(
    dataset_a: AuditDataset,
    dataset_b: AuditDataset,
    embeddings: EmbeddingSet,
    config: AnalysisConfig | None = None,
    keyframes_a: Mapping[str, object] | None = None,
    keyframes_b: Mapping[str, object] | None = None,
) -> DivergenceReport:
    """Full two-domain report straight from datasets and embeddings."""
    domain_a = _resolve_domain(dataset_a)
    domain_b = _resolve_domain(dataset_b)
    if domain_b == domain_a:  # comparing a dataset against itself
        domain_b = f"{domain_a} (B)"
    _, clouds_a, gaps_a = build_clouds(dataset_a, embeddings, domain_a, keyframes_a)
    _, clouds_b, gaps_b = build_clouds(dataset_b, embeddings, domain_b, keyframes_b)
    return report_from_clouds(
        domain_a, domain_b, {**clouds_a, **clouds_b}, config, gaps_a + gaps_b
    )


def analyze_single_domain(
    dataset: AuditDataset,
    embeddings: EmbeddingSet,
    config: AnalysisConfig | None = None,
    keyframes: Mapping[str, object] | None = None,
) -> DivergenceReport:
    """Per-cell report for one dataset; no cross-domain section."""
    domain, clouds, gaps = build_clouds(dataset, embeddings, keyframes=keyframes)
    return report_from_clouds(domain, "", clouds, config, gaps)


def _pool(clouds: CloudMap, domain: str, modality: str) -> PointCloud:
    seed = clouds[(domain, modality, "seed")]
    rec = clouds[(domain, modality, "rec")]
    if len(seed) == 0:
        return rec
    if len(rec) == 0:
        return seed
    return PointCloud(
        points=np.vstack([seed.points, rec.points]),
        labels=seed.labels + rec.labels,
    )


def _normalized_shares(
    delta_a: float | None,
    delta_b: float | None,
    domains: Sequence[str],
    missing: list[str],
    what: str,
) -> dict[str, float] | None:
    if delta_a is None or delta_b is None:
        missing.append(f"normalized {what}: missing deltas")
        return None
    try:
        share_a = cross_domain_normalize(delta_a, delta_b)
    except BothZero as exc:
        missing.append(f"normalized {what}: BothZero: {exc}")
        return None
    return {domains[0]: share_a, domains[1]: 1.0 - share_a}


def _stats_dict(stats: ClusterStats | None) -> dict | None:
    if stats is None:
        return None
    return {
        "n": stats.n,
        "variance": stats.variance,
        "intra_dist": stats.intra_dist,
        "intra_sampled": stats.intra_sampled,
        "centroid": list(stats.centroid),
    }


def report_to_dict(report: DivergenceReport) -> dict:
    """JSON-ready view with a stable key layout."""
    return {
        "domains": [d for d in (report.domain_a, report.domain_b) if d],
        "config": {
            "k_codebook": report.config.k_codebook,
            "n_slices": report.config.n_slices,
            "max_exact_n": report.config.max_exact_n,
            "rng_seed": report.config.rng_seed,
            "seeds": {
                "codebook": report.config.codebook_seed,
                "slices": report.config.slices_seed,
                "pairs": report.config.pairs_seed,
            },
        },
        "cells": {
            cell.domain: {
                c.modality: {
                    "seed": _stats_dict(c.seed),
                    "rec": _stats_dict(c.rec),
                    "delta_variance": c.delta_variance,
                    "delta_intra": c.delta_intra,
                    "jsd_seed_rec": c.jsd_seed_rec,
                    "wasserstein_scaled_seed_rec": c.wasserstein_scaled_seed_rec,
                    "missing": list(c.missing),
                }
                for c in report.cells
                if c.domain == cell.domain
            }
            for cell in report.cells
        },
        "cross_domain": {
            block.modality: {
                "jsd": block.jsd,
                "wasserstein_scaled": block.wasserstein_scaled,
                "normalized_delta_variance": dict(block.normalized_delta_variance)
                if block.normalized_delta_variance is not None
                else None,
                "normalized_delta_intra": dict(block.normalized_delta_intra)
                if block.normalized_delta_intra is not None
                else None,
                "missing": list(block.missing),
            }
            for block in report.cross
        },
        "gaps": list(report.gaps),
    }


def report_to_json(report: DivergenceReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _fmt(value: float | None, width: int = 10) -> str:
    return f"{value:{width}.4f}" if value is not None else " " * (width - 3) + "n/a"


def report_to_text(report: DivergenceReport) -> str:
    """Aligned tables mirroring the per-domain stats and cross metrics."""
    lines: list[str] = []
    if report.domain_b:
        lines.append(f"Domains: {report.domain_a} vs {report.domain_b}")
    else:
        lines.append(f"Domain: {report.domain_a}")
    lines.append("")
    lines.append("Per-domain cluster statistics (seed / recommended)")
    header = f"{'Domain':<16}{'Modality':<10}{'Seed Var':>10}{'Rec Var':>10}{'Seed Intra':>12}{'Rec Intra':>12}{'d Var':>10}{'d Intra':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for cell in report.cells:
        seed = cell.seed
        rec = cell.rec
        lines.append(
            f"{cell.domain:<16}{cell.modality:<10}"
            f"{_fmt(seed.variance if seed else None)}{_fmt(rec.variance if rec else None)}"
            f"{_fmt(seed.intra_dist if seed else None, 12)}{_fmt(rec.intra_dist if rec else None, 12)}"
            f"{_fmt(cell.delta_variance)}{_fmt(cell.delta_intra)}"
        )
    if report.cross:
        lines.append("")
        lines.append(
            f"Cross-domain divergence ({report.domain_a} share shown for normalized rows)"
        )
        header = f"{'Metric':<34}" + "".join(f"{m.capitalize():>12}" for m in MODALITIES)
        lines.append(header)
        lines.append("-" * len(header))
        rows: list[tuple[str, list[float | None]]] = [
            ("Jensen-Shannon Divergence", [report.cross_block(m).jsd for m in MODALITIES]),
            (
                "Wasserstein Distance (scaled)",
                [report.cross_block(m).wasserstein_scaled for m in MODALITIES],
            ),
            (
                "Normalized Δ Variance",
                [
                    (report.cross_block(m).normalized_delta_variance or {}).get(report.domain_a)
                    for m in MODALITIES
                ],
            ),
            (
                "Normalized Δ Intra-Dist",
                [
                    (report.cross_block(m).normalized_delta_intra or {}).get(report.domain_a)
                    for m in MODALITIES
                ],
            ),
        ]
        for label, values in rows:
            lines.append(f"{label:<34}" + "".join(_fmt(v, 12) for v in values))
    notes = [note for cell in report.cells for note in cell.missing]
    notes.extend(note for block in report.cross for note in block.missing)
    if notes:
        lines.append("")
        lines.append("Missing cells:")
        lines.extend(f"  - {note}" for note in notes)
    if report.gaps:
        lines.append("")
        lines.append(f"Coverage gaps: {len(report.gaps)}")
    return "\n".join(lines) + "\n"
