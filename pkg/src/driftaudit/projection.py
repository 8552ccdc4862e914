"""2-D projections of embedding clouds, seed hulls, and plot CSVs.

The in-core projection is exact PCA (eigendecomposition of the
covariance with a deterministic sign convention), which keeps the
seed-vs-recommended spread testable against an independent oracle.
Externally computed 2-D coordinates (e.g. UMAP) can be imported from
CSV instead; hulls and plot exports work the same either way. No
rendering happens here: the emitted CSVs are the plotting interface.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .analysis import TooFewPoints
from .embeddings import PointCloud, PointLabel
from .errors import DriftAuditError

METHOD_PCA = "pca"
METHOD_IMPORTED = "imported"

POINTS_COLUMNS = ("video_id", "keyframe_index", "modality", "domain", "group", "depth", "x", "y")
HULLS_COLUMNS = ("group", "domain", "modality", "vertex_order", "x", "y")


class DegenerateCloud(DriftAuditError):
    """The cloud has no variance to project."""


class UnknownKeys(DriftAuditError):
    """Imported coordinates reference keys outside the embedding set."""

    def __init__(self, keys: Sequence[tuple]):
        self.keys = tuple(keys)
        shown = ", ".join(map(str, self.keys[:5]))
        more = "" if len(self.keys) <= 5 else f" (+{len(self.keys) - 5} more)"
        super().__init__(f"unknown keys in coordinate file: {shown}{more}")


class MalformedRow(DriftAuditError):
    """A coordinate CSV row is missing fields or fails to parse."""

    def __init__(self, row_no: int, reason: str):
        self.row_no = row_no
        self.reason = reason
        super().__init__(f"row {row_no}: {reason}")


class IoError(DriftAuditError):
    """Filesystem failure while writing plot data."""


@dataclass(frozen=True)
class Projection2D:
    """n points in the plane with provenance labels.

    labels may be empty for anonymous clouds, but plot export requires
    one label per point. explained_variance_ratio is None for imported
    coordinates.
    """

    coords: np.ndarray  # (n, 2) float64
    method: str
    labels: tuple[PointLabel, ...] = ()
    explained_variance_ratio: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.method not in (METHOD_PCA, METHOD_IMPORTED):
            raise DriftAuditError(f"unknown projection method {self.method!r}")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DriftAuditError(f"coords must be (n, 2), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise DriftAuditError("coords must be finite")
        if self.labels and len(self.labels) != self.coords.shape[0]:
            raise DriftAuditError(
                f"{len(self.labels)} labels for {self.coords.shape[0]} points"
            )
        if self.explained_variance_ratio is not None:
            r1, r2 = self.explained_variance_ratio
            if not (0.0 <= r2 <= r1 <= 1.0 and r1 + r2 <= 1.0):
                raise DriftAuditError(
                    f"ratios must be non-increasing in [0,1] summing <= 1, got ({r1}, {r2})"
                )
        self.coords.setflags(write=False)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class HullPolygon:
    """Convex hull vertices in counter-clockwise order.

    Collinear input collapses to a 2-vertex segment with degenerate
    set; consumers should draw it as a line, not a polygon.
    """

    vertices: np.ndarray  # (m, 2) float64
    degenerate: bool = False

    def __post_init__(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise DriftAuditError(f"vertices must be (m, 2), got {self.vertices.shape}")
        m = self.vertices.shape[0]
        if self.degenerate:
            if m != 2:
                raise DriftAuditError(f"degenerate hull must have 2 vertices, got {m}")
        elif m < 3:
            raise DriftAuditError(f"hull needs >= 3 vertices, got {m}")
        else:
            v = self.vertices
            for i in range(m):  # strict left turns all the way around
                o, a, b = v[i], v[(i + 1) % m], v[(i + 2) % m]
                if _cross(o, a, b) <= 0:
                    raise DriftAuditError("vertices are not strictly counter-clockwise convex")
        self.vertices.setflags(write=False)


def _as_points(points) -> tuple[np.ndarray, tuple[PointLabel, ...]]:
    if isinstance(points, PointCloud):
        return np.asarray(points.points, dtype=np.float64), points.labels
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise DriftAuditError(f"points must be 2-D, got shape {arr.shape}")
    return arr, ()


def pca_project(points, out_dim: int = 2) -> Projection2D:
    """Exact PCA onto the top principal plane.

    Sign convention: each direction's largest-magnitude component is
    made positive, so equal inputs always project identically.
    """
    pts, labels = _as_points(points)
    n, dim = pts.shape
    if n < 2:
        raise TooFewPoints(f"projection needs >= 2 points, got {n}")
    if out_dim != 2:
        raise DriftAuditError("only 2-D output is supported")
    if dim < out_dim:
        raise DriftAuditError(f"input dim {dim} < output dim {out_dim}")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / n
    trace = float(np.trace(cov))
    if trace <= 1e-24:
        raise DegenerateCloud("cloud has zero variance")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    directions = eigvecs[:, order].T  # (out_dim, dim)
    for i in range(out_dim):
        pivot = int(np.argmax(np.abs(directions[i])))
        if directions[i, pivot] < 0:
            directions[i] = -directions[i]
    # float fuzz can push an eigenvalue below 0 or the top share past 1
    # (rank-deficient clouds report tiny negative residual eigenvalues)
    r0 = min(max(float(eigvals[order[0]]) / trace, 0.0), 1.0)
    r1 = min(max(float(eigvals[order[1]]) / trace, 0.0), 1.0 - r0)
    ratios = [r0, r1]
    coords = centered @ directions.T
    return Projection2D(
        coords=coords,
        method=METHOD_PCA,
        labels=labels,
        explained_variance_ratio=(ratios[0], ratios[1]),
    )


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def convex_hull(points2d) -> HullPolygon:
    """Monotone-chain convex hull with minimal vertex set."""
    pts, _ = _as_points(points2d)
    if pts.shape[1] != 2:
        raise DriftAuditError(f"hull needs 2-D points, got dim {pts.shape[1]}")
    if pts.shape[0] < 3:
        raise TooFewPoints(f"hull needs >= 3 points, got {pts.shape[0]}")
    unique = np.unique(pts, axis=0)  # lexicographic sort, duplicates dropped
    if unique.shape[0] < 2:
        raise TooFewPoints("all points identical")
    if unique.shape[0] == 2:
        return HullPolygon(vertices=unique, degenerate=True)

    def _half(chain_pts):
        chain: list[np.ndarray] = []
        for p in chain_pts:
            while len(chain) >= 2 and _cross(chain[-2], chain[-1], p) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower = _half(unique)
    upper = _half(unique[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) == 2:
        return HullPolygon(vertices=np.array(hull), degenerate=True)
    return HullPolygon(vertices=np.array(hull))


def import_coords(path: str | Path, expected: Sequence[PointLabel]) -> Projection2D:
    """Load externally computed 2-D coordinates (e.g. UMAP) from CSV.

    Requires columns video_id, keyframe_index, modality, x, y; extra
    columns are ignored. Every row must match one of the expected
    labels; rows keep file order. A subset of the expected keys is
    allowed as long as at least 2 points remain.
    """
    path = Path(path)
    by_key = {
        (label.video_id, label.keyframe_index, label.modality): label for label in expected
    }
    coords: list[tuple[float, float]] = []
    labels: list[PointLabel] = []
    unknown: list[tuple] = []
    seen: set[tuple] = set()
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        required = {"video_id", "keyframe_index", "modality", "x", "y"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise MalformedRow(1, f"header must contain {sorted(required)}")
        for row_no, row in enumerate(reader, start=2):
            try:
                key = (row["video_id"], int(row["keyframe_index"]), row["modality"])
                x = float(row["x"])
                y = float(row["y"])
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRow(row_no, str(exc)) from None
            if key in seen:
                raise MalformedRow(row_no, f"duplicate key {key}")
            seen.add(key)
            if key not in by_key:
                unknown.append(key)
                continue
            coords.append((x, y))
            labels.append(by_key[key])
    if unknown:
        raise UnknownKeys(unknown)
    if len(coords) < 2:
        raise TooFewPoints(f"projection needs >= 2 points, file has {len(coords)}")
    return Projection2D(
        coords=np.array(coords, dtype=np.float64), method=METHOD_IMPORTED, labels=tuple(labels)
    )


HullKey = tuple[str, str, str]  # (group, domain, modality)


def emit_plot_data(
    proj: Projection2D,
    hulls: Mapping[HullKey, HullPolygon],
    path_prefix: str | Path,
) -> tuple[Path, Path]:
    """Write <prefix>_points.csv and <prefix>_hulls.csv, byte-stable.

    Floats are written with repr (shortest round-trip), rows in
    projection order and hulls sorted by key, so identical inputs
    always produce identical bytes.
    """
    if len(proj.labels) != len(proj):
        raise DriftAuditError("plot export needs one label per point")
    prefix = Path(path_prefix)
    points_path = prefix.parent / f"{prefix.name}_points.csv"
    hulls_path = prefix.parent / f"{prefix.name}_hulls.csv"
    try:
        with open(points_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(POINTS_COLUMNS)
            for label, (x, y) in zip(proj.labels, proj.coords):
                writer.writerow(
                    [
                        label.video_id,
                        label.keyframe_index,
                        label.modality,
                        label.domain,
                        label.group,
                        label.depth,
                        repr(float(x)),
                        repr(float(y)),
                    ]
                )
        with open(hulls_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HULLS_COLUMNS)
            for group, domain, modality in sorted(hulls):
                hull = hulls[(group, domain, modality)]
                for order, (x, y) in enumerate(hull.vertices):
                    writer.writerow(
                        [group, domain, modality, order, repr(float(x)), repr(float(y))]
                    )
    except OSError as exc:
        raise IoError(f"writing plot data under {prefix}: {exc}") from None
    return points_path, hulls_path


def hull_contains(hull: HullPolygon, point) -> bool:
    """True when the point is inside or on the hull (or its segment)."""
    p = np.asarray(point, dtype=np.float64)
    v = hull.vertices
    if hull.degenerate:
        a, b = v[0], v[1]
        if abs(_cross(a, b, p)) > 1e-9 * max(1.0, float(np.abs(v).max())):
            return False
        inside = (min(a[0], b[0]) - 1e-12 <= p[0] <= max(a[0], b[0]) + 1e-12) and (
            min(a[1], b[1]) - 1e-12 <= p[1] <= max(a[1], b[1]) + 1e-12
        )
        return inside
    scale = max(1.0, float(np.abs(v).max()))
    return all(
        _cross(v[i], v[(i + 1) % len(v)], p) >= -1e-9 * scale for i in range(len(v))
    )
