"""Perceptual keyframe extraction from decoded frame sequences.

Salience between consecutive frames blends two cues, each normalized to
[0, 1] before mixing:

* color: per-channel 32-bin histogram L1 distance in YCbCr (BT.601,
  full range), channels weighted 0.6 luma / 0.2 / 0.2 chroma, each L1
  divided by 2 so disjoint histograms score 1;
* structure: mean absolute difference of the luma gradient-magnitude
  map (forward differences), divided by 255*sqrt(2).

The final score is the 50/50 average of the two cues; score[0] is 0 by
convention. Selection computes a threshold tau = mean + lambda * std of
the moving-average-smoothed series, then keeps raw-series local maxima
with raw score >= tau, greedily by descending raw score, dropping any
candidate closer than min_gap to an accepted index. Frame 0 is always
kept, so every video has at least one representative frame. A constant
(zero-std) series selects exactly {0}.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DriftAuditError

# BT.601 full-range RGB -> YCbCr. Luma weights sum to 1 and both chroma
# rows sum to 0, so a uniform RGB offset shifts luma by exactly that
# offset and leaves chroma untouched.
_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_N_BINS = 32
_CHANNEL_WEIGHTS = (0.6, 0.2, 0.2)
_GRAD_NORM = 255.0 * math.sqrt(2.0)


class DimensionMismatch(DriftAuditError):
    """Frames in one sequence do not share dimensions."""


class CountInconsistent(DriftAuditError):
    """Keyframe count exceeds frame count (or frame count is not positive)."""


@dataclass(frozen=True)
class FrameSequence:
    """An ordered stack of 8-bit RGB frames with uniform dimensions."""

    frames: np.ndarray  # (n, h, w, 3) uint8
    fps: float = 30.0

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[0] < 1 or f.shape[3] != 3:
            raise DimensionMismatch(f"expected (n, h, w, 3) frame stack, got shape {f.shape}")
        if f.dtype != np.uint8:
            raise DimensionMismatch(f"frames must be uint8, got {f.dtype}")
        if self.fps <= 0:
            raise DimensionMismatch("fps must be positive")

    @classmethod
    def from_frames(cls, frames: list[np.ndarray], fps: float = 30.0) -> "FrameSequence":
        if not frames:
            raise DimensionMismatch("need at least one frame")
        shape = frames[0].shape
        for i, fr in enumerate(frames):
            if fr.shape != shape:
                raise DimensionMismatch(f"frame {i} has shape {fr.shape}, expected {shape}")
        return cls(frames=np.stack(frames).astype(np.uint8), fps=fps)

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SalienceSeries:
    """Per-frame perceptual-change scores; scores[0] == 0."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", s)
        if s.ndim != 1 or len(s) < 1:
            raise DimensionMismatch("salience series must be a non-empty 1-D array")
        if (s < 0).any():
            raise DimensionMismatch("salience scores must be non-negative")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class KeyframeConfig:
    lam: float = 1.5  # adaptive-threshold multiplier
    min_gap: int = 5  # minimum index distance between keyframes
    smoothing_window: int = 3  # centered moving-average width, odd

    def __post_init__(self):
        if self.lam < 0:
            raise DriftAuditError("lambda must be >= 0")
        if self.min_gap < 1:
            raise DriftAuditError("min_gap must be >= 1")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise DriftAuditError("smoothing_window must be an odd integer >= 1")

    def config_hash(self) -> str:
        text = f"lam={self.lam!r};min_gap={self.min_gap};smoothing_window={self.smoothing_window}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class KeyframeSet:
    """Selected keyframe indices for one video."""

    indices: tuple[int, ...]
    n_frames: int
    config_hash: str

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        idx = self.indices
        if not idx or idx[0] != 0:
            raise DriftAuditError("index 0 must always be selected")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DriftAuditError("indices must be strictly increasing")
        if idx[-1] >= self.n_frames:
            raise DriftAuditError("index out of frame range")


def _to_ycbcr(frame: np.ndarray) -> np.ndarray:
    ycc = frame.astype(np.float64) @ _YCBCR.T
    ycc[..., 1] += 128.0
    ycc[..., 2] += 128.0
    return ycc


def _channel_histogram(channel: np.ndarray) -> np.ndarray:
    hist, _ = np.histogram(np.clip(channel, 0.0, 255.999), bins=_N_BINS, range=(0.0, 256.0))
    return hist / channel.size


def _gradient_magnitude(luma: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(luma)
    gy = np.zeros_like(luma)
    gx[:, :-1] = luma[:, 1:] - luma[:, :-1]
    gy[:-1, :] = luma[1:, :] - luma[:-1, :]
    return np.sqrt(gx * gx + gy * gy)


def frame_salience(seq: FrameSequence) -> SalienceSeries:
    """Perceptual distance of each frame to its predecessor."""
    n = len(seq)
    scores = np.zeros(n, dtype=np.float64)
    prev_hists = prev_grad = None
    for i in range(n):
        ycc = _to_ycbcr(seq.frames[i])
        hists = [_channel_histogram(ycc[..., c]) for c in range(3)]
        grad = _gradient_magnitude(ycc[..., 0])
        if i > 0:
            color = sum(
                w * np.abs(h - hp).sum() / 2.0
                for w, h, hp in zip(_CHANNEL_WEIGHTS, hists, prev_hists)
            )
            structure = np.abs(grad - prev_grad).mean() / _GRAD_NORM
            scores[i] = 0.5 * color + 0.5 * structure
        prev_hists, prev_grad = hists, grad
    return SalienceSeries(scores=scores)


def _smooth(scores: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return scores.copy()
    half = window // 2
    out = np.empty_like(scores)
    n = len(scores)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        out[i] = scores[lo:hi].mean()
    return out


def select_keyframes(series: SalienceSeries, cfg: KeyframeConfig = KeyframeConfig()) -> KeyframeSet:
    """Threshold-and-greedy keyframe selection over a salience series."""
    s = series.scores
    n = len(s)
    smoothed = _smooth(s, cfg.smoothing_window)
    std = float(smoothed.std())
    if std == 0.0:
        return KeyframeSet(indices=(0,), n_frames=n, config_hash=cfg.config_hash())
    tau = float(smoothed.mean()) + cfg.lam * std

    candidates = [
        i
        for i in range(1, n)
        if s[i] >= tau and s[i] >= s[i - 1] and (i == n - 1 or s[i] >= s[i + 1])
    ]
    accepted = [0]
    for i in sorted(candidates, key=lambda j: (-s[j], j)):
        if all(abs(i - j) >= cfg.min_gap for j in accepted):
            accepted.append(i)
    return KeyframeSet(indices=tuple(sorted(accepted)), n_frames=n, config_hash=cfg.config_hash())


def extract_keyframes(seq: FrameSequence, cfg: KeyframeConfig = KeyframeConfig()) -> KeyframeSet:
    """Salience scoring followed by selection; deterministic."""
    return select_keyframes(frame_salience(seq), cfg)


def compression_ratio(n_frames: int, n_keyframes: int) -> float:
    """Fraction of frames discarded by keyframe selection: 1 - k/n."""
    if n_frames <= 0:
        raise CountInconsistent(f"n_frames must be positive, got {n_frames}")
    if n_keyframes < 0 or n_keyframes > n_frames:
        raise CountInconsistent(f"n_keyframes {n_keyframes} out of range for {n_frames} frames")
    return 1.0 - n_keyframes / n_frames


def load_frame_dir(path: str | Path, fps: float = 30.0) -> FrameSequence:
    """Load a decoded frame directory (PNG files, lexicographic order)."""
    from PIL import Image

    frame_paths = sorted(Path(path).glob("*.png"))
    if not frame_paths:
        raise DimensionMismatch(f"no .png frames under {path}")
    frames = []
    for p in frame_paths:
        with Image.open(p) as img:
            frames.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
    return FrameSequence.from_frames(frames, fps=fps)
