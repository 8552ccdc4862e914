"""Deterministic stand-ins for the caption and embedding models.

The stub embedding is a pure function of (payload bytes, server seed):
a keyed hash of the payload is expanded in counter mode to ``dim``
values in [-1, 1], then L2-normalized. No model weights, no float
ambiguity across platforms, restartable and cache-safe.
"""

from __future__ import annotations

import hashlib

import numpy as np

_BLOCK_WORDS = 8  # one 64-byte blake2b digest yields eight uint64 values
_TWO_63 = float(2**63)


def expand_unit_vector(payload: bytes, seed: int, dim: int) -> list[float]:
    """Seeded hash of the payload, expanded to a unit vector of ``dim``."""
    key = seed.to_bytes(8, "big")
    words: list[int] = []
    counter = 0
    while len(words) < dim:
        digest = hashlib.blake2b(
            counter.to_bytes(8, "big") + payload, key=key, digest_size=64
        ).digest()
        words.extend(
            int.from_bytes(digest[i : i + 8], "big") for i in range(0, 64, 8)
        )
        counter += 1
    raised = np.array(words[:dim], dtype=np.float64)
    vec = raised / _TWO_63 - 1.0  # uint64 range mapped onto [-1, 1)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:  # unreachable for a real hash; keeps the contract total
        vec[0], norm = 1.0, 1.0
    return [float(v) for v in vec / norm]


def stub_caption(payload: bytes) -> str:
    """Fixed template around a stable content hash; never empty."""
    return f"synthetic caption {hashlib.sha256(payload).hexdigest()[:12]}"
