"""Service configuration, read once from the environment at startup."""

from __future__ import annotations

import os
from dataclasses import dataclass

MODES = ("stub", "model")


class ConfigError(ValueError):
    """An environment variable holds an unusable value."""


def _env_int(name: str, default: int, minimum: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


@dataclass(frozen=True)
class ServiceConfig:
    """Mode and limits for one server process.

    ``dim`` is the stub embedding dimension; in model mode the loaded
    backend owns the dimension and this value is ignored.
    """

    mode: str = "stub"
    stub_seed: int = 0
    dim: int = 64
    model_id: str = "stub"
    max_batch: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.max_batch < 1:
            raise ConfigError(f"max_batch must be >= 1, got {self.max_batch}")

    @classmethod
    def from_env(cls) -> "ServiceConfig":
        return cls(
            mode=os.environ.get("MODE", "stub"),
            stub_seed=_env_int("STUB_SEED", 0, minimum=0),
            dim=_env_int("STUB_DIM", 64, minimum=1),
            model_id=os.environ.get("MODEL_ID", "stub"),
            max_batch=_env_int("MAX_BATCH", 32, minimum=1),
        )
