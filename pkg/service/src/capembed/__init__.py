"""Caption and embedding HTTP sidecar with a deterministic stub mode."""

from .app import create_app
from .config import ServiceConfig

__all__ = ["ServiceConfig", "create_app"]
