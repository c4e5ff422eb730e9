"""kansym — Symbolic regression with Kolmogorov-Arnold networks."""

__version__ = "0.1.0"

from kansym.errors import ConfigError, InvalidRunError, KanSymError, RunFailure

__all__ = ["ConfigError", "InvalidRunError", "KanSymError", "RunFailure", "__version__"]
