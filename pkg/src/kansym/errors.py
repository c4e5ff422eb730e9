from __future__ import annotations

from enum import Enum


class RunFailure(str, Enum):
    """Reason codes attached to runs that produced no usable result."""
    NON_FINITE_LOSS = "non-finite-loss"
    PRUNED_ALL = "pruned-all"
    TIMEOUT = "timeout"
    ERROR = "error"


class KanSymError(Exception):
    """Base class for all kansym errors."""


class ConfigError(KanSymError):
    """Invalid configuration: bad flags, plan, manifest or formula."""


class ManifestError(ConfigError):
    """Manifest failed to parse or validate."""

    def __init__(self, message: str, line: int | None = None,
                 column: int | None = None) -> None:
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ExprSyntaxError(ConfigError):
    """Expression text does not match the grammar."""

    def __init__(self, message: str, text: str, position: int) -> None:
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position} in {text!r}")


class InvalidRunError(KanSymError):
    """A training or extraction run produced no usable model."""

    def __init__(self, reason: RunFailure, detail: str = "") -> None:
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
