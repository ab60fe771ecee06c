"""Exception types shared across the package."""


class DelibmtError(Exception):
    """Base class for package errors."""


class ShapeError(DelibmtError, ValueError):
    """Array shapes violate an operation's contract."""


class VocabularyError(DelibmtError, KeyError):
    """Unknown token, category, or out-of-range id."""


class MaskError(DelibmtError, ValueError):
    """An attention mask leaves a live query row with no attendable key."""


class OptimizerError(DelibmtError, ValueError):
    """Non-finite gradient or inconsistent optimizer state."""


class TrainingDivergedError(DelibmtError, RuntimeError):
    """Loss became non-finite during training."""


class FormatError(DelibmtError, ValueError):
    """A binary or text artifact does not match its file format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DelibmtError, ValueError):
    """Invalid run configuration; `key` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DegradeError(DelibmtError, ValueError):
    """Degradation strategy and resources do not match."""
