"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes or channel layouts do not agree."""


class FormatError(ValueError):
    """A dataset violates the on-disk or in-memory format rules."""


class IntegrityError(IOError):
    """An array file is missing or has the wrong byte count."""


class HistoryError(LookupError):
    """A required pollutant state is unavailable, or access would break causality."""


class ConfigError(ValueError):
    """Invalid configuration. ``path`` names the offending key, dotted."""

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
