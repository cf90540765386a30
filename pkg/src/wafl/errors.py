"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class FormatError(ValueError):
    """A data file does not match its expected binary or JSON layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDataError(ValueError):
    """A metric window asks for more epochs than the stream holds."""
