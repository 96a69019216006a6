"""Base exception shared by every sdtp module."""


class SdtpError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(SdtpError, ValueError):
    """Raised when a run configuration field is missing or invalid."""

    field: str

    def __init__(self, field: str, message: str) -> None:
        """Initialize ConfigError.

        Args:
            field (str): Dotted path of the offending field.
            message (str): What is wrong with it.
        """
        self.field = field
        super().__init__(f"{field}: {message}")
