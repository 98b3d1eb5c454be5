class ConfigurationError(ValueError):
    """Invalid or mutually inconsistent configuration values."""


class FormatError(ValueError):
    """Malformed binary file or manifest.

    ``offset`` is the byte offset (or record position) where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class ConsistencyError(ValueError):
    """Files that are individually valid disagree with each other."""


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""
