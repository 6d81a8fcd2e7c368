"""
Exceptions raised by `crossrec`. Plain argument mistakes raise a `ValueError`,
these subclasses carry a bit more context for the cases the CLI reports on.
"""


class InteractionParseError(ValueError):
    """Raised when a line of an interactions file cannot be parsed."""

    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class ConfigError(ValueError):
    """Raised when a config key is missing, unknown or has the wrong type."""

    def __init__(self, key, message):
        super().__init__(f"config key `{key}`: {message}")
        self.key = key


class FrozenFormatError(ValueError):
    """Raised when a binary tensor file has the wrong magic, version, dim or checksum."""


class ProviderError(RuntimeError):
    """Raised when a tag provider keeps failing after all retries."""

    def __init__(self, message, transcript_path=None):
        super().__init__(message)
        self.transcript_path = transcript_path


class NonFiniteLossError(RuntimeError):
    """Raised when a loss or a stream output stops being finite."""

    def __init__(self, stream, message):
        super().__init__(f"non-finite values in stream `{stream}`: {message}")
        self.stream = stream
