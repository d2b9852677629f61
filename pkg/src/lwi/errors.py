"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class FormatError(ValueError):
    """Raised when a binary or text file does not match its expected layout.

    ``offset`` is the byte offset (binary formats) or line number (text
    formats) at which the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Raised for invalid experiment or loader configuration."""
