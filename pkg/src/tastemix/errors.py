"""Exception types shared across the package."""


class TastemixError(Exception):
    """Base class for all package errors."""


class ConfigError(TastemixError, ValueError):
    """Invalid configuration or argument combination."""


class ParseError(TastemixError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(TastemixError, ValueError):
    """An operation needs at least one interaction and got none."""


class ContractError(TastemixError, ValueError):
    """A call violated an operation's precondition."""
