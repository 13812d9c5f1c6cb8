"""Exception types shared across the package."""


class RagRouteError(Exception):
    """Base class for all package errors."""


class ValidationError(RagRouteError):
    """Input violated a documented precondition or invariant."""


class ParseError(RagRouteError):
    """A file or wire payload could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(RagRouteError):
    """A binary artifact has a bad magic, version, or length field."""


class TransportError(RagRouteError):
    """A backend call failed after the configured retries."""

    def __init__(self, message, attempts=1):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class TrainingDivergedError(RagRouteError):
    """The training loss became non-finite."""
