"""Exception types shared across the package."""


class RoadsenseError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RoadsenseError):
    """A value violates a data-model invariant.

    ``field`` names the offending field when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ParseError(RoadsenseError):
    """Input bytes could not be decoded.

    ``offset`` is the byte offset of the first problem when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ParseError):
    """The input declares a schema version this build does not speak."""


class StateMachineError(RoadsenseError):
    """An event is not valid for the current upload status."""


class NetworkError(RoadsenseError):
    """A sync request failed at the transport level."""
