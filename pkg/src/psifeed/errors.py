import enum


class ErrorCode(enum.IntEnum):
    """Wire error codes carried in Error frames."""

    BAD_FRAME = 1
    UNKNOWN_SESSION = 2
    RESOLUTION_MISMATCH = 3
    TAMPERED_TRANSCRIPT = 4
    SESSION_EXPIRED = 5
    INTERNAL = 6


class InputError(ValueError):
    """Caller supplied an invalid value (coordinates, resolution, rate, ...)."""


class ProtocolError(Exception):
    """A PSI exchange could not proceed; ``code`` is sent to the peer."""

    def __init__(self, code: ErrorCode, message: str = ""):
        self.code = ErrorCode(code)
        self.message = message or self.code.name.lower()
        super().__init__(f"{self.code.name.lower()}: {self.message}")
