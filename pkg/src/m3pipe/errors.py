"""Exception hierarchy. Each family maps onto one CLI exit code."""

from __future__ import annotations


class M3Error(Exception):
    exit_code = 1


class ValidationError(M3Error):
    """Bad input: malformed records, invalid config values, contract violations."""

    exit_code = 1


class RecordError(ValidationError):
    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class CheckpointMismatch(ValidationError):
    pass


class TransportError(M3Error):
    """A backend could not be reached or kept failing after retries."""

    exit_code = 2


class ProtocolError(TransportError):
    """A backend answered, but the response broke the wire contract."""

    def __init__(self, message: str, *, field: str | None = None):
        self.field = field
        super().__init__(message)


class IntegrityError(M3Error):
    """On-disk data does not match its manifest."""

    exit_code = 3
