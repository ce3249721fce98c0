"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class TsragError(Exception):
    """Base class for all errors raised by this package."""


class DataError(TsragError, ValueError):
    """Bad input data: malformed files, invalid series, degenerate metrics."""


class KBFormatError(DataError):
    """A knowledge base file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class BackendError(TsragError, RuntimeError):
    """A forecasting backend failed (unreachable endpoint, bad reply)."""


class UnparsableResponse(BackendError):
    def __init__(self, raw: str, horizon: int):
        self.raw = raw
        self.horizon = horizon
        super().__init__(f"unparsable response: expected {horizon} numbers in {raw!r}")
