"""Error types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class DataError(ValueError):
    """Well-formed input carrying invalid values (NaN, cycles, ...)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ProtocolError(ValueError):
    """Malformed or inconsistent wire data."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
