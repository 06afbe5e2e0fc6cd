"""Exception hierarchy shared by every agcd module."""


class AgcdError(Exception):
    """Base class for all package errors."""


class ShapeError(AgcdError, ValueError):
    pass


class NumericError(AgcdError, ValueError):
    """Non-finite input or output where finite values are required."""


class ContractError(AgcdError, RuntimeError):
    """A documented precondition was violated."""


class ConfigError(AgcdError, ValueError):
    pass


class FormatError(AgcdError, ValueError):
    """A file did not match its declared binary/text layout."""


class LengthError(FormatError):
    """A payload ended before its declared length."""


class BackendError(AgcdError, RuntimeError):
    def __init__(self, message: str, retries: int = 0):
        super().__init__(f"{message} (after {retries} retries)" if retries else message)
        self.retries = retries


class PipelineError(AgcdError, RuntimeError):
    pass


class OrderingError(AgcdError, ValueError):
    pass


class CorruptionError(AgcdError, ValueError):
    """Stored content hash does not match recomputed hash."""


class NotFoundError(AgcdError, KeyError):
    pass


class DataError(AgcdError, RuntimeError):
    pass
