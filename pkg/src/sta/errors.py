"""Exception types shared across the package."""


class StaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(StaError, ValueError):
    pass


class DomainError(StaError, ValueError):
    pass


class ContractError(StaError, ValueError):
    pass


class NonFiniteError(StaError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class ConfigError(StaError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(StaError):
    pass


class GenerationError(StaError):
    pass


class AugmentationError(StaError):
    pass


class MetricError(StaError):
    pass


class FormatError(StaError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(FormatError):
    """Checksum mismatch or truncated payload."""


class IncompatibleVersionError(FormatError):
    pass
