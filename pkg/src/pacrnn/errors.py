"""Exception hierarchy shared across the package.

Every error carries a short class name that the CLI prints as a
machine-parseable prefix (``error: DimensionError: ...``).
"""


class PacRnnError(Exception):
    """Base class for all package errors."""


class DimensionError(PacRnnError, ValueError):
    pass


class ParameterError(PacRnnError, ValueError):
    pass


class LabelError(PacRnnError, ValueError):
    pass


class StateError(PacRnnError, RuntimeError):
    pass


class DataError(PacRnnError, ValueError):
    pass


class SpecError(PacRnnError, ValueError):
    pass


class FormatError(PacRnnError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PacRnnError, ValueError):
    pass
