"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, data 3, training 4).
"""


class MetaTransferError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MetaTransferError, ValueError):
    pass


class DataError(MetaTransferError, ValueError):
    pass


class ShapeError(MetaTransferError, ValueError):
    pass


class TrainingError(MetaTransferError, RuntimeError):
    pass


class InapplicableSettingError(DataError):
    """A transfer setting cannot be evaluated for a course (e.g. no prior iterations)."""
